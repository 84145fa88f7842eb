"""Command-line front end: ``train``, ``denoise``, ``sweep``.

Every option can also come from a flat JSON config file (``--config``);
precedence is command line > file > defaults, and unknown file keys are
rejected up front. Config keys and flags map one-to-one (the OPTS tables
below are the single source of both).

Exit codes: 0 success; 2 usage or configuration problem (bad flag values,
missing files named in the config, unwritable outputs); 3 failure while
processing data or checkpoints; 4 training diverged.

Set R3DENOISE_LOG_LEVEL (DEBUG/INFO/WARNING/ERROR) to control verbosity.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys

import numpy as np

from . import data, inference, networks, sweep as sweep_mod, training

log = logging.getLogger("r3denoise")


class ConfigError(Exception):
    """Invalid invocation or configuration; maps to exit code 2."""


class _Opt:
    def __init__(self, key, flag, type, help, required=False, default=None,
                 is_bool=False, is_list=False):
        self.key = key
        self.flag = flag
        self.type = type
        self.help = help
        self.required = required
        self.default = default
        self.is_bool = is_bool
        self.is_list = is_list


def _train_opts():
    cfg_fields = {f.name: f for f in dataclasses.fields(training.TrainConfig)}
    def d(name):
        f = cfg_fields[name]
        return None if f.default is dataclasses.MISSING else f.default
    return [
        _Opt("model_kind", "--model", str, "model kind: r3l or r3n", required=True),
        _Opt("sigma_train", "--sigma", float, "training noise level", default=d("sigma_train")),
        _Opt("T", "--T", int, "denoising stages per episode", default=d("T")),
        _Opt("gamma", "--gamma", float, "discount factor", default=d("gamma")),
        _Opt("learning_rate", "--lr", float, "Adam learning rate", default=d("learning_rate")),
        _Opt("batch_size", "--batch", int, "patches per update", default=d("batch_size")),
        _Opt("patch_size", "--patch", int, "square patch side", default=d("patch_size")),
        _Opt("total_updates", "--updates", int, "number of gradient updates",
             default=d("total_updates")),
        _Opt("num_workers", "--workers", int, "training worker threads",
             default=d("num_workers")),
        _Opt("entropy_coef", "--entropy-coef", float, "entropy bonus weight",
             default=d("entropy_coef")),
        _Opt("grad_clip_norm", "--grad-clip", float, "global gradient norm cap",
             default=d("grad_clip_norm")),
        _Opt("seed", "--seed", int, "master seed", default=d("seed")),
        _Opt("value_loss_coef", "--value-loss-coef", float, "value loss weight",
             default=d("value_loss_coef")),
        _Opt("use_full_returns", "--full-returns", None,
             "Monte-Carlo returns instead of one-step bootstrap",
             default=d("use_full_returns"), is_bool=True),
        _Opt("eval_every", "--eval-every", int, "updates between holdout evals",
             default=d("eval_every")),
        _Opt("holdout_patches", "--holdout-patches", int, "held-out patch count",
             default=d("holdout_patches")),
        _Opt("data", "--data", str, "directory of training PGM images", required=True),
        _Opt("checkpoint_out", "--checkpoint-out", str, "checkpoint output path",
             default="checkpoint.json"),
        _Opt("metrics_out", "--metrics-out", str, "metrics CSV output path",
             default="metrics.csv"),
    ]


def _denoise_opts():
    return [
        _Opt("checkpoint", "--checkpoint", str, "trained checkpoint path", required=True),
        _Opt("input", "--input", str, "noisy input PGM", required=True),
        _Opt("output", "--output", str, "denoised output PGM", required=True),
        _Opt("T", "--T", int, "denoising stages", default=5),
        _Opt("clean", "--clean", str, "ground-truth PGM; prints per-stage PSNR"),
        _Opt("emit_intermediates", "--emit-intermediates", str,
             "directory for per-stage estimates I1..IT"),
    ]


def _sweep_opts():
    return [
        _Opt("checkpoint", "--checkpoint", str, "trained checkpoint path", required=True),
        _Opt("testset", "--testset", str, "directory of test PGM images", required=True),
        _Opt("sigmas", "--sigmas", float, "comma-separated test sigmas "
             "(default: trained sigma -10..+10 step 5)", is_list=True),
        _Opt("seed", "--seed", int, "corruption seed", default=0),
        _Opt("T", "--T", int, "denoising stages (default: from checkpoint)"),
        _Opt("out", "--out", str, "output base path (writes .md and .csv files)",
             default="sweep_report"),
    ]


_COMMANDS = {
    "train": (_train_opts, "train a model on a directory of PGM images"),
    "denoise": (_denoise_opts, "denoise one PGM with a trained checkpoint"),
    "sweep": (_sweep_opts, "evaluate a checkpoint across noise levels"),
}


def build_parser():
    parser = argparse.ArgumentParser(
        prog="r3denoise",
        description="pixel-wise residual denoising: train, run, and evaluate",
    )
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (opts_fn, help_text) in _COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", help="flat JSON config file (flags override it)")
        for o in opts_fn():
            if o.is_bool:
                p.add_argument(o.flag, dest=o.key, default=None,
                               action=argparse.BooleanOptionalAction, help=o.help)
            else:
                # file/defaults may satisfy "required"; enforced after merging
                p.add_argument(o.flag, dest=o.key, default=None, type=str, help=o.help)
    return parser


def _coerce(opt, value, source):
    if value is None or opt.is_bool:
        return value
    try:
        if opt.is_list:
            if isinstance(value, str):
                value = [v for v in value.split(",") if v != ""]
            return [opt.type(v) for v in value]
        if opt.type is int:
            if isinstance(value, bool) or (isinstance(value, float) and not value.is_integer()):
                raise ValueError(value)
            return int(value)
        return opt.type(value)
    except (TypeError, ValueError):
        raise ConfigError(
            f"{source}: cannot read {opt.key!r} value {value!r} as {opt.type.__name__}"
        ) from None


def resolve_options(args, opts):
    """defaults < config file < command line; returns a plain dict."""
    merged = {o.key: o.default for o in opts}
    by_key = {o.key: o for o in opts}
    if args.config is not None:
        if not os.path.isfile(args.config):
            raise ConfigError(f"config file not found: {args.config}")
        try:
            with open(args.config, "r", encoding="utf-8") as f:
                doc = json.load(f)
        except json.JSONDecodeError as e:
            raise ConfigError(f"config file {args.config} is not valid JSON: {e}") from None
        if not isinstance(doc, dict):
            raise ConfigError(f"config file {args.config} must hold a JSON object")
        unknown = sorted(set(doc) - set(by_key))
        if unknown:
            raise ConfigError(
                f"config file {args.config} has unknown keys: {', '.join(unknown)}"
            )
        for k, v in doc.items():
            o = by_key[k]
            if o.is_bool and not isinstance(v, bool):
                raise ConfigError(f"{args.config}: key {k!r} must be true/false, got {v!r}")
            merged[k] = _coerce(o, v, args.config)
    for o in opts:
        v = getattr(args, o.key)
        if v is not None:
            merged[o.key] = v if o.is_bool else _coerce(o, v, f"flag {o.flag}")
    for o in opts:
        if o.required and merged[o.key] is None:
            raise ConfigError(f"missing required option {o.flag} (config key {o.key!r})")
    return merged


def _require_file(path, what):
    if not os.path.isfile(path):
        raise ConfigError(f"{what} not found: {path}")


def _require_writable(path, what):
    parent = os.path.dirname(os.path.abspath(path))
    if not os.path.isdir(parent):
        raise ConfigError(f"cannot write {what} {path}: directory {parent} does not exist")
    if not os.access(parent, os.W_OK):
        raise ConfigError(f"cannot write {what} {path}: directory {parent} is not writable")


def _load_testset(directory, what):
    if not os.path.isdir(directory):
        raise ConfigError(f"{what} directory not found: {directory}")
    try:
        return data.load_dataset(directory)
    except ValueError as e:
        raise ConfigError(str(e)) from None


def cmd_train(options):
    try:
        config = training.TrainConfig(**{
            k: v for k, v in options.items()
            if k not in ("data", "checkpoint_out", "metrics_out")})
    except ValueError as e:
        raise ConfigError(f"invalid training config: {e}") from None
    dataset = _load_testset(options["data"], "training data")
    _require_writable(options["checkpoint_out"], "checkpoint")
    _require_writable(options["metrics_out"], "metrics CSV")
    log.info("training %s for %d updates (sigma=%g, seed=%d)",
             config.model_kind, config.total_updates, config.sigma_train, config.seed)
    summary = training.train(config, dataset,
                             options["checkpoint_out"], options["metrics_out"])
    print(f"checkpoint: {summary['checkpoint']}")
    print(f"metrics: {summary['metrics']}")
    print(f"holdout PSNR (noisy input): {summary['noisy_psnr_holdout']:.2f} dB")
    print(f"holdout PSNR (final): {summary['final_psnr_holdout']:.2f} dB")
    return 0


def cmd_denoise(options):
    _require_file(options["checkpoint"], "checkpoint")
    _require_file(options["input"], "input image")
    _require_writable(options["output"], "output image")
    if options["clean"] is not None:
        _require_file(options["clean"], "clean image")
    inter_dir = options["emit_intermediates"]
    if inter_dir is not None:
        os.makedirs(inter_dir, exist_ok=True)

    params = networks.load_checkpoint(options["checkpoint"])
    noisy = data.load_pgm(options["input"])
    T = options["T"] if options["T"] is not None else 5
    req = inference.DenoiseRequest(noisy, params, T=T, emit_intermediates=True)
    runner = inference.denoise_r3l if params.kind == "r3l" else inference.denoise_r3n
    final, intermediates = runner(req)
    data.save_pgm(options["output"], final)
    log.info("wrote %s", options["output"])

    if inter_dir is not None:
        for i, est in enumerate(intermediates, start=1):
            data.save_pgm(os.path.join(inter_dir, f"I{i}.pgm"), est)
    if options["clean"] is not None:
        clean = data.load_pgm(options["clean"])
        print(f"input PSNR: {data.psnr(clean, inference.clip_to_image(noisy)):.2f} dB")
        for i, est in enumerate(intermediates, start=1):
            score = data.psnr(clean, inference.clip_to_image(est))
            print(f"stage {i} PSNR: {score:.2f} dB")
    return 0


def cmd_sweep(options):
    _require_file(options["checkpoint"], "checkpoint")
    images = _load_testset(options["testset"], "test set")
    _require_writable(options["out"] + ".md", "report")
    params = networks.load_checkpoint(options["checkpoint"])
    sigmas = options["sigmas"]
    if sigmas is None:
        trained = float(params.metadata.get("sigma_train", 0.0))
        try:
            sigmas = sweep_mod.default_test_sigmas(trained)
        except ValueError as e:
            raise ConfigError(str(e)) from None
    report = sweep_mod.sweep(params, images, test_sigmas=sigmas,
                             seed=options["seed"], T=options["T"])
    paths = sweep_mod.write_report(report, options["out"])
    sys.stdout.write(sweep_mod.to_markdown(report))
    for p in paths:
        log.info("wrote %s", p)
    return 0


_RUNNERS = {"train": cmd_train, "denoise": cmd_denoise, "sweep": cmd_sweep}


def main(argv=None):
    level = os.environ.get("R3DENOISE_LOG_LEVEL", "WARNING").upper()
    logging.basicConfig(level=getattr(logging, level, logging.WARNING),
                        format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    opts_fn, _ = _COMMANDS[args.command]
    try:
        options = resolve_options(args, opts_fn())
        return _RUNNERS[args.command](options)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except training.DivergedError as e:
        print(f"error: training diverged: {e}", file=sys.stderr)
        return 4
    except (data.PgmError, networks.CheckpointError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except (ValueError, RuntimeError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 3


def entry_point():
    sys.exit(main(argv=sys.argv[1:]))


if __name__ == "__main__":
    entry_point()
