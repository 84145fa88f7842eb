"""Noise-level robustness sweep.

A trained model is evaluated at its training noise level and at nearby
levels it was *not* trained for (the misestimated-sigma protocol): each
test sigma corrupts every test image with seeded AWGN, the fixed model
denoises it, and the report collects mean PSNR per sigma plus the average
row. A 'noisy' column (PSNR of the corrupted input itself) rides along as
the no-op baseline.

Per-image corruption seeds derive from SeedSequence([seed, image_index,
round(sigma * 1000)]), so every method sees byte-identical noise and the
whole report is reproducible from (checkpoint, corpus, seed).
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np

from . import data, env, inference, networks

NOISY_COLUMN = "noisy"

DEFAULT_SIGMA_OFFSETS = (-10.0, -5.0, 0.0, 5.0, 10.0)


def default_test_sigmas(trained_sigma):
    """The five-sigma ladder around the training level: sigma -10 .. +10 by 5."""
    sigmas = [trained_sigma + off for off in DEFAULT_SIGMA_OFFSETS]
    if sigmas[0] < 0:
        raise ValueError(
            f"default sigma ladder for trained sigma {trained_sigma} dips below 0; "
            "pass explicit test_sigmas"
        )
    return sigmas


@dataclass
class SweepRow:
    test_sigma: float
    mean_psnr: dict  # method name -> mean PSNR dB
    n_images: int


@dataclass
class SweepReport:
    trained_sigma: float
    methods: list
    rows: list = field(default_factory=list)
    seed: int = 0

    def average(self):
        """Arithmetic mean over rows, per method (the tables' Average row)."""
        if not self.rows:
            raise ValueError("sweep report has no rows")
        return {m: float(np.mean([r.mean_psnr[m] for r in self.rows]))
                for m in self.methods}

    def column(self, method):
        return [r.mean_psnr[method] for r in self.rows]

    @property
    def test_sigmas(self):
        return [r.test_sigma for r in self.rows]


def _noise_rng(seed, image_index, sigma):
    key = int(round(float(sigma) * 1000))
    return np.random.default_rng(np.random.SeedSequence([seed, image_index, key]))


def sweep(checkpoint, images, test_sigmas=None, seed=0, T=None, method=None):
    """Evaluate one model across test sigmas; returns a SweepReport.

    ``checkpoint`` is a ModelParams or a path to a saved checkpoint. ``T``
    defaults to the checkpoint's training T when recorded, else 5. PSNR is
    computed on clipped, rounded 8-bit outputs (and likewise for the noisy
    baseline column).
    """
    if isinstance(checkpoint, networks.ModelParams):
        params = checkpoint
    else:
        params = networks.load_checkpoint(checkpoint)
    if len(images) == 0:
        raise ValueError("sweep needs a non-empty test set")
    trained_sigma = float(params.metadata.get("sigma_train", 0.0))
    if test_sigmas is None:
        test_sigmas = default_test_sigmas(trained_sigma)
    if len(test_sigmas) == 0:
        raise ValueError("test_sigmas must be non-empty")
    if T is None:
        T = int(params.metadata.get("T", 5))
    if method is None:
        method = params.kind

    report = SweepReport(trained_sigma, [method, NOISY_COLUMN], seed=seed)
    for sigma in test_sigmas:
        model_scores = []
        noisy_scores = []
        for i, img in enumerate(images):
            clean = np.asarray(img, dtype=np.float64)
            noisy = env.add_awgn(clean, sigma, _noise_rng(seed, i, sigma))
            out = inference.denoise_batch(params, noisy[None, None], T)[0, 0]
            model_scores.append(data.psnr(clean, inference.clip_to_image(out)))
            noisy_scores.append(data.psnr(clean, inference.clip_to_image(noisy)))
        report.rows.append(SweepRow(
            float(sigma),
            {method: float(np.mean(model_scores)),
             NOISY_COLUMN: float(np.mean(noisy_scores))},
            len(images),
        ))
    return report


def merge_reports(reports):
    """Combine per-model reports over the same corpus into one table.

    All inputs must share trained_sigma, seed, sigma rows, and image
    counts; the shared noisy baseline must agree exactly (it does when the
    corpus and seed match). Method columns keep first-seen order, with the
    noisy column moved to the end.
    """
    if not reports:
        raise ValueError("merge_reports needs at least one report")
    first = reports[0]
    methods = []
    for rep in reports:
        if rep.trained_sigma != first.trained_sigma or rep.seed != first.seed:
            raise ValueError("cannot merge sweeps with different trained sigma or seed")
        if [r.test_sigma for r in rep.rows] != [r.test_sigma for r in first.rows]:
            raise ValueError("cannot merge sweeps over different sigma ladders")
        if [r.n_images for r in rep.rows] != [r.n_images for r in first.rows]:
            raise ValueError("cannot merge sweeps over different test sets")
        for m in rep.methods:
            if m != NOISY_COLUMN and m not in methods:
                methods.append(m)
    merged = SweepReport(first.trained_sigma, methods + [NOISY_COLUMN], seed=first.seed)
    for k, row in enumerate(first.rows):
        scores = {}
        for rep in reports:
            for m, v in rep.rows[k].mean_psnr.items():
                if m in scores and scores[m] != v:
                    raise ValueError(
                        f"conflicting {m!r} values at sigma {row.test_sigma}: "
                        f"{scores[m]} vs {v}"
                    )
                scores[m] = v
        merged.rows.append(SweepRow(row.test_sigma, scores, row.n_images))
    return merged


def _fmt_cell(v):
    return "inf" if np.isinf(v) else f"{v:.2f}"


def to_markdown(report):
    """Aligned markdown table with the average row, plus a context header."""
    lines = [
        f"Trained sigma: {report.trained_sigma:g}. Seed: {report.seed}. "
        f"Images per row: {report.rows[0].n_images}.",
        "PSNR (dB) on clipped, rounded 8-bit outputs.",
        "",
    ]
    headers = ["test sigma"] + list(report.methods)
    body = [[f"{r.test_sigma:g}"] + [_fmt_cell(r.mean_psnr[m]) for m in report.methods]
            for r in report.rows]
    avg = report.average()
    body.append(["Average"] + [_fmt_cell(avg[m]) for m in report.methods])
    widths = [max(len(headers[c]), *(len(row[c]) for row in body))
              for c in range(len(headers))]
    def fmt_row(cells):
        return "| " + " | ".join(c.ljust(w) for c, w in zip(cells, widths)) + " |"
    lines.append(fmt_row(headers))
    lines.append("|" + "|".join("-" * (w + 2) for w in widths) + "|")
    lines.extend(fmt_row(row) for row in body)
    return "\n".join(lines) + "\n"


def to_csv(report, method):
    """CSV for one method column: test_sigma,mean_psnr_db,n_images."""
    if method not in report.methods:
        raise ValueError(f"method {method!r} not in report (has {report.methods})")
    lines = ["test_sigma,mean_psnr_db,n_images"]
    for r in report.rows:
        lines.append(f"{r.test_sigma:g},{repr(r.mean_psnr[method])},{r.n_images}")
    return "\n".join(lines) + "\n"


def write_report(report, out_base):
    """Write {out_base}.md plus one {out_base}.{method}.csv per column."""
    out_base = os.fspath(out_base)
    paths = []
    md_path = out_base + ".md"
    with open(md_path, "w", encoding="ascii") as f:
        f.write(to_markdown(report))
    paths.append(md_path)
    for m in report.methods:
        p = f"{out_base}.{m}.csv"
        with open(p, "w", encoding="ascii") as f:
            f.write(to_csv(report, m))
        paths.append(p)
    return paths
