"""Actor-critic training for the policy model and supervised training for
the regression twin.

The worker contract: each worker takes an atomic snapshot of the shared
parameters, rolls out / forwards against that frozen snapshot on its own
tape with its own rng stream, and applies the resulting whole-batch
gradient atomically. Gradients may be stale relative to the master copy;
that staleness is the usual A3C tolerance. With ``num_workers = 1`` the
loop is fully synchronous and bitwise reproducible from the seed.

Rng streams are derived deterministically from the config seed:
``SeedSequence([seed, 0])`` drives holdout selection and corruption,
``SeedSequence([seed, 1, worker_id, episode])`` drives each worker
episode (patch choice, noise, action sampling, in that order).
"""

from __future__ import annotations

import threading
from dataclasses import dataclass, asdict

import numpy as np

from . import data, env, inference, networks
from . import tensor as tz

_STREAM_HOLDOUT = 0
_STREAM_WORKER = 1

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

METRICS_HEADER = "update,policy_loss,value_loss,entropy,mse_loss,psnr_holdout"


class DivergedError(RuntimeError):
    """Training produced a non-finite loss or gradient."""


@dataclass
class TrainConfig:
    model_kind: str
    sigma_train: float = 25.0
    T: int = 5
    gamma: float = 0.95
    learning_rate: float = 1e-3
    batch_size: int = 16
    patch_size: int = 64
    total_updates: int = 1000
    num_workers: int = 1
    entropy_coef: float = 0.01
    grad_clip_norm: float = 40.0
    seed: int = 0
    value_loss_coef: float = 1.0
    use_full_returns: bool = False
    eval_every: int = 100
    holdout_patches: int = 16

    def __post_init__(self):
        if self.model_kind not in networks.MODEL_KINDS:
            raise ValueError(
                f"model_kind must be one of {networks.MODEL_KINDS}, got {self.model_kind!r}"
            )
        if self.sigma_train < 0:
            raise ValueError(f"sigma_train must be >= 0, got {self.sigma_train}")
        if self.T < 1:
            raise ValueError(f"T must be >= 1, got {self.T}")
        if not 0.0 < self.gamma <= 1.0:
            raise ValueError(f"gamma must be in (0, 1], got {self.gamma}")
        if self.learning_rate <= 0:
            raise ValueError(f"learning_rate must be > 0, got {self.learning_rate}")
        for field_name in ("batch_size", "patch_size", "total_updates", "num_workers",
                          "eval_every", "holdout_patches"):
            v = getattr(self, field_name)
            if not isinstance(v, (int, np.integer)) or v < 1:
                raise ValueError(f"{field_name} must be a positive integer, got {v!r}")
        if self.entropy_coef < 0:
            raise ValueError(f"entropy_coef must be >= 0, got {self.entropy_coef}")
        if self.value_loss_coef < 0:
            raise ValueError(f"value_loss_coef must be >= 0, got {self.value_loss_coef}")
        if self.grad_clip_norm <= 0:
            raise ValueError(f"grad_clip_norm must be > 0, got {self.grad_clip_norm}")


def clip_by_global_norm(grads, max_norm):
    """Scale the gradient list so its joint L2 norm is at most ``max_norm``.

    Returns (possibly rescaled grads, pre-clip norm). A non-finite norm is a
    diverged run, not a recoverable input problem.
    """
    sq = 0.0
    for g in grads:
        sq += float(np.vdot(g, g))
    if not np.isfinite(sq):
        raise DivergedError("non-finite gradient norm; aborting update")
    norm = float(np.sqrt(sq))
    if norm > max_norm:
        scale = max_norm / norm
        grads = [g * scale for g in grads]
    return grads, norm


class ParamStore:
    """Master parameters plus Adam state behind one lock.

    ``snapshot`` returns a deep copy taken under the lock, so readers never
    observe a half-applied update; ``apply_gradients`` clips to the global
    norm budget and performs one Adam step atomically.
    """

    def __init__(self, params, config):
        self.params = params
        self.config = config
        self.update_count = 0
        self._lock = threading.Lock()
        self._m = [np.zeros_like(p.data) for p in params.parameters()]
        self._v = [np.zeros_like(p.data) for p in params.parameters()]

    def snapshot(self):
        with self._lock:
            return self.params.clone()

    def apply_gradients(self, grads):
        """Clip, Adam-step, bump the counter; returns (count, pre-clip norm)."""
        grads, norm = clip_by_global_norm(grads, self.config.grad_clip_norm)
        lr = self.config.learning_rate
        with self._lock:
            self.update_count += 1
            t = self.update_count
            bc1 = 1.0 - ADAM_BETA1 ** t
            bc2 = 1.0 - ADAM_BETA2 ** t
            for p, g, m, v in zip(self.params.parameters(), grads, self._m, self._v):
                m *= ADAM_BETA1
                m += (1.0 - ADAM_BETA1) * g
                v *= ADAM_BETA2
                v += (1.0 - ADAM_BETA2) * (g * g)
                p.data -= lr * (m / bc1) / (np.sqrt(v / bc2) + ADAM_EPS)
            return self.update_count, norm


class _RolloutGraph:
    """Taped tensors a rollout leaves behind for the loss to consume."""

    __slots__ = ("tape", "params", "log_probs", "values", "entropies")

    def __init__(self, tape, params, log_probs, values, entropies):
        self.tape = tape
        self.params = params
        self.log_probs = log_probs
        self.values = values
        self.entropies = entropies


def rollout(params, clean_batch, config, rng, action_set=None, forced_actions=None):
    """Corrupt a clean batch and run T policy stages, recording the graph.

    Returns a TrajectoryBatch whose ``graph`` holds the tape plus the
    per-stage log-prob / value / entropy tensors, all tied to ``params``
    (the worker's snapshot). ``forced_actions`` (T, B, H, W) substitutes
    the categorical draw with given action indices — a test hook for
    exercising specific advantage signs.
    """
    if params.kind != "r3l":
        raise RuntimeError(f"rollout needs r3l params, got kind {params.kind!r}")
    if action_set is None:
        action_set = env.ActionSet()
    clean = np.asarray(clean_batch, dtype=np.float64)
    noisy = env.add_awgn(clean, config.sigma_train, rng)
    T = config.T
    shape = (T,) + clean.shape[:1] + clean.shape[2:]
    idx_all = np.empty(shape, dtype=np.int64)
    lp_all = np.empty(shape)
    rew_all = np.empty(shape)
    val_all = np.empty(shape)

    tape = tz.Tape()
    log_probs, values, entropies = [], [], []
    state = env.EnvState(noisy, clean, 0, T)
    for t in range(T):
        img = tz.Tensor(state.estimate / 255.0)
        feat = networks.encode(params, img, tape)
        probs = networks.policy_forward(params, feat, tape)
        vmap = networks.value_forward(params, feat, tape)
        if forced_actions is None:
            idx, lp = env.sample_actions(probs.data, rng)
        else:
            idx = np.asarray(forced_actions[t], dtype=np.int64)
            lp = np.log(np.take_along_axis(probs.data, idx[:, None], axis=1)[:, 0])
        logp_t = tz.log(tz.select_channels(probs, idx, tape), tape)
        ent_t = tz.entropy_channels(probs, tape)
        residuals = action_set.decode_map(idx)[:, None]
        nxt = env.apply_actions(state, residuals)
        rew = env.reward(clean, state.estimate, nxt.estimate)

        idx_all[t] = idx
        lp_all[t] = lp
        rew_all[t] = rew[:, 0]
        val_all[t] = vmap.data[:, 0]
        log_probs.append(logp_t)
        values.append(vmap)
        entropies.append(ent_t)
        state = nxt

    ret_all = np.empty(shape)
    if config.use_full_returns:
        full = env.discounted_return(list(rew_all), config.gamma)
        for t in range(T):
            ret_all[t] = full[t]
    else:
        # one-step bootstrap; value after the terminal stage is zero
        for t in range(T):
            boot = val_all[t + 1] if t + 1 < T else 0.0
            ret_all[t] = rew_all[t] + config.gamma * boot

    graph = _RolloutGraph(tape, params, log_probs, values, entropies)
    return env.TrajectoryBatch(idx_all, lp_all, rew_all, val_all, ret_all, graph=graph)


def a3c_update(store, traj, config):
    """One actor-critic update from a recorded rollout.

    Losses (means over all stage-pixels): value = (R - V)^2; policy =
    -log P(a) * (R - V) with the advantage held constant; entropy bonus
    subtracted with weight entropy_coef. Aborts on non-finite losses.
    """
    g = traj.graph
    if g is None:
        raise ValueError("trajectory carries no recorded forward graph")
    tape, params = g.tape, g.params
    T = traj.n_stages
    n = float(traj.rewards.size)
    advantage = traj.returns - traj.values

    val_acc = pol_acc = ent_acc = None
    for t in range(T):
        vd = tz.add_const(g.values[t], -traj.returns[t][:, None], tape)
        vsq = tz.square(vd, tape)
        pterm = tz.mul_const(g.log_probs[t], advantage[t][:, None], tape)
        val_acc = vsq if val_acc is None else tz.add(val_acc, vsq, tape)
        pol_acc = pterm if pol_acc is None else tz.add(pol_acc, pterm, tape)
        ent_acc = g.entropies[t] if ent_acc is None else tz.add(ent_acc, g.entropies[t], tape)

    value_loss = tz.scale(tz.sum_all(val_acc, tape), 1.0 / n, tape)
    policy_loss = tz.scale(tz.sum_all(pol_acc, tape), -1.0 / n, tape)
    entropy = tz.scale(tz.sum_all(ent_acc, tape), 1.0 / n, tape)

    metrics = {
        "policy_loss": policy_loss.item(),
        "value_loss": value_loss.item(),
        "entropy": entropy.item(),
    }
    if not all(np.isfinite(v) for v in metrics.values()):
        raise DivergedError(f"non-finite loss in a3c_update: {metrics}")

    total = tz.add(policy_loss, tz.scale(value_loss, config.value_loss_coef, tape), tape)
    if config.entropy_coef != 0.0:
        total = tz.add(total, tz.scale(entropy, -config.entropy_coef, tape), tape)

    params.zero_grad()
    tz.backward(total, tape)
    grads = [p.grad if p.grad is not None else np.zeros_like(p.data)
             for p in params.parameters()]
    count, gnorm = store.apply_gradients(grads)
    metrics["update"] = count
    metrics["grad_norm"] = gnorm
    return metrics


def r3n_update(store, clean_batch, config, rng):
    """One supervised update: unroll T regression stages, terminal MSE.

    Gradients flow through the whole unrolled chain; the shared weights
    accumulate one contribution per stage.
    """
    params = store.snapshot()
    if params.kind != "r3n":
        raise RuntimeError(f"r3n_update needs r3n params, got kind {params.kind!r}")
    clean = np.asarray(clean_batch, dtype=np.float64)
    noisy = env.add_awgn(clean, config.sigma_train, rng)

    tape = tz.Tape()
    est = tz.Tensor(noisy)
    for _ in range(config.T):
        img = tz.scale(est, 1.0 / 255.0, tape)
        feat = networks.encode(params, img, tape)
        res = networks.r3n_forward(params, feat, tape)
        est = tz.add(est, res, tape)
    diff = tz.add_const(est, -clean, tape)
    mse = tz.mean_all(tz.square(diff, tape), tape)

    mse_val = mse.item()
    if not np.isfinite(mse_val):
        raise DivergedError(f"non-finite loss in r3n_update: {mse_val}")

    params.zero_grad()
    tz.backward(mse, tape)
    grads = [p.grad if p.grad is not None else np.zeros_like(p.data)
             for p in params.parameters()]
    count, gnorm = store.apply_gradients(grads)
    return {"mse_loss": mse_val, "update": count, "grad_norm": gnorm}


def _fmt(x):
    """Deterministic CSV cell: exact-round-trip float repr, '' for absent."""
    if x is None:
        return ""
    return repr(float(x))


def evaluate_psnr(params, noisy_batch, clean_batch, T):
    """Mean PSNR (dB) of clipped, rounded T-stage outputs over a batch."""
    out = inference.denoise_batch(params, noisy_batch, T)
    scores = [data.psnr(clean_batch[i, 0], inference.clip_to_image(out[i, 0]))
              for i in range(out.shape[0])]
    return float(np.mean(scores))


class _MetricsLog:
    """Serialized CSV writer; rows come out strictly increasing in update."""

    def __init__(self, path):
        self._f = open(path, "w", encoding="ascii", newline="")
        self._f.write(METRICS_HEADER + "\n")
        self._lock = threading.Lock()
        self.last_update = 0
        self._sums = {}
        self._count = 0

    def accumulate(self, metrics):
        with self._lock:
            self._count += 1
            for k, v in metrics.items():
                if k in ("update", "grad_norm"):
                    continue
                self._sums[k] = self._sums.get(k, 0.0) + v

    def write_row(self, update, psnr_holdout):
        """Append one row averaging everything accumulated since the last."""
        with self._lock:
            if update <= self.last_update:
                return
            means = {k: v / self._count for k, v in self._sums.items()} if self._count else {}
            cells = [str(update),
                     _fmt(means.get("policy_loss")),
                     _fmt(means.get("value_loss")),
                     _fmt(means.get("entropy")),
                     _fmt(means.get("mse_loss")),
                     _fmt(psnr_holdout)]
            self._f.write(",".join(cells) + "\n")
            self._f.flush()
            self._sums = {}
            self._count = 0
            self.last_update = update

    def close(self):
        self._f.close()


def train(config, dataset, checkpoint_path, metrics_path):
    """Full training run: returns a summary dict, writes checkpoint + CSV.

    The metrics CSV gets one row per ``eval_every`` updates (and a final
    row), carrying loss means over the interval and the holdout PSNR at
    that point. With one worker the whole run, including both output
    files, is byte-reproducible from the config.
    """
    if len(dataset) == 0:
        raise ValueError("training dataset is empty")
    params = networks.init_params(config.model_kind, config.seed)
    store = ParamStore(params, config)
    action_set = env.ActionSet()

    holdout_rng = np.random.default_rng(
        np.random.SeedSequence([config.seed, _STREAM_HOLDOUT]))
    holdout_clean = data.sample_patches(
        dataset, config.patch_size, config.holdout_patches, holdout_rng)
    holdout_noisy = env.add_awgn(holdout_clean, config.sigma_train, holdout_rng)
    noisy_psnr = float(np.mean([
        data.psnr(holdout_clean[i, 0], inference.clip_to_image(holdout_noisy[i, 0]))
        for i in range(holdout_clean.shape[0])]))

    log = _MetricsLog(metrics_path)
    issue_lock = threading.Lock()
    issued = [0]
    eval_state = {"next": config.eval_every}
    eval_lock = threading.Lock()
    failures = []

    def maybe_eval(count):
        with eval_lock:
            if count < eval_state["next"]:
                return
            eval_state["next"] = (count // config.eval_every + 1) * config.eval_every
            score = evaluate_psnr(store.snapshot(), holdout_noisy, holdout_clean, config.T)
            log.write_row(count, score)

    def worker(worker_id):
        episode = 0
        try:
            while True:
                with issue_lock:
                    if issued[0] >= config.total_updates:
                        return
                    issued[0] += 1
                rng = np.random.default_rng(
                    np.random.SeedSequence([config.seed, _STREAM_WORKER, worker_id, episode]))
                episode += 1
                patches = data.sample_patches(
                    dataset, config.patch_size, config.batch_size, rng)
                snap = store.snapshot()
                if config.model_kind == "r3l":
                    traj = rollout(snap, patches, config, rng, action_set)
                    metrics = a3c_update(store, traj, config)
                else:
                    metrics = r3n_update(store, patches, config, rng)
                log.accumulate(metrics)
                maybe_eval(metrics["update"])
        except BaseException as e:  # surface worker failures to the caller
            failures.append(e)

    try:
        if config.num_workers == 1:
            worker(0)
        else:
            threads = [threading.Thread(target=worker, args=(i,), name=f"trainer-{i}")
                       for i in range(config.num_workers)]
            for th in threads:
                th.start()
            for th in threads:
                th.join()
        if failures:
            raise failures[0]
        final_psnr = None
        if log.last_update < config.total_updates:
            final_psnr = evaluate_psnr(
                store.snapshot(), holdout_noisy, holdout_clean, config.T)
            log.write_row(config.total_updates, final_psnr)
        else:
            final_psnr = evaluate_psnr(
                store.snapshot(), holdout_noisy, holdout_clean, config.T)
    finally:
        log.close()

    store.params.metadata = dict(asdict(config))
    store.params.metadata["final_psnr_holdout"] = repr(final_psnr)
    networks.save_checkpoint(store.params, checkpoint_path)
    return {
        "checkpoint": checkpoint_path,
        "metrics": metrics_path,
        "updates": config.total_updates,
        "final_psnr_holdout": final_psnr,
        "noisy_psnr_holdout": noisy_psnr,
    }
