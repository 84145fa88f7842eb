"""Recursive greedy denoising.

Both models denoise by iterating a single deterministic stage map T times
with the same parameters every stage:

* policy model: I' = I + decode(argmax policy(encode(I/255)))
* regression model: I' = I + 13*tanh-head(encode(I/255))

Estimates stay float and unclipped between stages; clipping to [0, 255]
(and any rounding) happens only when an image leaves the library. The
batched helpers are the single implementation of the stage maps; training
holdout evaluation and the public single-image API both call them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import env, networks
from . import tensor as tz


@dataclass
class DenoiseRequest:
    """One denoising job: noisy (H, W) float image on the 0-255 scale."""

    noisy: np.ndarray
    params: networks.ModelParams
    T: int = 5
    emit_intermediates: bool = False

    def __post_init__(self):
        self.noisy = np.asarray(self.noisy, dtype=np.float64)
        if self.noisy.ndim != 2:
            raise ValueError(f"noisy image must be 2-D (H, W), got shape {self.noisy.shape}")
        if self.T < 1:
            raise ValueError(f"T must be >= 1, got {self.T}")


def r3l_stage_batch(params, estimates, action_set=None):
    """One greedy policy stage on a (B, 1, H, W) batch; returns the next batch."""
    if action_set is None:
        action_set = env.ActionSet()
    img = tz.Tensor(estimates / 255.0)
    feat = networks.encode(params, img)
    probs = networks.policy_forward(params, feat)
    idx = env.greedy_actions(probs.data)
    residuals = action_set.decode_map(idx)[:, None, :, :]
    return estimates + residuals


def r3n_stage_batch(params, estimates):
    """One regression stage on a (B, 1, H, W) batch."""
    img = tz.Tensor(estimates / 255.0)
    feat = networks.encode(params, img)
    res = networks.r3n_forward(params, feat)
    return estimates + res.data


def denoise_batch(params, noisy, T):
    """T stages of the appropriate model on a (B, 1, H, W) batch, unclipped."""
    est = np.asarray(noisy, dtype=np.float64)
    if params.kind == "r3l":
        action_set = env.ActionSet()
        for _ in range(T):
            est = r3l_stage_batch(params, est, action_set)
    else:
        for _ in range(T):
            est = r3n_stage_batch(params, est)
    return est


def clip_to_image(estimate):
    """Final output encoding: clip to [0, 255] and round half-to-even."""
    return np.clip(np.rint(estimate), 0.0, 255.0)


def _run(req, expected_kind, stage_fn):
    if req.params.kind != expected_kind:
        raise RuntimeError(
            f"model kind mismatch: request needs {expected_kind!r} "
            f"params, got {req.params.kind!r}"
        )
    est = req.noisy[None, None]
    intermediates = []
    for _ in range(req.T):
        est = stage_fn(est)
        if req.emit_intermediates:
            intermediates.append(est[0, 0].copy())
    final = clip_to_image(est[0, 0])
    if req.emit_intermediates:
        return final, intermediates
    return final


def denoise_r3l(req):
    """Greedy recursive denoising; returns the clipped final (H, W) image.

    With ``emit_intermediates`` returns (final, [I^1 .. I^T]) where the
    intermediates are the raw unclipped float estimates.
    """
    action_set = env.ActionSet()
    return _run(req, "r3l", lambda est: r3l_stage_batch(req.params, est, action_set))


def denoise_r3n(req):
    """Unrolled regression denoising; same conventions as denoise_r3l."""
    return _run(req, "r3n", lambda est: r3n_stage_batch(req.params, est))
