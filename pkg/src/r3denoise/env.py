"""The residual-recovery MDP.

States are unclipped float estimates on the 0-255 scale, actions are
per-pixel integer residuals in [-13, 13], and the per-pixel reward is the
squared-error decrease achieved by a step. Everything here operates on
plain numpy arrays of shape (B, 1, H, W); the training code wraps arrays
into autodiff tensors only when they enter a network.

All randomness flows through numpy Generators (PCG64 streams; normals use
numpy's ziggurat implementation), so every operation is a pure function of
its inputs and the generator state.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .networks import RESIDUAL_LIMIT


class ActionSet:
    """Ordered residual values, by construction [-13, -12, ..., 12, 13].

    Invariants enforced: strictly increasing, symmetric around zero,
    contains zero (so the identity action exists).
    """

    def __init__(self, values=None):
        if values is None:
            limit = int(RESIDUAL_LIMIT)
            values = np.arange(-limit, limit + 1)
        vals = np.asarray(values, dtype=np.float64)
        if vals.ndim != 1 or vals.size < 1:
            raise ValueError("action set must be a non-empty 1-D sequence")
        if not np.all(np.diff(vals) > 0):
            raise ValueError("action set values must be strictly increasing")
        if not np.allclose(vals, -vals[::-1]):
            raise ValueError("action set must be symmetric around zero")
        if not np.any(vals == 0.0):
            raise ValueError("action set must contain the zero residual")
        self.values = vals
        self.values.setflags(write=False)

    def __len__(self):
        return self.values.size

    @property
    def zero_index(self):
        return int(np.argmax(self.values == 0.0))

    def decode(self, index):
        """Residual value for one action index; out of range is a logic error."""
        i = int(index)
        if not 0 <= i < self.values.size:
            raise RuntimeError(f"action index {i} outside [0, {self.values.size})")
        return float(self.values[i])

    def decode_map(self, indices):
        """Vectorized decode: integer index array -> float residual array."""
        idx = np.asarray(indices)
        if idx.size and (idx.min() < 0 or idx.max() >= self.values.size):
            raise RuntimeError(
                f"action indices outside [0, {self.values.size}): "
                f"min {idx.min()}, max {idx.max()}"
            )
        return self.values[idx]


def add_awgn(clean, sigma, rng):
    """clean + N(0, sigma^2) noise per pixel, on the 0-255 scale, unclipped.

    ``rng`` is a numpy Generator or a seed for one. The same generator
    state always yields bitwise-identical noise.
    """
    sigma = float(sigma)
    if sigma < 0:
        raise ValueError(f"sigma must be non-negative, got {sigma}")
    if not isinstance(rng, np.random.Generator):
        rng = np.random.default_rng(rng)
    x = np.asarray(clean, dtype=np.float64)
    return x + rng.normal(0.0, sigma, size=x.shape)


@dataclass
class EnvState:
    """Denoising episode state: current estimate, ground truth, stage clock."""

    estimate: np.ndarray
    clean: np.ndarray
    t: int
    T: int

    def __post_init__(self):
        self.estimate = np.asarray(self.estimate, dtype=np.float64)
        self.clean = np.asarray(self.clean, dtype=np.float64)
        if self.estimate.shape != self.clean.shape:
            raise ValueError(
                f"estimate shape {self.estimate.shape} != clean shape {self.clean.shape}"
            )
        if not 0 <= self.t <= self.T:
            raise ValueError(f"stage index t={self.t} outside [0, T={self.T}]")


def apply_actions(state, residual_map):
    """Additive transition I^{t+1} = I^t + residuals; no clipping."""
    res = np.asarray(residual_map, dtype=np.float64)
    if res.shape != state.estimate.shape:
        raise ValueError(
            f"residual shape {res.shape} != estimate shape {state.estimate.shape}"
        )
    if state.t >= state.T:
        raise RuntimeError(f"episode already terminal (t={state.t}, T={state.T})")
    return EnvState(state.estimate + res, state.clean, state.t + 1, state.T)


def reward(clean, prev, cur):
    """Per-pixel squared-error decrease: (x - prev)^2 - (x - cur)^2."""
    x = np.asarray(clean, dtype=np.float64)
    p = np.asarray(prev, dtype=np.float64)
    c = np.asarray(cur, dtype=np.float64)
    if x.shape != p.shape or x.shape != c.shape:
        raise ValueError(
            f"reward shapes differ: clean {x.shape}, prev {p.shape}, cur {c.shape}"
        )
    return (x - p) ** 2 - (x - c) ** 2


def discounted_return(rewards, gamma):
    """Backward recursion R^t = r^t + gamma * R^{t+1}, with R after the end = 0.

    Returns one array per stage. gamma = 1 is allowed (used by the
    telescoping consistency checks); discounting proper needs gamma < 1.
    """
    gamma = float(gamma)
    if not 0.0 < gamma <= 1.0:
        raise ValueError(f"gamma must be in (0, 1], got {gamma}")
    if len(rewards) == 0:
        raise ValueError("discounted_return needs at least one reward map")
    out = [None] * len(rewards)
    acc = np.zeros_like(np.asarray(rewards[-1], dtype=np.float64))
    for t in range(len(rewards) - 1, -1, -1):
        acc = np.asarray(rewards[t], dtype=np.float64) + gamma * acc
        out[t] = acc
    return out


def _check_normalized(probs):
    err = np.abs(probs.sum(axis=1) - 1.0).max()
    if err > 1e-6:
        raise ValueError(f"action probabilities not normalized (max |sum-1| = {err:.3g})")


def sample_actions(probs, rng):
    """Independent per-pixel categorical draw by inverse CDF along channels.

    probs: (B, n_actions, H, W), normalized per pixel. Returns
    (indices (B, H, W) int64, log_probs (B, H, W)).
    """
    p = np.asarray(probs, dtype=np.float64)
    if p.ndim != 4:
        raise ValueError(f"probs must be (B, A, H, W), got shape {p.shape}")
    _check_normalized(p)
    cdf = np.cumsum(p, axis=1)
    u = rng.random(size=(p.shape[0], 1) + p.shape[2:])
    # index of the first cdf entry exceeding u; guard the u ~ 1 edge where
    # floating-point cumsum can top out slightly below 1
    idx = np.minimum((cdf <= u).sum(axis=1), p.shape[1] - 1)
    chosen = np.take_along_axis(p, idx[:, None, :, :], axis=1)[:, 0]
    return idx.astype(np.int64), np.log(chosen)


def greedy_actions(probs):
    """Per-pixel argmax over the channel axis; ties go to the lowest index."""
    p = np.asarray(probs)
    if p.ndim != 4:
        raise ValueError(f"probs must be (B, A, H, W), got shape {p.shape}")
    return np.argmax(p, axis=1).astype(np.int64)


@dataclass
class TrajectoryBatch:
    """Numeric record of one rolled-out episode batch.

    All stage-major arrays have shape (T, B, H, W); ``action_indices`` is
    integer, the rest float. ``graph`` caches the taped forward pass the
    rollout ran (losses reuse it instead of recomputing); purely numeric
    consumers can ignore it.
    """

    action_indices: np.ndarray
    log_probs: np.ndarray
    rewards: np.ndarray
    values: np.ndarray
    returns: np.ndarray
    graph: object = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        shape = self.action_indices.shape
        for name in ("log_probs", "rewards", "values", "returns"):
            arr = getattr(self, name)
            if arr.shape != shape:
                raise ValueError(
                    f"trajectory field {name} has shape {arr.shape}, expected {shape}"
                )

    @property
    def n_stages(self):
        return self.action_indices.shape[0]
