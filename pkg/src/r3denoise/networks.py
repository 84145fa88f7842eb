"""Model definitions: shared dilated-conv encoder plus three heads.

Two model kinds share one encoder design:

* ``r3l`` — policy head (per-pixel distribution over the 27 residual
  actions) and value head (per-pixel scalar), trained with actor-critic.
* ``r3n`` — a single regression head whose tanh output is scaled to the
  same residual range, trained with terminal MSE.

Layer schedule (3x3 kernels everywhere)::

    encoder   dil 1,2,3,4   -> 64, 64, 64, 64   Conv+ReLU each
    policy    dil 3,2,1     -> 64, 64, 27       Conv+ReLU, Conv+ReLU, Conv+ReLU+Softmax
    value     dil 3,2,1     -> 64, 64, 1        Conv+ReLU, Conv+ReLU, Conv
    r3n       dil 3,2,1     -> 64, 64, 1        Conv+ReLU, Conv+ReLU, Conv+tanh, x13

Checkpoints are a single JSON document (see save_checkpoint) chosen over a
binary format so files are diffable and byte-reproducible: Python's float
repr round-trips exactly, and key order is fixed.
"""

from __future__ import annotations

import json
import os

import numpy as np

from . import tensor as tz

#: Largest per-stage residual magnitude, in 0-255 pixel units. The policy's
#: action set spans [-13, 13]; the regression head is tanh-scaled to match.
RESIDUAL_LIMIT = 13.0

N_ACTIONS_DEFAULT = 27

ENCODER_CHANNELS = 64

CHECKPOINT_FORMAT = "r3denoise-checkpoint"
CHECKPOINT_VERSION = 1

MODEL_KINDS = ("r3l", "r3n")


class CheckpointError(ValueError):
    """Raised when a checkpoint file is malformed or inconsistent."""


class ConvLayer:
    """One 3x3 convolution: weight (out_ch, in_ch, 3, 3), bias, dilation."""

    __slots__ = ("name", "weight", "bias", "dilation")

    def __init__(self, name, weight, bias, dilation):
        self.name = name
        self.weight = weight
        self.bias = bias
        self.dilation = int(dilation)

    @property
    def out_channels(self):
        return self.weight.shape[0]

    @property
    def in_channels(self):
        return self.weight.shape[1]


def _layer_plan(kind, n_actions):
    """(name, in_ch, out_ch, dilation) for every layer of a model kind."""
    plan = [
        ("encoder.0", 1, ENCODER_CHANNELS, 1),
        ("encoder.1", ENCODER_CHANNELS, ENCODER_CHANNELS, 2),
        ("encoder.2", ENCODER_CHANNELS, ENCODER_CHANNELS, 3),
        ("encoder.3", ENCODER_CHANNELS, ENCODER_CHANNELS, 4),
    ]
    if kind == "r3l":
        plan += [
            ("policy.0", ENCODER_CHANNELS, 64, 3),
            ("policy.1", 64, 64, 2),
            ("policy.2", 64, n_actions, 1),
            ("value.0", ENCODER_CHANNELS, 64, 3),
            ("value.1", 64, 64, 2),
            ("value.2", 64, 1, 1),
        ]
    else:
        plan += [
            ("r3n.0", ENCODER_CHANNELS, 64, 3),
            ("r3n.1", 64, 64, 2),
            ("r3n.2", 64, 1, 1),
        ]
    return plan


class ModelParams:
    """All layers of one model, grouped by role.

    ``layers`` maps layer name -> ConvLayer; convenience views ``encoder``,
    ``policy``, ``value``, ``r3n`` hold the per-role layer lists (absent
    roles are empty). Parameters are plain Tensors with requires_grad=True;
    forward passes never mutate them, so concurrent reads are safe.
    """

    def __init__(self, kind, layers, n_actions, seed=None, metadata=None):
        if kind not in MODEL_KINDS:
            raise ValueError(f"unknown model kind {kind!r}; expected one of {MODEL_KINDS}")
        self.kind = kind
        self.layers = dict(layers)
        self.n_actions = int(n_actions)
        self.seed = seed
        self.metadata = dict(metadata or {})

    def _role(self, prefix):
        out = []
        i = 0
        while f"{prefix}.{i}" in self.layers:
            out.append(self.layers[f"{prefix}.{i}"])
            i += 1
        return out

    @property
    def encoder(self):
        return self._role("encoder")

    @property
    def policy(self):
        return self._role("policy")

    @property
    def value(self):
        return self._role("value")

    @property
    def r3n(self):
        return self._role("r3n")

    def layer_names(self):
        return [name for name, _, _, _ in _layer_plan(self.kind, self.n_actions)]

    def parameters(self):
        """All parameter tensors in fixed (weight, bias) per-layer order."""
        out = []
        for name in self.layer_names():
            layer = self.layers[name]
            out.append(layer.weight)
            out.append(layer.bias)
        return out

    def zero_grad(self):
        for p in self.parameters():
            p.zero_grad()

    def clone(self):
        """Deep copy of all parameter data (grads are not copied)."""
        layers = {}
        for name in self.layer_names():
            src = self.layers[name]
            layers[name] = ConvLayer(
                name,
                tz.Tensor(src.weight.data.copy(), requires_grad=True, name=f"{name}.weight"),
                tz.Tensor(src.bias.data.copy(), requires_grad=True, name=f"{name}.bias"),
                src.dilation,
            )
        return ModelParams(self.kind, layers, self.n_actions, self.seed, dict(self.metadata))

    def copy_data_from(self, other):
        """In-place overwrite of parameter values from a same-shape model."""
        if other.kind != self.kind or other.n_actions != self.n_actions:
            raise ValueError("copy_data_from: incompatible models")
        for name in self.layer_names():
            self.layers[name].weight.data[...] = other.layers[name].weight.data
            self.layers[name].bias.data[...] = other.layers[name].bias.data


def init_params(kind, seed, n_actions=N_ACTIONS_DEFAULT):
    """He-initialized parameters, fully determined by ``seed``.

    Kernel entries ~ N(0, 2 / (in_ch * 9)); biases zero. Layers are drawn
    in the fixed plan order so a seed pins every weight.
    """
    if kind not in MODEL_KINDS:
        raise ValueError(f"unknown model kind {kind!r}; expected one of {MODEL_KINDS}")
    if n_actions < 1:
        raise ValueError(f"n_actions must be positive, got {n_actions}")
    rng = np.random.default_rng(seed)
    layers = {}
    for name, in_ch, out_ch, dilation in _layer_plan(kind, n_actions):
        std = np.sqrt(2.0 / (in_ch * 9))
        w = rng.normal(0.0, std, size=(out_ch, in_ch, 3, 3))
        layers[name] = ConvLayer(
            name,
            tz.Tensor(w, requires_grad=True, name=f"{name}.weight"),
            tz.Tensor(np.zeros((1, out_ch, 1, 1)), requires_grad=True, name=f"{name}.bias"),
            dilation,
        )
    return ModelParams(kind, layers, n_actions, seed=seed)


def _run_layers(x, layers, tape, relu_last):
    h = x
    for i, layer in enumerate(layers):
        h = tz.conv2d(h, layer.weight, layer.bias, layer.dilation, tape=tape)
        if relu_last or i + 1 < len(layers):
            h = tz.relu(h, tape=tape)
    return h


def encode(params, image, tape=None):
    """Image (B, 1, H, W), values in [0, 1], -> features (B, 64, H, W)."""
    if image.shape[1] != 1:
        raise ValueError(f"encode expects a single-channel image, got shape {image.shape}")
    return _run_layers(image, params.encoder, tape, relu_last=True)


def _check_features(feat):
    if feat.shape[1] != ENCODER_CHANNELS:
        raise ValueError(
            f"head input must have {ENCODER_CHANNELS} channels, got shape {feat.shape}"
        )


def policy_forward(params, feat, tape=None):
    """Features -> per-pixel action distribution (B, n_actions, H, W)."""
    if params.kind != "r3l":
        raise RuntimeError(f"policy_forward needs r3l params, got kind {params.kind!r}")
    _check_features(feat)
    logits = _run_layers(feat, params.policy, tape, relu_last=True)
    return tz.softmax_channels(logits, tape=tape)


def value_forward(params, feat, tape=None):
    """Features -> per-pixel value map (B, 1, H, W); final layer linear."""
    if params.kind != "r3l":
        raise RuntimeError(f"value_forward needs r3l params, got kind {params.kind!r}")
    _check_features(feat)
    return _run_layers(feat, params.value, tape, relu_last=False)


def r3n_forward(params, feat, tape=None):
    """Features -> residual map (B, 1, H, W) bounded to [-13, 13]."""
    if params.kind != "r3n":
        raise RuntimeError(f"r3n_forward needs r3n params, got kind {params.kind!r}")
    _check_features(feat)
    pre = _run_layers(feat, params.r3n, tape, relu_last=False)
    return tz.scale(tz.tanh(pre, tape=tape), RESIDUAL_LIMIT, tape=tape)


# ---------------------------------------------------------------------------
# Checkpoint I/O


def save_checkpoint(params, path):
    """Write ``params`` to ``path`` as deterministic JSON.

    Layout: one object with keys format, version, model_kind, n_actions,
    seed, metadata, layers; each layer holds name, dilation, weight_shape,
    and flat weight/bias lists. Identical params produce byte-identical
    files (floats are serialized with exact-round-trip repr, and key order
    is fixed), which is what makes training runs comparable byte-for-byte.
    """
    for p in params.parameters():
        if not np.all(np.isfinite(p.data)):
            raise CheckpointError(f"refusing to save non-finite parameter {p.name}")
    doc = {
        "format": CHECKPOINT_FORMAT,
        "version": CHECKPOINT_VERSION,
        "model_kind": params.kind,
        "n_actions": params.n_actions,
        "seed": params.seed,
        "metadata": params.metadata,
        "layers": [
            {
                "name": name,
                "dilation": params.layers[name].dilation,
                "weight_shape": list(params.layers[name].weight.shape),
                "weight": params.layers[name].weight.data.ravel().tolist(),
                "bias": params.layers[name].bias.data.ravel().tolist(),
            }
            for name in params.layer_names()
        ],
    }
    tmp = os.fspath(path) + ".tmp"
    with open(tmp, "w", encoding="ascii") as f:
        json.dump(doc, f, sort_keys=True, separators=(",", ":"), allow_nan=False)
        f.write("\n")
    os.replace(tmp, path)


def load_checkpoint(path):
    """Read a checkpoint written by save_checkpoint; validates everything."""
    try:
        with open(path, "r", encoding="ascii") as f:
            doc = json.load(f)
    except OSError as e:
        raise CheckpointError(f"cannot read checkpoint {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise CheckpointError(f"checkpoint {path} is not valid JSON: {e}") from e
    if not isinstance(doc, dict) or doc.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"checkpoint {path}: unrecognized file format")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"checkpoint {path}: unsupported version {doc.get('version')!r} "
            f"(expected {CHECKPOINT_VERSION})"
        )
    kind = doc.get("model_kind")
    if kind not in MODEL_KINDS:
        raise CheckpointError(f"checkpoint {path}: bad model_kind {kind!r}")
    n_actions = doc.get("n_actions")
    if not isinstance(n_actions, int) or n_actions < 1:
        raise CheckpointError(f"checkpoint {path}: bad n_actions {n_actions!r}")
    by_name = {}
    for entry in doc.get("layers", []):
        by_name[entry.get("name")] = entry
    layers = {}
    for name, in_ch, out_ch, dilation in _layer_plan(kind, n_actions):
        entry = by_name.pop(name, None)
        if entry is None:
            raise CheckpointError(f"checkpoint {path}: missing layer {name!r}")
        shape = tuple(entry.get("weight_shape", ()))
        if shape != (out_ch, in_ch, 3, 3):
            raise CheckpointError(
                f"checkpoint {path}: layer {name!r} has shape {shape}, "
                f"expected {(out_ch, in_ch, 3, 3)}"
            )
        if entry.get("dilation") != dilation:
            raise CheckpointError(
                f"checkpoint {path}: layer {name!r} has dilation "
                f"{entry.get('dilation')!r}, expected {dilation}"
            )
        w = np.asarray(entry.get("weight"), dtype=np.float64)
        b = np.asarray(entry.get("bias"), dtype=np.float64)
        if w.size != out_ch * in_ch * 9:
            raise CheckpointError(
                f"checkpoint {path}: layer {name!r} weight has {w.size} values, "
                f"expected {out_ch * in_ch * 9}"
            )
        if b.size != out_ch:
            raise CheckpointError(
                f"checkpoint {path}: layer {name!r} bias has {b.size} values, "
                f"expected {out_ch}"
            )
        layers[name] = ConvLayer(
            name,
            tz.Tensor(w.reshape(out_ch, in_ch, 3, 3), requires_grad=True, name=f"{name}.weight"),
            tz.Tensor(b.reshape(1, out_ch, 1, 1), requires_grad=True, name=f"{name}.bias"),
            dilation,
        )
    if by_name:
        raise CheckpointError(
            f"checkpoint {path}: unexpected extra layers {sorted(by_name)}"
        )
    return ModelParams(kind, layers, n_actions, seed=doc.get("seed"),
                       metadata=doc.get("metadata") or {})
