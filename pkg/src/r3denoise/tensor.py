"""4-D tensors with tape-based reverse-mode differentiation.

The operation set is exactly what the denoising networks and their training
losses need: dilated 3x3 convolution, relu / tanh, per-pixel channel softmax,
channel gather, and a handful of elementwise / reduction ops. Ops called with
``tape=None`` run forward-only, which is the inference fast path.

Gradient flow is recorded on an explicit :class:`Tape`: every op appends one
node, and :func:`backward` replays the nodes in exact reverse recording
order. Backward closures capture only the arrays they actually need, so
large intermediate activations are freed as soon as the graph no longer
references them.
"""

from __future__ import annotations

import itertools

import numpy as np

from . import kernels

_TAPE_UIDS = itertools.count(1)

# Probabilities below this are treated as zero by entropy_channels; keeps
# 0*log(0) out of the entropy term and bounds its gradient.
_ENTROPY_FLOOR = 1e-12


class Tensor:
    """A (batch, channels, height, width) float64 array, optionally taped.

    ``data`` is immutable once the tensor has entered a forward pass (only
    optimizers mutate parameter data, between passes). ``grad`` is allocated
    by :func:`backward` and accumulates additively until :meth:`zero_grad`.
    """

    __slots__ = ("data", "grad", "requires_grad", "tape_uid", "node_id", "name")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.ascontiguousarray(data, dtype=np.float64)
        if arr.ndim != 4:
            raise ValueError(f"tensors are 4-D (B, C, H, W); got shape {arr.shape}")
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self.tape_uid = None
        self.node_id = None
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    def zero_grad(self):
        self.grad = None

    def item(self):
        if self.data.size != 1:
            raise ValueError(f"item() needs a scalar tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag})"


class _Node:
    __slots__ = ("out_id", "backward_fn")

    def __init__(self, out_id, backward_fn):
        self.out_id = out_id
        self.backward_fn = backward_fn


class Tape:
    """Ordered record of forward operations.

    An op first resolves gradient sinks for its inputs with :meth:`sinks`
    (which registers parameter leaves on first sight), then records its
    backward closure with :meth:`record`. The backward pass visits nodes in
    exact reverse recording order, so an input's gradient is always complete
    before the node that produced it runs.
    """

    def __init__(self):
        self.uid = next(_TAPE_UIDS)
        self.nodes = []
        self._leaves = {}   # leaf_id -> Tensor
        self._leaf_ids = {} # id(Tensor) -> leaf_id, so shared leaves reuse one sink
        self._next_id = 0

    def __len__(self):
        return len(self.nodes)

    def _fresh_id(self):
        i = self._next_id
        self._next_id += 1
        return i

    def sinks(self, *inputs):
        """Gradient sink id per input tensor; None where no gradient flows.

        Leaf tensors (requires_grad, not produced by an op) are registered
        lazily and never mutated, so the same parameter tensor can feed any
        number of tapes over its lifetime. Tensors produced *by an op* belong
        to the tape that produced them; feeding them to another tape is a
        logic error.
        """
        out = []
        for t in inputs:
            if t.tape_uid == self.uid:
                out.append(t.node_id)
            elif t.tape_uid is not None:
                raise RuntimeError("input tensor belongs to a different tape")
            elif t.requires_grad:
                leaf_id = self._leaf_ids.get(id(t))
                if leaf_id is None:
                    leaf_id = self._fresh_id()
                    self._leaf_ids[id(t)] = leaf_id
                    self._leaves[leaf_id] = t
                out.append(leaf_id)
            else:
                out.append(None)
        return tuple(out)

    def record(self, out, backward_fn):
        out.tape_uid = self.uid
        out.node_id = self._fresh_id()
        self.nodes.append(_Node(out.node_id, backward_fn))


def _accumulate(grads, sink_id, g):
    if sink_id is None:
        return
    held = grads.get(sink_id)
    if held is None:
        grads[sink_id] = g
    else:
        held += g


def backward(loss, tape):
    """Accumulate d(loss)/d(leaf) into every leaf's ``grad`` buffer.

    ``loss`` must be a scalar tensor recorded on ``tape``. Repeated calls
    without zeroing the leaves accumulate additively.
    """
    if loss.tape_uid != tape.uid or loss.node_id is None:
        raise RuntimeError("backward: loss tensor was not recorded on this tape")
    if loss.data.size != 1:
        raise ValueError(f"backward: loss must be scalar, got shape {loss.shape}")
    grads = {loss.node_id: np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(node.out_id, None)
        if g is None:
            continue
        node.backward_fn(g, grads)
    for leaf_id, leaf in tape._leaves.items():
        g = grads.pop(leaf_id, None)
        if g is None:
            continue
        if leaf.grad is None:
            leaf.grad = g
        else:
            leaf.grad += g


# ---------------------------------------------------------------------------
# Operations


def conv2d(x, w, bias, dilation, tape=None):
    """Dilated 3x3 convolution with same-size zero padding.

    x: (B, C, H, W); w: (O, C, 3, 3); bias: per-output-channel tensor of
    shape (1, O, 1, 1). Output spatial size equals input spatial size for
    every dilation.
    """
    out_ch = w.shape[0]
    y = kernels.conv2d_forward(x.data, w.data, bias.data.ravel(), dilation)
    out = Tensor(y)
    if tape is not None:
        x_sink, w_sink, b_sink = tape.sinks(x, w, bias)
        x_data, w_data = x.data, w.data

        def bw(g, grads):
            dx, dw, db = kernels.conv2d_backward(
                x_data, w_data, g, dilation, need_dx=x_sink is not None
            )
            _accumulate(grads, x_sink, dx)
            _accumulate(grads, w_sink, dw)
            _accumulate(grads, b_sink, db.reshape(1, out_ch, 1, 1))

        tape.record(out, bw)
    return out


def relu(x, tape=None):
    y = np.maximum(x.data, 0.0)
    out = Tensor(y)
    if tape is not None:
        (x_sink,) = tape.sinks(x)

        def bw(g, grads):
            _accumulate(grads, x_sink, g * (y > 0.0))

        tape.record(out, bw)
    return out


def tanh(x, tape=None):
    y = np.tanh(x.data)
    out = Tensor(y)
    if tape is not None:
        (x_sink,) = tape.sinks(x)

        def bw(g, grads):
            _accumulate(grads, x_sink, g * (1.0 - y * y))

        tape.record(out, bw)
    return out


def softmax_channels(x, tape=None):
    """Per-pixel softmax over the channel axis, max-subtracted for stability."""
    z = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(z)
    p = e / e.sum(axis=1, keepdims=True)
    out = Tensor(p)
    if tape is not None:
        (x_sink,) = tape.sinks(x)

        def bw(g, grads):
            dot = (g * p).sum(axis=1, keepdims=True)
            _accumulate(grads, x_sink, p * (g - dot))

        tape.record(out, bw)
    return out


def select_channels(x, indices, tape=None):
    """Gather one channel per pixel: out[b, 0, i, j] = x[b, idx[b, i, j], i, j]."""
    idx = np.asarray(indices)
    if idx.shape != (x.shape[0],) + x.shape[2:]:
        raise ValueError(
            f"select_channels: indices shape {idx.shape} does not match {x.shape}"
        )
    idx4 = idx[:, None, :, :]
    y = np.take_along_axis(x.data, idx4, axis=1)
    out = Tensor(y)
    if tape is not None:
        (x_sink,) = tape.sinks(x)
        x_shape = x.shape

        def bw(g, grads):
            dx = np.zeros(x_shape)
            np.put_along_axis(dx, idx4, g, axis=1)
            _accumulate(grads, x_sink, dx)

        tape.record(out, bw)
    return out


def log(x, tape=None):
    y = np.log(x.data)
    out = Tensor(y)
    if tape is not None:
        (x_sink,) = tape.sinks(x)
        x_data = x.data

        def bw(g, grads):
            _accumulate(grads, x_sink, g / x_data)

        tape.record(out, bw)
    return out


def entropy_channels(p, tape=None):
    """Per-pixel entropy -sum_c p*log(p) of a channel distribution.

    Probabilities below 1e-12 contribute zero, which bounds the backward
    term; ``p`` is expected to come from softmax_channels.
    """
    safe = np.maximum(p.data, _ENTROPY_FLOOR)
    logp = np.log(safe)
    h = -(p.data * logp).sum(axis=1, keepdims=True)
    out = Tensor(h)
    if tape is not None:
        (p_sink,) = tape.sinks(p)

        def bw(g, grads):
            _accumulate(grads, p_sink, -g * (logp + 1.0))

        tape.record(out, bw)
    return out


def add(a, b, tape=None):
    if a.shape != b.shape:
        raise ValueError(f"add: shape mismatch {a.shape} vs {b.shape}")
    out = Tensor(a.data + b.data)
    if tape is not None:
        a_sink, b_sink = tape.sinks(a, b)

        def bw(g, grads):
            _accumulate(grads, a_sink, g)
            _accumulate(grads, b_sink, g.copy())

        tape.record(out, bw)
    return out


def add_const(x, c, tape=None):
    """x + c for a constant array or scalar (no gradient through c)."""
    out = Tensor(x.data + c)
    if tape is not None:
        (x_sink,) = tape.sinks(x)

        def bw(g, grads):
            _accumulate(grads, x_sink, g)

        tape.record(out, bw)
    return out


def scale(x, s, tape=None):
    s = float(s)
    out = Tensor(x.data * s)
    if tape is not None:
        (x_sink,) = tape.sinks(x)

        def bw(g, grads):
            _accumulate(grads, x_sink, g * s)

        tape.record(out, bw)
    return out


def mul_const(x, c, tape=None):
    """Elementwise x * c for a constant array of the same shape (or scalar)."""
    c = np.asarray(c, dtype=np.float64)
    if c.ndim and c.shape != x.shape:
        raise ValueError(f"mul_const: shape mismatch {x.shape} vs {c.shape}")
    out = Tensor(x.data * c)
    if tape is not None:
        (x_sink,) = tape.sinks(x)

        def bw(g, grads):
            _accumulate(grads, x_sink, g * c)

        tape.record(out, bw)
    return out


def square(x, tape=None):
    out = Tensor(x.data * x.data)
    if tape is not None:
        (x_sink,) = tape.sinks(x)
        x_data = x.data

        def bw(g, grads):
            _accumulate(grads, x_sink, 2.0 * x_data * g)

        tape.record(out, bw)
    return out


def sum_all(x, tape=None):
    """Sum of all elements, as a (1, 1, 1, 1) scalar tensor."""
    out = Tensor(x.data.sum().reshape(1, 1, 1, 1))
    if tape is not None:
        (x_sink,) = tape.sinks(x)
        x_shape = x.shape

        def bw(g, grads):
            _accumulate(grads, x_sink, np.full(x_shape, float(g.reshape(()))))

        tape.record(out, bw)
    return out


def mean_all(x, tape=None):
    """Mean of all elements, as a (1, 1, 1, 1) scalar tensor."""
    n = x.data.size
    out = Tensor(x.data.mean().reshape(1, 1, 1, 1))
    if tape is not None:
        (x_sink,) = tape.sinks(x)
        x_shape = x.shape

        def bw(g, grads):
            _accumulate(grads, x_sink, np.full(x_shape, float(g.reshape(())) / n))

        tape.record(out, bw)
    return out
