"""Convolution kernel backends.

The compiled Cython core is preferred when it built; the pure-numpy fallback
is always available. Selection happens at import time and can be forced with
the ``R3DENOISE_BACKEND`` environment variable (``compiled``, ``numpy`` or
``auto``). ``use_backend`` swaps the active backend temporarily, which the
tests and the kernel benchmark rely on.
"""

import contextlib
import os

import numpy as np

from . import _numpy_kernels

_BACKENDS = {"numpy": _numpy_kernels}
try:
    from . import _conv_ext
    _BACKENDS["compiled"] = _conv_ext
except ImportError:
    _conv_ext = None

_requested = os.environ.get("R3DENOISE_BACKEND", "auto")
if _requested == "auto":
    _active = _BACKENDS.get("compiled", _numpy_kernels)
elif _requested in _BACKENDS:
    _active = _BACKENDS[_requested]
else:
    raise ImportError(
        f"R3DENOISE_BACKEND={_requested!r} unavailable; "
        f"built backends: {sorted(_BACKENDS)}"
    )


def backend_name():
    """Name of the backend in use: 'compiled' or 'numpy'."""
    return _active.BACKEND_NAME


def available_backends():
    return sorted(_BACKENDS)


@contextlib.contextmanager
def use_backend(name):
    """Temporarily switch the active backend (not thread safe)."""
    global _active
    if name not in _BACKENDS:
        raise ValueError(f"unknown backend {name!r}; built: {sorted(_BACKENDS)}")
    previous = _active
    _active = _BACKENDS[name]
    try:
        yield
    finally:
        _active = previous


def _as_c_f64(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def _validate(x, w, bias, dilation):
    if x.ndim != 4 or w.ndim != 4:
        raise ValueError(
            f"conv2d expects 4-D input and kernel, got {x.shape} and {w.shape}"
        )
    if w.shape[2:] != (3, 3):
        raise ValueError(f"conv2d kernels are 3x3, got kernel shape {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise ValueError(
            f"conv2d channel mismatch: input {x.shape} vs kernel {w.shape}"
        )
    if bias.shape != (w.shape[0],):
        raise ValueError(
            f"conv2d bias shape {bias.shape} does not match kernel {w.shape}"
        )
    if not isinstance(dilation, (int, np.integer)) or dilation < 1:
        raise ValueError(f"dilation must be a positive int, got {dilation!r}")


def conv2d_forward(x, w, bias, dilation):
    """Same-size dilated 3x3 convolution, NCHW float64.

    x: (B, C, H, W), w: (O, C, 3, 3), bias: (O,). Zero padding of width
    ``dilation`` on each border keeps the output spatial size equal to the
    input's.
    """
    x, w, bias = _as_c_f64(x), _as_c_f64(w), _as_c_f64(bias)
    _validate(x, w, bias, dilation)
    return _active.conv2d_forward(x, w, bias, int(dilation))


def conv2d_backward(x, w, dy, dilation, need_dx=True):
    """Gradients of conv2d_forward: returns (dx or None, dw, db)."""
    x, w, dy = _as_c_f64(x), _as_c_f64(w), _as_c_f64(dy)
    _validate(x, w, np.zeros(w.shape[0] if w.ndim == 4 else 0), dilation)
    if dy.shape != (x.shape[0], w.shape[0], x.shape[2], x.shape[3]):
        raise ValueError(
            f"conv2d_backward: dy shape {dy.shape} inconsistent with "
            f"input {x.shape} and kernel {w.shape}"
        )
    return _active.conv2d_backward(x, w, dy, int(dilation), bool(need_dx))
