"""Pure-numpy dilated 3x3 convolution kernels.

Fallback backend used when the compiled extension is unavailable. Same
contract as ``_conv_ext``: float64, C-contiguous, NCHW layout, zero padding
of width ``dilation`` so spatial size is preserved.
"""

import numpy as np
from numpy.lib.stride_tricks import as_strided

BACKEND_NAME = "numpy"


def _im2col(xp, dilation, height, width):
    """Padded single image (C, H+2d, W+2d) -> column matrix (C*9, H*W)."""
    channels = xp.shape[0]
    sc, sh, sw = xp.strides
    windows = as_strided(
        xp,
        shape=(channels, 3, 3, height, width),
        strides=(sc, dilation * sh, dilation * sw, sh, sw),
    )
    return windows.reshape(channels * 9, height * width)


def conv2d_forward(x, w, bias, dilation):
    batch, channels, height, width = x.shape
    out_ch = w.shape[0]
    d = dilation
    xp = np.pad(x, ((0, 0), (0, 0), (d, d), (d, d)))
    w2 = w.reshape(out_ch, channels * 9)
    y = np.empty((batch, out_ch, height, width))
    for b in range(batch):
        cols = _im2col(xp[b], d, height, width)
        y[b] = (w2 @ cols).reshape(out_ch, height, width)
    y += bias.reshape(1, out_ch, 1, 1)
    return y


def conv2d_backward(x, w, dy, dilation, need_dx=True):
    batch, channels, height, width = x.shape
    out_ch = w.shape[0]
    d = dilation
    hw = height * width
    xp = np.pad(x, ((0, 0), (0, 0), (d, d), (d, d)))
    w2 = w.reshape(out_ch, channels * 9)

    dw2 = np.zeros((out_ch, channels * 9))
    dx = np.zeros_like(x) if need_dx else None
    for b in range(batch):
        dy_b = dy[b].reshape(out_ch, hw)
        cols = _im2col(xp[b], d, height, width)
        dw2 += dy_b @ cols.T
        if need_dx:
            dcols = (w2.T @ dy_b).reshape(channels, 3, 3, height, width)
            dxp = np.zeros((channels, height + 2 * d, width + 2 * d))
            for ky in range(3):
                for kx in range(3):
                    dxp[:, ky * d:ky * d + height, kx * d:kx * d + width] += dcols[:, ky, kx]
            dx[b] = dxp[:, d:d + height, d:d + width]

    dw = dw2.reshape(out_ch, channels, 3, 3)
    db = dy.sum(axis=(0, 2, 3))
    return dx, dw, db
