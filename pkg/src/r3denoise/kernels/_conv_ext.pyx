# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled dilated 3x3 convolution kernels.

Hot path of every forward/backward pass: per-image im2col gather at C speed
feeding BLAS dgemm. Layout contract matches the numpy fallback (float64,
C-contiguous, NCHW, zero padding of width ``dilation``).
"""

import numpy as np

cimport numpy as cnp
from libc.string cimport memcpy, memset
from scipy.linalg.cython_blas cimport dgemm

cnp.import_array()

BACKEND_NAME = "compiled"


cdef void _gemm_nn(int m, int n, int k, double* a, double* b, double beta,
                   double* c) noexcept nogil:
    # Row-major C[m,n] = A[m,k] @ B[k,n] + beta*C via column-major BLAS.
    cdef char nt = b'N'
    cdef double alpha = 1.0
    dgemm(&nt, &nt, &n, &m, &k, &alpha, b, &n, a, &k, &beta, c, &n)


cdef void _gemm_nt(int m, int n, int k, double* a, double* b, double beta,
                   double* c) noexcept nogil:
    # Row-major C[m,n] = A[m,k] @ B[n,k]^T + beta*C.
    cdef char nt = b'N', tt = b'T'
    cdef double alpha = 1.0
    dgemm(&tt, &nt, &n, &m, &k, &alpha, b, &k, a, &k, &beta, c, &n)


cdef void _gemm_tn(int m, int n, int k, double* a, double* b, double beta,
                   double* c) noexcept nogil:
    # Row-major C[m,n] = A[k,m]^T @ B[k,n] + beta*C.
    cdef char nt = b'N', tt = b'T'
    cdef double alpha = 1.0
    dgemm(&nt, &tt, &n, &m, &k, &alpha, b, &n, a, &m, &beta, c, &n)


cdef void _pad_image(const double* x, double* xp, int channels, int height,
                     int width, int d) noexcept nogil:
    # Interior copy only; caller keeps the border of xp zeroed.
    cdef int c, h
    cdef int hp = height + 2 * d, wp = width + 2 * d
    for c in range(channels):
        for h in range(height):
            memcpy(xp + (c * hp + h + d) * wp + d,
                   x + (c * height + h) * width,
                   width * sizeof(double))


cdef void _im2col(const double* xp, double* col, int channels, int height,
                  int width, int d) noexcept nogil:
    cdef int c, ky, kx, h, row
    cdef int hp = height + 2 * d, wp = width + 2 * d
    for c in range(channels):
        for ky in range(3):
            for kx in range(3):
                row = (c * 3 + ky) * 3 + kx
                for h in range(height):
                    memcpy(col + (row * height + h) * width,
                           xp + (c * hp + h + ky * d) * wp + kx * d,
                           width * sizeof(double))


cdef void _col2im_add(const double* col, double* xp, int channels, int height,
                      int width, int d) noexcept nogil:
    cdef int c, ky, kx, h, i, row
    cdef int hp = height + 2 * d, wp = width + 2 * d
    cdef const double* src
    cdef double* dst
    for c in range(channels):
        for ky in range(3):
            for kx in range(3):
                row = (c * 3 + ky) * 3 + kx
                for h in range(height):
                    src = col + (row * height + h) * width
                    dst = xp + (c * hp + h + ky * d) * wp + kx * d
                    for i in range(width):
                        dst[i] += src[i]


def conv2d_forward(double[:, :, :, ::1] x, double[:, :, :, ::1] w,
                   double[::1] bias, int dilation):
    cdef int batch = x.shape[0], channels = x.shape[1]
    cdef int height = x.shape[2], width = x.shape[3]
    cdef int out_ch = w.shape[0], d = dilation
    cdef int hw = height * width, ck = channels * 9
    cdef int b, o, i

    y_arr = np.empty((batch, out_ch, height, width))
    xp_arr = np.zeros((channels, height + 2 * d, width + 2 * d))
    col_arr = np.empty((ck, hw))
    cdef double[:, :, :, ::1] y = y_arr
    cdef double[:, :, ::1] xp = xp_arr
    cdef double[:, ::1] col = col_arr
    cdef double* yb
    cdef double bo

    with nogil:
        for b in range(batch):
            _pad_image(&x[b, 0, 0, 0], &xp[0, 0, 0], channels, height, width, d)
            _im2col(&xp[0, 0, 0], &col[0, 0], channels, height, width, d)
            yb = &y[b, 0, 0, 0]
            _gemm_nn(out_ch, hw, ck, &w[0, 0, 0, 0], &col[0, 0], 0.0, yb)
            for o in range(out_ch):
                bo = bias[o]
                for i in range(hw):
                    yb[o * hw + i] += bo
    return y_arr


def conv2d_backward(double[:, :, :, ::1] x, double[:, :, :, ::1] w,
                    double[:, :, :, ::1] dy, int dilation, bint need_dx=True):
    cdef int batch = x.shape[0], channels = x.shape[1]
    cdef int height = x.shape[2], width = x.shape[3]
    cdef int out_ch = w.shape[0], d = dilation
    cdef int hw = height * width, ck = channels * 9
    cdef int hp = height + 2 * d, wp = width + 2 * d
    cdef int b, c, o, h, i

    dw_arr = np.zeros((out_ch, channels, 3, 3))
    db_arr = np.zeros(out_ch)
    dx_arr = np.empty((batch, channels, height, width)) if need_dx else None
    xp_arr = np.zeros((channels, hp, wp))
    col_arr = np.empty((ck, hw))
    dcol_arr = np.empty((ck, hw))
    dxp_arr = np.empty((channels, hp, wp))

    cdef double[:, :, :, ::1] dw = dw_arr
    cdef double[::1] db = db_arr
    cdef double[:, :, :, ::1] dx = None
    if need_dx:
        dx = dx_arr
    cdef double[:, :, ::1] xp = xp_arr
    cdef double[:, ::1] col = col_arr
    cdef double[:, ::1] dcol = dcol_arr
    cdef double[:, :, ::1] dxp = dxp_arr
    cdef double* dyb
    cdef double acc

    with nogil:
        for b in range(batch):
            dyb = &dy[b, 0, 0, 0]
            _pad_image(&x[b, 0, 0, 0], &xp[0, 0, 0], channels, height, width, d)
            _im2col(&xp[0, 0, 0], &col[0, 0], channels, height, width, d)
            # dW[o, ck] += dy_b[o, hw] @ col[ck, hw]^T
            _gemm_nt(out_ch, ck, hw, dyb, &col[0, 0], 1.0, &dw[0, 0, 0, 0])
            for o in range(out_ch):
                acc = 0.0
                for i in range(hw):
                    acc += dyb[o * hw + i]
                db[o] += acc
            if need_dx:
                # dcol[ck, hw] = W[o, ck]^T @ dy_b[o, hw]
                _gemm_tn(ck, hw, out_ch, &w[0, 0, 0, 0], dyb, 0.0, &dcol[0, 0])
                memset(&dxp[0, 0, 0], 0, channels * hp * wp * sizeof(double))
                _col2im_add(&dcol[0, 0], &dxp[0, 0, 0], channels, height,
                            width, d)
                for c in range(channels):
                    for h in range(height):
                        memcpy(&dx[b, c, h, 0],
                               &dxp[c, h + d, d],
                               width * sizeof(double))
    return dx_arr, dw_arr, db_arr
