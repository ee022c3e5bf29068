# cython: language_level=3, boundscheck=False, wraparound=False, initializedcheck=False
"""Compiled conv/pool kernels. Arrays must be C-contiguous float64 (int32 for pool indices)."""

import numpy as np

from libc.stdint cimport int32_t


cdef extern from "_kernels_impl.h" nogil:
    void mi_conv2d_fwd(const double *x, const double *w, double *y,
                       int N, int C, int H, int W, int O, int K)
    void mi_conv2d_bwd(const double *x, const double *w, const double *gy,
                       double *gx, double *gw, double *scratch,
                       int N, int C, int H, int W, int O, int K)
    void mi_maxpool2_fwd(const double *x, double *y, int32_t *idx, int NC, int H, int W)
    void mi_maxpool2_bwd(const double *gy, const int32_t *idx, double *gx, int NC, int H, int W)
    void mi_bn_fwd(const double *x, const double *gamma, const double *beta, double eps,
                   double *out, double *xhat, double *mean, double *var, double *inv_std,
                   int N, int C, int S)
    void mi_bn_bwd(const double *grad, const double *xhat, const double *gamma, const double *inv_std,
                   double *gx, double *g_sum, double *g_dot, int N, int C, int S)


def conv2d_forward(x, w):
    cdef const double[:, :, :, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef const double[:, :, :, ::1] wv = np.ascontiguousarray(w, dtype=np.float64)
    cdef int N = xv.shape[0], C = xv.shape[1], H = xv.shape[2], W = xv.shape[3]
    cdef int O = wv.shape[0], K = wv.shape[2]
    out = np.empty((N, O, H - K + 1, W - K + 1), dtype=np.float64)
    cdef double[:, :, :, ::1] yv = out
    if out.size:
        with nogil:
            mi_conv2d_fwd(&xv[0, 0, 0, 0], &wv[0, 0, 0, 0], &yv[0, 0, 0, 0], N, C, H, W, O, K)
    return out


def conv2d_backward(x, w, gy, input_grad=True):
    cdef const double[:, :, :, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef const double[:, :, :, ::1] wv = np.ascontiguousarray(w, dtype=np.float64)
    cdef const double[:, :, :, ::1] gv = np.ascontiguousarray(gy, dtype=np.float64)
    cdef int N = xv.shape[0], C = xv.shape[1], H = xv.shape[2], W = xv.shape[3]
    cdef int O = wv.shape[0], K = wv.shape[2]
    gx = np.zeros((N, C, H, W), dtype=np.float64) if input_grad else None
    gw = np.zeros((O, C, K, K), dtype=np.float64)
    scratch = np.empty(W + 2, dtype=np.float64)
    cdef double *gx_ptr = NULL
    cdef double[:, :, :, ::1] gxv
    cdef double[:, :, :, ::1] gwv = gw
    cdef double[::1] sv = scratch
    if input_grad and gx.size:
        gxv = gx
        gx_ptr = &gxv[0, 0, 0, 0]
    if gy.size:
        with nogil:
            mi_conv2d_bwd(&xv[0, 0, 0, 0], &wv[0, 0, 0, 0], &gv[0, 0, 0, 0],
                          gx_ptr, &gwv[0, 0, 0, 0], &sv[0], N, C, H, W, O, K)
    return gx, gw


def maxpool2d_forward(x):
    cdef const double[:, :, :, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef int N = xv.shape[0], C = xv.shape[1], H = xv.shape[2], W = xv.shape[3]
    out = np.empty((N, C, H // 2, W // 2), dtype=np.float64)
    idx = np.empty((N, C, H // 2, W // 2), dtype=np.int32)
    cdef double[:, :, :, ::1] yv = out
    cdef int32_t[:, :, :, ::1] iv = idx
    if out.size:
        with nogil:
            mi_maxpool2_fwd(&xv[0, 0, 0, 0], &yv[0, 0, 0, 0], &iv[0, 0, 0, 0], N * C, H, W)
    return out, idx


def maxpool2d_backward(gy, idx, in_shape):
    cdef const double[:, :, :, ::1] gv = np.ascontiguousarray(gy, dtype=np.float64)
    cdef const int32_t[:, :, :, ::1] iv = np.ascontiguousarray(idx, dtype=np.int32)
    cdef int N = in_shape[0], C = in_shape[1], H = in_shape[2], W = in_shape[3]
    gx = np.zeros((N, C, H, W), dtype=np.float64)
    cdef double[:, :, :, ::1] gxv = gx
    if gy.size:
        with nogil:
            mi_maxpool2_bwd(&gv[0, 0, 0, 0], &iv[0, 0, 0, 0], &gxv[0, 0, 0, 0], N * C, H, W)
    return gx


def batchnorm_train_forward(x, gamma, beta, double eps):
    """Returns ``(out, xhat, mean, var, inv_std)`` for (N, C, H, W) input."""
    cdef const double[:, :, :, ::1] xv = np.ascontiguousarray(x, dtype=np.float64)
    cdef const double[::1] gv = np.ascontiguousarray(gamma, dtype=np.float64)
    cdef const double[::1] bv = np.ascontiguousarray(beta, dtype=np.float64)
    cdef int N = xv.shape[0], C = xv.shape[1], S = xv.shape[2] * xv.shape[3]
    out = np.empty(np.shape(x), dtype=np.float64)
    xhat = np.empty(np.shape(x), dtype=np.float64)
    stats = np.zeros((3, C), dtype=np.float64)
    cdef double[:, :, :, ::1] ov = out
    cdef double[:, :, :, ::1] hv = xhat
    cdef double[:, ::1] sv = stats
    if out.size:
        with nogil:
            mi_bn_fwd(&xv[0, 0, 0, 0], &gv[0], &bv[0], eps, &ov[0, 0, 0, 0], &hv[0, 0, 0, 0],
                      &sv[0, 0], &sv[1, 0], &sv[2, 0], N, C, S)
    return out, xhat, stats[0], stats[1], stats[2]


def batchnorm_backward(grad, xhat, gamma, inv_std):
    """Returns ``(grad_input, grad_beta, grad_gamma)`` for (N, C, H, W) tensors."""
    cdef const double[:, :, :, ::1] gv = np.ascontiguousarray(grad, dtype=np.float64)
    cdef const double[:, :, :, ::1] hv = np.ascontiguousarray(xhat, dtype=np.float64)
    cdef const double[::1] gmv = np.ascontiguousarray(gamma, dtype=np.float64)
    cdef const double[::1] iv = np.ascontiguousarray(inv_std, dtype=np.float64)
    cdef int N = gv.shape[0], C = gv.shape[1], S = gv.shape[2] * gv.shape[3]
    gx = np.empty(np.shape(grad), dtype=np.float64)
    sums = np.zeros((2, C), dtype=np.float64)
    cdef double[:, :, :, ::1] ov = gx
    cdef double[:, ::1] sv = sums
    if gx.size:
        with nogil:
            mi_bn_bwd(&gv[0, 0, 0, 0], &hv[0, 0, 0, 0], &gmv[0], &iv[0], &ov[0, 0, 0, 0],
                      &sv[0, 0], &sv[1, 0], N, C, S)
    return gx, sums[0], sums[1]
