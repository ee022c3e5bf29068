"""Pure numpy versions of the compiled kernels in ``_ckernels``.

Same signatures and tie-breaking as the compiled module; results agree to
floating-point summation order.
"""

from __future__ import annotations

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view


def conv2d_forward(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    k = w.shape[2]
    patches = sliding_window_view(x, (k, k), axis=(2, 3))  # N, C, Ho, Wo, k, k
    y = np.tensordot(patches, w, axes=([1, 4, 5], [1, 2, 3]))  # N, Ho, Wo, O
    return np.ascontiguousarray(y.transpose(0, 3, 1, 2))


def conv2d_backward(x: np.ndarray, w: np.ndarray, gy: np.ndarray,
                    input_grad: bool = True) -> tuple[np.ndarray | None, np.ndarray]:
    k = w.shape[2]
    patches = sliding_window_view(x, (k, k), axis=(2, 3))
    gw = np.tensordot(gy, patches, axes=([0, 2, 3], [0, 2, 3]))  # O, C, k, k
    if not input_grad:
        return None, np.ascontiguousarray(gw)
    padded = np.pad(gy, ((0, 0), (0, 0), (k - 1, k - 1), (k - 1, k - 1)))
    gpatches = sliding_window_view(padded, (k, k), axis=(2, 3))  # N, O, H, W, k, k
    flipped = w[:, :, ::-1, ::-1]
    gx = np.tensordot(gpatches, flipped, axes=([1, 4, 5], [0, 2, 3]))  # N, H, W, C
    return np.ascontiguousarray(gx.transpose(0, 3, 1, 2)), np.ascontiguousarray(gw)


def _windows(x: np.ndarray) -> np.ndarray:
    n, c, h, w = x.shape
    ho, wo = h // 2, w // 2
    return (x[:, :, :2 * ho, :2 * wo]
            .reshape(n, c, ho, 2, wo, 2)
            .transpose(0, 1, 2, 4, 3, 5)
            .reshape(n, c, ho, wo, 4))


def maxpool2d_forward(x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    win = _windows(x)
    idx = win.argmax(axis=-1).astype(np.int32)
    y = np.take_along_axis(win, idx[..., None].astype(np.intp), axis=-1)[..., 0]
    return np.ascontiguousarray(y), idx


def maxpool2d_backward(gy: np.ndarray, idx: np.ndarray, in_shape: tuple[int, ...]) -> np.ndarray:
    n, c, h, w = in_shape
    ho, wo = gy.shape[2], gy.shape[3]
    g4 = np.zeros((n, c, ho, wo, 4), dtype=np.float64)
    np.put_along_axis(g4, idx[..., None].astype(np.intp), gy[..., None], axis=-1)
    gx = np.zeros(in_shape, dtype=np.float64)
    gx[:, :, :2 * ho, :2 * wo] = (g4.reshape(n, c, ho, wo, 2, 2)
                                  .transpose(0, 1, 2, 4, 3, 5)
                                  .reshape(n, c, 2 * ho, 2 * wo))
    return gx


def _channel_sum(a: np.ndarray) -> np.ndarray:
    return a.sum(axis=(0, 2, 3))


def _channel_dot(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    n, c = a.shape[:2]
    return np.einsum("ncs,ncs->c", a.reshape(n, c, -1), b.reshape(n, c, -1))


def batchnorm_train_forward(x: np.ndarray, gamma: np.ndarray, beta: np.ndarray, eps: float):
    m = x.size // x.shape[1]
    mean = _channel_sum(x) / m
    xhat = x - mean[None, :, None, None]
    var = _channel_dot(xhat, xhat) / m
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat *= inv_std[None, :, None, None]
    out = xhat * gamma[None, :, None, None]
    out += beta[None, :, None, None]
    return out, xhat, mean, var, inv_std


def batchnorm_backward(grad: np.ndarray, xhat: np.ndarray, gamma: np.ndarray, inv_std: np.ndarray):
    m = grad.size // grad.shape[1]
    g_sum = _channel_sum(grad)
    g_dot = _channel_dot(grad, xhat)
    out = xhat * (-g_dot)[None, :, None, None]
    out += m * grad
    out -= g_sum[None, :, None, None]
    out *= (gamma * inv_std / m)[None, :, None, None]
    return out, g_sum, g_dot
