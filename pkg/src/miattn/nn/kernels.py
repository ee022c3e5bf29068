"""Kernel dispatch: compiled ``_ckernels`` when importable, numpy otherwise.

Set ``MIATTN_PURE_PYTHON=1`` before import to force the numpy path, or call
:func:`use_backend` at runtime.
"""

from __future__ import annotations

import os
from contextlib import contextmanager
from types import ModuleType

from miattn.nn import _fallback

try:
    from miattn.nn import _ckernels
except ImportError:  # extension not built
    _ckernels = None

_BACKENDS: dict[str, ModuleType] = {"numpy": _fallback}
if _ckernels is not None:
    _BACKENDS["cython"] = _ckernels

_impl: ModuleType = _fallback
BACKEND = "numpy"


def available_backends() -> list[str]:
    return sorted(_BACKENDS)


def set_backend(name: str) -> None:
    global _impl, BACKEND
    if name not in _BACKENDS:
        raise ValueError(f"backend {name!r} unavailable; have {available_backends()}")
    _impl = _BACKENDS[name]
    BACKEND = name


@contextmanager
def use_backend(name: str):
    previous = BACKEND
    set_backend(name)
    try:
        yield
    finally:
        set_backend(previous)


if _ckernels is not None and os.environ.get("MIATTN_PURE_PYTHON", "") not in ("1", "true", "yes"):
    set_backend("cython")


def conv2d_forward(x, w):
    return _impl.conv2d_forward(x, w)


def conv2d_backward(x, w, gy, input_grad=True):
    """Returns ``(gx, gw)``; ``gx`` is None when ``input_grad`` is false."""
    return _impl.conv2d_backward(x, w, gy, input_grad)


def maxpool2d_forward(x):
    return _impl.maxpool2d_forward(x)


def maxpool2d_backward(gy, idx, in_shape):
    return _impl.maxpool2d_backward(gy, idx, in_shape)


def batchnorm_train_forward(x, gamma, beta, eps):
    """``(out, xhat, mean, biased_var, inv_std)`` for (N, C, H, W) input."""
    return _impl.batchnorm_train_forward(x, gamma, beta, eps)


def batchnorm_backward(grad, xhat, gamma, inv_std):
    """``(grad_input, grad_beta, grad_gamma)`` for (N, C, H, W) tensors."""
    return _impl.batchnorm_backward(grad, xhat, gamma, inv_std)
