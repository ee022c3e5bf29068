"""Layers with explicit forward/backward passes.

Every layer caches what its backward pass needs during a *training* forward
call only; eval-mode forward leaves the layer untouched so frozen models can
be shared. Parameter gradients accumulate until :meth:`Layer.zero_grad`.
"""

from __future__ import annotations

import math

import numpy as np

from miattn.errors import DataError, MiattnError, ShapeMismatch
from miattn.nn import kernels

BCE_EPS = 1e-7


class NoForwardRecorded(MiattnError, RuntimeError):
    pass


class KernelLargerThanInput(ShapeMismatch):
    pass


class LabelOutOfDomain(DataError):
    pass


class Parameter:
    __slots__ = ("data", "grad", "trainable")

    def __init__(self, data: np.ndarray, trainable: bool = True):
        self.data = np.ascontiguousarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.trainable = trainable

    def accumulate(self, g: np.ndarray) -> None:
        if not self.trainable:
            return
        if self.grad is None:
            self.grad = np.array(g, dtype=np.float64, copy=True)
        else:
            self.grad += g

    def __repr__(self) -> str:
        return f"Parameter(shape={self.data.shape}, trainable={self.trainable})"


def init_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> np.ndarray:
    bound = math.sqrt(1.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


class Layer:
    def __init__(self):
        self.params: dict[str, Parameter] = {}
        self.buffers: dict[str, np.ndarray] = {}
        self._cache = None

    def forward(self, x, train: bool = False):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def _recorded(self):
        if self._cache is None:
            raise NoForwardRecorded(f"{type(self).__name__}.backward called without a training forward pass")
        return self._cache

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def clear(self) -> None:
        self._cache = None


# --------------------------------------------------------------------------
# Elementwise activations


def sigmoid(x):
    x = np.asarray(x, dtype=np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out if out.ndim else float(out)


def relu(x):
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


class ReLU(Layer):
    def forward(self, x, train=False):
        if train:
            self._cache = x > 0
        return np.maximum(x, 0.0)

    def backward(self, grad):
        return grad * self._recorded()


class Sigmoid(Layer):
    def forward(self, x, train=False):
        y = sigmoid(x)
        if train:
            self._cache = y
        return y

    def backward(self, grad):
        y = self._recorded()
        return grad * y * (1.0 - y)


# --------------------------------------------------------------------------
# Linear, convolution, pooling


class Linear(Layer):
    """``out = x @ W.T + b`` on ``(N, in)`` or ``(in,)`` inputs."""

    def __init__(self, n_in: int, n_out: int, bias: bool = True, rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.n_in, self.n_out = n_in, n_out
        self.params["weight"] = Parameter(init_uniform(rng, (n_out, n_in), n_in))
        if bias:
            self.params["bias"] = Parameter(init_uniform(rng, (n_out,), n_in))

    def forward(self, x, train=False):
        x = np.asarray(x, dtype=np.float64)
        if x.shape[-1] != self.n_in:
            raise ShapeMismatch(f"Linear expects {self.n_in} inputs, got {x.shape[-1]}")
        out = x @ self.params["weight"].data.T
        if "bias" in self.params:
            out = out + self.params["bias"].data
        if train:
            self._cache = x
        return out

    def backward(self, grad):
        x = self._recorded()
        x2 = x.reshape(-1, self.n_in)
        g2 = grad.reshape(-1, self.n_out)
        self.params["weight"].accumulate(g2.T @ x2)
        if "bias" in self.params:
            self.params["bias"].accumulate(g2.sum(axis=0))
        return (g2 @ self.params["weight"].data).reshape(x.shape)


class Conv2d(Layer):
    """Valid (unpadded) stride-1 convolution on ``(N, C, H, W)`` input.

    Set ``input_grad = False`` on a first layer to skip the input gradient;
    ``backward`` then returns None.
    """

    def __init__(self, c_in: int, c_out: int, kernel: int = 3, bias: bool = True,
                 rng: np.random.Generator | None = None):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.c_in, self.c_out, self.kernel = c_in, c_out, kernel
        self.input_grad = True
        fan_in = c_in * kernel * kernel
        self.params["weight"] = Parameter(init_uniform(rng, (c_out, c_in, kernel, kernel), fan_in))
        if bias:
            self.params["bias"] = Parameter(init_uniform(rng, (c_out,), fan_in))

    def output_shape(self, h: int, w: int, stride: int = 1) -> tuple[int, int]:
        return (h - self.kernel) // stride + 1, (w - self.kernel) // stride + 1

    def forward(self, x, train=False):
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 3
        if single:
            x = x[None]
        if x.ndim != 4 or x.shape[1] != self.c_in:
            raise ShapeMismatch(f"Conv2d expects (N, {self.c_in}, H, W), got {x.shape}")
        if x.shape[2] < self.kernel or x.shape[3] < self.kernel:
            raise KernelLargerThanInput(f"{self.kernel}x{self.kernel} kernel on {x.shape[2]}x{x.shape[3]} input")
        x = np.ascontiguousarray(x)
        out = kernels.conv2d_forward(x, self.params["weight"].data)
        if "bias" in self.params:
            out += self.params["bias"].data[None, :, None, None]
        if train:
            self._cache = (x, single)
        return out[0] if single else out

    def backward(self, grad):
        x, single = self._recorded()
        if single:
            grad = grad[None]
        gx, gw = kernels.conv2d_backward(x, self.params["weight"].data, np.ascontiguousarray(grad),
                                         self.input_grad)
        self.params["weight"].accumulate(gw)
        if "bias" in self.params:
            self.params["bias"].accumulate(grad.sum(axis=(0, 2, 3)))
        if gx is None:
            return None
        return gx[0] if single else gx


class MaxPool2d(Layer):
    """Non-overlapping 2x2 max pooling; odd trailing rows/columns are dropped."""

    def forward(self, x, train=False):
        x = np.ascontiguousarray(x, dtype=np.float64)
        single = x.ndim == 2
        if single:
            x = x[None, None]
        if x.shape[-2] < 2 or x.shape[-1] < 2:
            raise ShapeMismatch(f"max pooling needs at least 2x2 input, got {x.shape[-2:]}")
        y, idx = kernels.maxpool2d_forward(x)
        if train:
            self._cache = (idx, x.shape, single)
        return y[0, 0] if single else y

    def backward(self, grad):
        idx, shape, single = self._recorded()
        if single:
            grad = grad[None, None]
        gx = kernels.maxpool2d_backward(np.ascontiguousarray(grad, dtype=np.float64), idx, shape)
        return gx[0, 0] if single else gx


def maxpool2d_forward(x: np.ndarray) -> np.ndarray:
    return MaxPool2d().forward(x)


class Flatten(Layer):
    def forward(self, x, train=False):
        if train:
            self._cache = x.shape
        return x.reshape(x.shape[0], -1)

    def backward(self, grad):
        return grad.reshape(self._recorded())


# --------------------------------------------------------------------------
# Regularizers


class BatchNorm(Layer):
    """Batch normalization over ``(N, F)`` or per channel over ``(N, C, H, W)``.

    Running statistics are updated with ``momentum`` in training mode and used
    in eval mode. The running variance tracks the unbiased batch variance.
    """

    def __init__(self, n_features: int, eps: float = 1e-5, momentum: float = 0.1):
        super().__init__()
        if eps <= 0:
            raise ValueError("eps must be positive")
        self.n_features = n_features
        self.eps = eps
        self.momentum = momentum
        self.params["gamma"] = Parameter(np.ones(n_features))
        self.params["beta"] = Parameter(np.zeros(n_features))
        self.buffers["running_mean"] = np.zeros(n_features)
        self.buffers["running_var"] = np.ones(n_features)

    def forward(self, x, train=False):
        x = np.asarray(x, dtype=np.float64)
        if x.ndim not in (2, 4):
            raise ShapeMismatch(f"BatchNorm expects 2-D or 4-D input, got {x.ndim}-D")
        if x.shape[1] != self.n_features:
            raise ShapeMismatch(f"BatchNorm expects {self.n_features} features, got {x.shape[1]}")
        gamma = self.params["gamma"].data
        beta = self.params["beta"].data
        if not train:
            bshape = (1, -1) if x.ndim == 2 else (1, -1, 1, 1)
            inv_std = 1.0 / np.sqrt(self.buffers["running_var"] + self.eps)
            xhat = (x - self.buffers["running_mean"].reshape(bshape)) * inv_std.reshape(bshape)
            return xhat * gamma.reshape(bshape) + beta.reshape(bshape)
        shape = x.shape
        x4 = x.reshape(shape[0], shape[1], -1, 1)
        out, xhat, mu, var, inv_std = kernels.batchnorm_train_forward(x4, gamma, beta, self.eps)
        m = x.size // self.n_features
        unbiased = var * m / (m - 1) if m > 1 else var
        self.buffers["running_mean"] = (1 - self.momentum) * self.buffers["running_mean"] + self.momentum * mu
        self.buffers["running_var"] = (1 - self.momentum) * self.buffers["running_var"] + self.momentum * unbiased
        self._cache = (xhat, inv_std)
        return out.reshape(shape)

    def backward(self, grad):
        xhat, inv_std = self._recorded()
        shape = np.shape(grad)
        gx, g_sum, g_dot = kernels.batchnorm_backward(np.reshape(grad, xhat.shape), xhat,
                                                      self.params["gamma"].data, inv_std)
        self.params["gamma"].accumulate(g_dot)
        self.params["beta"].accumulate(g_sum)
        return gx.reshape(shape)


def batchnorm_forward(x, layer: BatchNorm, mode: str = "train"):
    if mode not in ("train", "eval"):
        raise ValueError(f"mode must be 'train' or 'eval', not {mode!r}")
    return layer.forward(x, train=mode == "train")


class Dropout(Layer):
    """Inverted dropout: survivors are scaled by ``1/(1-p)`` while training."""

    def __init__(self, p: float, rng: np.random.Generator | None = None):
        super().__init__()
        if not 0.0 <= p < 1.0:
            raise ValueError(f"dropout rate must lie in [0, 1), got {p}")
        self.p = p
        self.rng = rng if rng is not None else np.random.default_rng(0)

    def forward(self, x, train=False):
        if not train:
            return x
        if self.p == 0.0:
            self._cache = True
            return x
        keep = self.rng.random(np.shape(x), dtype=np.float32) >= self.p
        self._cache = keep
        out = np.multiply(x, keep, dtype=np.float64)
        out *= 1.0 / (1.0 - self.p)
        return out

    def backward(self, grad):
        keep = self._recorded()
        if keep is True:
            return grad
        out = np.multiply(grad, keep, dtype=np.float64)
        out *= 1.0 / (1.0 - self.p)
        return out


def dropout_forward(x, p: float, mode: str, rng: np.random.Generator):
    return Dropout(p, rng).forward(x, train=mode == "train")


# --------------------------------------------------------------------------
# Attention


class Attention(Layer):
    """Row gating of a feature matrix by a learned query vector.

    ``a_i = 1 / (1 + exp(R_i . m))`` and ``f = sum_i a_i R_i``. The gate is
    the logistic of the *negated* row/query dot product and is not
    normalized across rows. Takes ``R`` of shape ``(N, L, F)`` and ``m`` of
    shape ``(N, F)``; returns ``(a, f)``.
    """

    def forward(self, R, m, train=False):
        R = np.asarray(R, dtype=np.float64)
        m = np.asarray(m, dtype=np.float64)
        if R.shape[-1] != m.shape[-1] or R.shape[0] != m.shape[0]:
            raise ShapeMismatch(f"attention query {m.shape} does not match feature rows {R.shape}")
        s = np.einsum("nlf,nf->nl", R, m)
        a = sigmoid(-s)
        f = np.einsum("nl,nlf->nf", a, R)
        if train:
            self._cache = (R, m, a)
        return a, f

    def backward(self, grad_a, grad_f):
        R, m, a = self._recorded()
        g_gate = np.einsum("nf,nlf->nl", grad_f, R)
        if grad_a is not None:
            g_gate = g_gate + grad_a
        g_score = -g_gate * a * (1.0 - a)
        grad_m = np.einsum("nl,nlf->nf", g_score, R)
        grad_R = a[..., None] * grad_f[:, None, :] + g_score[..., None] * m[:, None, :]
        return grad_R, grad_m


def attention_forward(R, m):
    """Unbatched convenience form: ``R`` is ``(L, F)``, ``m`` is ``(F,)``."""
    R = np.asarray(R, dtype=np.float64)
    m = np.asarray(m, dtype=np.float64)
    if R.ndim != 2 or m.ndim != 1 or R.shape[1] != m.shape[0]:
        raise ShapeMismatch(f"attention query {m.shape} does not match feature rows {R.shape}")
    a, f = Attention().forward(R[None], m[None])
    return a[0], f[0]


# --------------------------------------------------------------------------
# Loss


def _check_labels(y):
    y = np.asarray(y, dtype=np.float64)
    if not np.all((y == 0) | (y == 1)):
        raise LabelOutOfDomain("labels must be 0 or 1")
    return y


def bce_loss(p, y) -> float:
    """Mean binary cross-entropy with probabilities clamped to ``[1e-7, 1-1e-7]``."""
    y = _check_labels(y)
    pc = np.clip(np.asarray(p, dtype=np.float64), BCE_EPS, 1.0 - BCE_EPS)
    return float(np.mean(-(y * np.log(pc) + (1.0 - y) * np.log(1.0 - pc))))


def bce_grad(p, y) -> np.ndarray:
    """Gradient of :func:`bce_loss` w.r.t. ``p``; zero where the clamp is active."""
    y = _check_labels(y)
    p = np.asarray(p, dtype=np.float64)
    pc = np.clip(p, BCE_EPS, 1.0 - BCE_EPS)
    g = (-(y / pc) + (1.0 - y) / (1.0 - pc)) / p.size
    return np.where(pc == p, g, 0.0)


class Sequential(Layer):
    def __init__(self, *layers: Layer):
        super().__init__()
        self.layers = list(layers)
        for i, layer in enumerate(self.layers):
            for name, p in layer.params.items():
                self.params[f"{i}.{name}"] = p

    def forward(self, x, train=False):
        for layer in self.layers:
            x = layer.forward(x, train=train)
        return x

    def backward(self, grad):
        for layer in reversed(self.layers):
            grad = layer.backward(grad)
        return grad

    def clear(self) -> None:
        for layer in self.layers:
            layer.clear()
