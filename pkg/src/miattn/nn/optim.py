"""Plain SGD and bias-corrected Adam over named parameters."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from miattn.errors import MiattnError
from miattn.nn.layers import Parameter


class MissingGradient(MiattnError, RuntimeError):
    pass


def sgd_update(theta: np.ndarray, grad: np.ndarray, lr: float) -> np.ndarray:
    return theta - lr * grad


def adam_update(theta, grad, m, v, t, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam step at (1-based) step ``t``; returns ``(theta, m, v)``."""
    m = beta1 * m + (1.0 - beta1) * grad
    v = beta2 * v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1 ** t)
    v_hat = v / (1.0 - beta2 ** t)
    return theta - lr * m_hat / (np.sqrt(v_hat) + eps), m, v


@dataclass
class OptimizerState:
    kind: str
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


class Optimizer:
    def __init__(self, params: Mapping[str, Parameter], state: OptimizerState):
        self.params = dict(params)
        self.state = state

    def _trainable(self):
        for name, p in self.params.items():
            if not p.trainable:
                continue
            if p.grad is None:
                raise MissingGradient(f"parameter {name!r} has no gradient; run backward first")
            yield name, p

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def step(self) -> None:
        raise NotImplementedError


class SGD(Optimizer):
    def __init__(self, params: Mapping[str, Parameter], lr: float):
        super().__init__(params, OptimizerState("sgd", lr))

    def step(self) -> None:
        items = list(self._trainable())
        self.state.t += 1
        for _, p in items:
            p.data -= self.state.lr * p.grad


class Adam(Optimizer):
    def __init__(self, params: Mapping[str, Parameter], lr: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        super().__init__(params, OptimizerState("adam", lr, beta1, beta2, eps))

    def step(self) -> None:
        st = self.state
        items = list(self._trainable())
        st.t += 1
        for name, p in items:
            if name not in st.m:
                st.m[name] = np.zeros_like(p.data)
                st.v[name] = np.zeros_like(p.data)
            p.data[...], st.m[name], st.v[name] = adam_update(
                p.data, p.grad, st.m[name], st.v[name], st.t, st.lr, st.beta1, st.beta2, st.eps
            )


def make_optimizer(kind: str, params: Mapping[str, Parameter], lr: float) -> Optimizer:
    kind = kind.lower()
    if kind == "sgd":
        return SGD(params, lr)
    if kind == "adam":
        return Adam(params, lr)
    raise ValueError(f"unknown optimizer {kind!r}; expected 'sgd' or 'adam'")
