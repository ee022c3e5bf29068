"""Central finite-difference verification of layer gradients."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from miattn.nn.layers import Layer, bce_grad, bce_loss


@dataclass
class GradCheckReport:
    max_rel_error: float
    errors: dict[str, float] = field(default_factory=dict)
    n_checked: int = 0
    n_skipped_kinks: int = 0
    tolerance: float = 1e-4

    @property
    def passed(self) -> bool:
        return self.max_rel_error < self.tolerance


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float = 1e-6) -> np.ndarray:
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denom


def bce_objective(y: np.ndarray) -> Callable[[np.ndarray], tuple[float, np.ndarray]]:
    """Loss callback for :func:`grad_check` wiring probabilities into mean BCE."""
    y = np.asarray(y, dtype=np.float64)

    def objective(p):
        flat = p.reshape(y.shape)
        return bce_loss(flat, y), bce_grad(flat, y).reshape(p.shape)

    return objective


def grad_check(
    layer: Layer,
    inputs,
    tolerance: float = 1e-4,
    h: float = 1e-5,
    seed: int = 0,
    loss: Callable | None = None,
    check_inputs: bool = True,
    floor: float = 1e-6,
    skip_kinks: bool = False,
) -> GradCheckReport:
    """Compare ``layer.backward`` with central differences on a scalar loss.

    The loss defaults to a fixed random projection of the layer output(s).
    With ``skip_kinks``, coordinates whose left and right one-sided slopes
    disagree sharply sit on a kink (ReLU at 0, pooling ties) and are excluded.
    """
    inputs = tuple(np.array(x, dtype=np.float64) for x in (inputs if isinstance(inputs, tuple) else (inputs,)))
    rng = np.random.default_rng(seed)

    first = layer.forward(*inputs, train=True)
    outs = first if isinstance(first, tuple) else (first,)
    weights = [rng.standard_normal(np.shape(o)) for o in outs]

    def scalar(*xs) -> float:
        out = layer.forward(*xs, train=True)
        out = out if isinstance(out, tuple) else (out,)
        if loss is not None:
            return float(loss(out[0])[0])
        return float(sum(np.sum(w * o) for w, o in zip(weights, out)))

    # analytic
    layer.zero_grad()
    out = layer.forward(*inputs, train=True)
    out = out if isinstance(out, tuple) else (out,)
    if loss is not None:
        upstream = (loss(out[0])[1],)
    else:
        upstream = tuple(weights)
    grads_in = layer.backward(*upstream)
    grads_in = grads_in if isinstance(grads_in, tuple) else (grads_in,)
    analytic: dict[str, np.ndarray] = {}
    if check_inputs:
        for i, g in enumerate(grads_in):
            analytic[f"input{i}"] = np.array(g)
    for name, p in layer.params.items():
        if p.trainable:
            analytic[name] = np.zeros_like(p.data) if p.grad is None else p.grad.copy()

    targets: dict[str, np.ndarray] = {f"input{i}": x for i, x in enumerate(inputs)} if check_inputs else {}
    targets.update({name: p.data for name, p in layer.params.items() if p.trainable})

    report = GradCheckReport(0.0, tolerance=tolerance)
    for name, arr in targets.items():
        worst = 0.0
        flat = arr.reshape(-1)
        a_flat = analytic[name].reshape(-1)
        for k in range(flat.size):
            orig = flat[k]
            flat[k] = orig + h
            f_plus = scalar(*inputs)
            flat[k] = orig - h
            f_minus = scalar(*inputs)
            flat[k] = orig
            if skip_kinks:
                f0 = scalar(*inputs)
                right = (f_plus - f0) / h
                left = (f0 - f_minus) / h
                if abs(right - left) > 1e-3 * max(abs(right), abs(left), 1.0):
                    report.n_skipped_kinks += 1
                    continue
            numeric = (f_plus - f_minus) / (2 * h)
            err = float(relative_error(np.array(a_flat[k]), np.array(numeric), floor))
            worst = max(worst, err)
            report.n_checked += 1
        report.errors[name] = worst
        report.max_rel_error = max(report.max_rel_error, worst)
    layer.zero_grad()
    layer.clear()
    return report
