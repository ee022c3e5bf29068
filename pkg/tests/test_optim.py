from __future__ import annotations

import numpy as np
import pytest

from miattn.nn.layers import Parameter
from miattn.nn.optim import SGD, Adam, MissingGradient, adam_update, make_optimizer, sgd_update


def test_sgd_examples():
    assert sgd_update(np.array(1.0), np.array(0.5), 0.1) == pytest.approx(0.95)
    assert sgd_update(np.array(1.0), np.array(0.0), 0.1) == 1.0


def test_adam_first_step():
    theta, m, v = adam_update(np.array(1.0), np.array(1.0), np.array(0.0), np.array(0.0), 1, 1e-3)
    assert theta == pytest.approx(0.999, abs=1e-9)
    assert m == pytest.approx(0.1) and v == pytest.approx(0.001)


def test_adam_matches_reference_recurrence():
    rng = np.random.default_rng(0)
    p = Parameter(rng.standard_normal(4))
    opt = Adam({"p": p}, lr=0.01)
    theta = p.data.copy()
    m = v = np.zeros(4)
    for t in range(1, 6):
        g = rng.standard_normal(4)
        p.grad = g.copy()
        opt.step()
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        theta = theta - 0.01 * (m / (1 - 0.9 ** t)) / (np.sqrt(v / (1 - 0.999 ** t)) + 1e-8)
        assert np.allclose(p.data, theta, atol=1e-14)
    assert opt.state.t == 5


def test_optimizer_skips_frozen_and_requires_grads():
    live, frozen = Parameter(np.ones(2)), Parameter(np.ones(2), trainable=False)
    opt = SGD({"live": live, "frozen": frozen}, lr=0.5)
    with pytest.raises(MissingGradient):
        opt.step()
    live.grad = np.ones(2)
    opt.step()
    assert live.data.tolist() == [0.5, 0.5] and frozen.data.tolist() == [1, 1]
    opt.zero_grad()
    assert live.grad is None


def test_make_optimizer():
    assert isinstance(make_optimizer("ADAM", {}, 1e-3), Adam)
    assert isinstance(make_optimizer("sgd", {}, 1e-3), SGD)
    with pytest.raises(ValueError):
        make_optimizer("rmsprop", {}, 1e-3)
