from __future__ import annotations

import math

import numpy as np
import pytest

from miattn.errors import ShapeMismatch
from miattn.nn.gradcheck import bce_objective, grad_check, relative_error
from miattn.nn.layers import (
    Attention,
    BatchNorm,
    Conv2d,
    Dropout,
    Flatten,
    LabelOutOfDomain,
    KernelLargerThanInput,
    Linear,
    MaxPool2d,
    NoForwardRecorded,
    Parameter,
    ReLU,
    Sequential,
    Sigmoid,
    attention_forward,
    batchnorm_forward,
    bce_grad,
    bce_loss,
    dropout_forward,
    maxpool2d_forward,
    relu,
    sigmoid,
)


def _linear(weight, bias=None):
    layer = Linear(len(weight[0]), len(weight), bias=bias is not None)
    layer.params["weight"].data[...] = weight
    if bias is not None:
        layer.params["bias"].data[...] = bias
    return layer


def test_linear_examples():
    assert np.allclose(_linear([[1, 0], [0, 1]], [0, 0]).forward(np.array([3.0, 4.0])), [3, 4])
    assert np.allclose(_linear([[1, 2]], [1]).forward(np.array([1.0, 1.0])), [4])
    with pytest.raises(ShapeMismatch):
        _linear([[1, 0], [0, 1]]).forward(np.ones(3))


def _conv(kernel):
    k = np.asarray(kernel, dtype=np.float64)
    layer = Conv2d(1, 1, k.shape[0], bias=False)
    layer.params["weight"].data[...] = k[None, None]
    return layer


def test_conv_examples(backend):
    assert _conv(np.ones((3, 3))).forward(np.ones((1, 1, 3, 3)))[0, 0, 0, 0] == 9
    out = _conv([[1, 0], [0, 1]]).forward(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
    assert out.shape == (1, 1, 1, 1) and out[0, 0, 0, 0] == 5
    with pytest.raises(KernelLargerThanInput):
        _conv(np.ones((3, 3))).forward(np.ones((1, 1, 2, 2)))
    with pytest.raises(ShapeMismatch):
        Conv2d(2, 1).forward(np.ones((1, 1, 5, 5)))


def test_conv_matches_direct_loop(backend):
    rng = np.random.default_rng(0)
    x = rng.standard_normal((2, 3, 7, 6))
    layer = Conv2d(3, 4, 3, bias=True, rng=rng)
    w, b = layer.params["weight"].data, layer.params["bias"].data
    ref = np.zeros((2, 4, 5, 4))
    for n in range(2):
        for o in range(4):
            for i in range(5):
                for j in range(4):
                    ref[n, o, i, j] = np.sum(x[n, :, i:i + 3, j:j + 3] * w[o]) + b[o]
    assert np.allclose(layer.forward(x), ref, atol=1e-12)


def test_maxpool_examples(backend):
    assert maxpool2d_forward(np.array([[1.0, 2.0], [3.0, 4.0]])).tolist() == [[4.0]]
    iota = np.arange(1, 17, dtype=np.float64).reshape(4, 4)
    assert maxpool2d_forward(iota).tolist() == [[6, 8], [14, 16]]
    assert maxpool2d_forward(np.ones((3, 3))).shape == (1, 1)


def test_maxpool_backward_routes_to_argmax(backend):
    x = np.array([[[[1.0, 5.0, 0.0], [2.0, 3.0, 0.0], [9.0, 9.0, 9.0]]]])
    pool = MaxPool2d()
    pool.forward(x, train=True)
    gx = pool.backward(np.array([[[[7.0]]]]))
    assert gx.tolist() == [[[[0, 7, 0], [0, 0, 0], [0, 0, 0]]]]


def test_batchnorm_examples():
    bn = BatchNorm(1)
    out = bn.forward(np.array([[1.0], [3.0]]), train=True)
    assert np.allclose(out[:, 0], [-1, 1], atol=1e-5)
    bn.params["gamma"].data[:] = 2
    bn.params["beta"].data[:] = 1
    assert np.allclose(bn.forward(np.array([[1.0], [3.0]]), train=True)[:, 0], [-1, 3], atol=1e-4)
    single = BatchNorm(1).forward(np.array([[7.0]]), train=True)
    assert single[0, 0] == 0


def test_batchnorm_running_stats_and_eval():
    bn = BatchNorm(2, momentum=0.5)
    x = np.array([[1.0, 10.0], [3.0, 20.0], [5.0, 30.0]])
    bn.forward(x, train=True)
    assert np.allclose(bn.buffers["running_mean"], 0.5 * x.mean(axis=0))
    assert np.allclose(bn.buffers["running_var"], 0.5 + 0.5 * x.var(axis=0, ddof=1))
    before = {k: v.copy() for k, v in bn.buffers.items()}
    y = batchnorm_forward(x, bn, "eval")
    expect = (x - before["running_mean"]) / np.sqrt(before["running_var"] + bn.eps)
    assert np.allclose(y, expect)
    assert all(np.array_equal(before[k], bn.buffers[k]) for k in before)
    with pytest.raises(ValueError):
        batchnorm_forward(x, bn, "test")


def test_batchnorm_conv_layout():
    rng = np.random.default_rng(1)
    x = rng.standard_normal((4, 3, 5, 6)) * 3 + 2
    y = BatchNorm(3).forward(x, train=True)
    assert np.allclose(y.mean(axis=(0, 2, 3)), 0, atol=1e-10)
    assert np.allclose(y.var(axis=(0, 2, 3)), 1, atol=1e-3)


def test_dropout():
    x = np.ones(10)
    assert dropout_forward(x, 0.0, "train", np.random.default_rng(0)) is x
    assert dropout_forward(x, 0.9, "eval", np.random.default_rng(0)) is x
    y = dropout_forward(np.ones(10**6), 0.5, "train", np.random.default_rng(0))
    survivors = np.count_nonzero(y) / y.size
    assert abs(survivors - 0.5) < 0.01
    assert set(np.unique(y)) <= {0.0, 2.0}
    with pytest.raises(ValueError):
        Dropout(1.0)


def test_dropout_backward_uses_same_mask():
    d = Dropout(0.3, np.random.default_rng(4))
    y = d.forward(np.ones(50), train=True)
    assert np.array_equal(d.backward(np.ones(50)), y)


def test_activations():
    assert sigmoid(0.0) == 0.5
    assert relu(-2.0) == 0
    assert sigmoid(math.log(3)) == pytest.approx(0.75, abs=1e-15)
    big = sigmoid(np.array([-1000.0, 1000.0]))
    assert np.all(np.isfinite(big)) and big[0] == 0 and big[1] == 1


def test_bce_values():
    assert bce_loss([0.5], [1]) == pytest.approx(math.log(2))
    assert bce_loss([1.0], [1]) == pytest.approx(0, abs=1e-6)
    assert bce_loss([0.9], [0]) == pytest.approx(-math.log(0.1))
    assert np.isfinite(bce_loss([0.0], [1]))
    with pytest.raises(LabelOutOfDomain):
        bce_loss([0.5], [2])
    assert bce_grad([0.0], [1])[0] == 0  # clamp active


def test_sigmoid_head_gradient():
    # loss = BCE(sigmoid(w x)), w=0, x=1, y=1 -> dL/dw = (p - y) x = -0.5
    head = Sequential(_linear([[0.0]]), Sigmoid())
    p = head.forward(np.array([[1.0]]), train=True)
    head.backward(bce_grad(p, np.array([[1.0]])))
    assert head.layers[0].params["weight"].grad[0, 0] == pytest.approx(-0.5)


def test_frozen_parameter_gets_no_gradient():
    layer = _linear([[1.0, 2.0]], [0.0])
    layer.params["weight"].trainable = False
    layer.forward(np.ones((3, 2)), train=True)
    layer.backward(np.ones((3, 1)))
    assert layer.params["weight"].grad is None
    assert layer.params["bias"].grad is not None


def test_backward_without_forward():
    with pytest.raises(NoForwardRecorded):
        Linear(2, 1).backward(np.ones((1, 1)))
    layer = ReLU()
    layer.forward(np.ones(3), train=False)
    with pytest.raises(NoForwardRecorded):
        layer.backward(np.ones(3))


def test_gradients_accumulate():
    p = Parameter(np.zeros(2))
    p.accumulate(np.ones(2))
    p.accumulate(np.ones(2))
    assert p.grad.tolist() == [2, 2]


def test_attention_examples():
    a, f = attention_forward(np.array([[0.0, 0.0], [1.0, 0.0]]), np.array([0.0, 1.0]))
    assert a.tolist() == [0.5, 0.5]
    assert f.tolist() == [0.5, 0.0]
    a, f = attention_forward(np.array([[1.0, 0.0]]), np.array([math.log(3), 5.0]))
    assert a[0] == pytest.approx(0.25) and f.tolist() == pytest.approx([0.25, 0.0])
    with pytest.raises(ShapeMismatch):
        attention_forward(np.ones((3, 2)), np.ones(3))


def test_attention_rows_are_independent_gates():
    rng = np.random.default_rng(0)
    R, m = rng.standard_normal((1, 5, 4)), rng.standard_normal((1, 4))
    a, _ = Attention().forward(R, m)
    assert np.all((a > 0) & (a < 1))
    assert not np.isclose(a.sum(), 1.0)


def test_flatten_round_trip():
    fl = Flatten()
    x = np.arange(24.0).reshape(2, 3, 4)
    y = fl.forward(x, train=True)
    assert y.shape == (2, 12) and np.array_equal(fl.backward(y), x)


# --------------------------------------------------------------------------
# finite differences (the full multi-seed sweep lives in the acceptance suite)


def test_gradcheck_linear():
    rng = np.random.default_rng(0)
    rep = grad_check(Linear(4, 3, rng=rng), rng.standard_normal((5, 4)), seed=0)
    assert rep.passed, rep.errors


def test_gradcheck_conv_1_to_2_channels(backend):
    rng = np.random.default_rng(0)
    rep = grad_check(Conv2d(1, 2, 3, rng=rng), rng.standard_normal((2, 1, 6, 6)), seed=0)
    assert rep.passed, rep.errors


def test_gradcheck_relu_skips_kink():
    x = np.array([[-1.0, 0.0, 2.0, 0.5]])
    rep = grad_check(ReLU(), x, skip_kinks=True)
    assert rep.n_skipped_kinks == 1 and rep.passed


def test_gradcheck_maxpool(backend):
    rng = np.random.default_rng(2)
    rep = grad_check(MaxPool2d(), rng.standard_normal((2, 2, 5, 4)), skip_kinks=True)
    assert rep.passed, rep.errors


def test_gradcheck_detects_wrong_gradient():
    class Broken(Linear):
        def backward(self, grad):
            return 2 * super().backward(grad)

    rng = np.random.default_rng(0)
    rep = grad_check(Broken(3, 2, rng=rng), rng.standard_normal((4, 3)))
    assert not rep.passed


def test_relative_error_floor():
    assert relative_error(np.array(0.0), np.array(1e-9))[()] < 1e-2


def test_bce_objective_gradcheck():
    rng = np.random.default_rng(5)
    y = (rng.random((6, 1)) < 0.5).astype(float)
    head = Sequential(Linear(4, 1, rng=rng), Sigmoid())
    rep = grad_check(head, rng.standard_normal((6, 4)), loss=bce_objective(y))
    assert rep.passed, rep.errors
