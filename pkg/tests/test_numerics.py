import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import conv2d_loop_reference
from eegtrm.errors import NumericalError, ValidationError
from eegtrm.numerics import (
    BatchNorm,
    Conv2d,
    Dense,
    Dropout,
    Flatten,
    MeanPoolTime,
    SafeLog,
    Sequential,
    Square,
    conv2d_backward,
    conv2d_forward,
    grad_check,
    precision_dtype,
    softmax_cross_entropy,
)


def numeric_grad(f, arr, step=1e-6):
    g = np.zeros_like(arr)
    flat, gflat = arr.reshape(-1), g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f()
        flat[i] = orig - step
        fm = f()
        flat[i] = orig
        gflat[i] = (fp - fm) / (2 * step)
    return g


# -- convolution --------------------------------------------------------------

def test_conv_sum_of_ones():
    out = conv2d_forward(np.ones((1, 1, 3, 3)), np.ones((1, 1, 3, 3)))
    assert out.shape == (1, 1, 1, 1)
    assert out[0, 0, 0, 0] == 9.0


def test_conv_identity_kernel(rng):
    x = rng.standard_normal((2, 1, 4, 5))
    np.testing.assert_array_equal(conv2d_forward(x, np.ones((1, 1, 1, 1))), x)


def test_conv_matches_loop_reference(rng):
    x = rng.standard_normal((2, 3, 5, 5))
    w = rng.standard_normal((4, 3, 3, 3))
    b = rng.standard_normal(4)
    np.testing.assert_allclose(conv2d_forward(x, w, b), conv2d_loop_reference(x, w, b), rtol=0, atol=1e-12)


@pytest.mark.parametrize("xs, ws", [((3, 2, 4, 7), (5, 2, 2, 3)), ((2, 1, 3, 9), (2, 1, 1, 4)), ((1, 4, 6, 2), (3, 4, 6, 1))])
def test_conv_rectangular_kernels(rng, xs, ws):
    x, w = rng.standard_normal(xs), rng.standard_normal(ws)
    np.testing.assert_allclose(conv2d_forward(x, w), conv2d_loop_reference(x, w), atol=1e-12)


def test_conv_errors():
    with pytest.raises(ValidationError, match="larger"):
        conv2d_forward(np.zeros((1, 1, 2, 2)), np.zeros((1, 1, 3, 3)))
    with pytest.raises(ValidationError, match="channels"):
        conv2d_forward(np.zeros((1, 2, 4, 4)), np.zeros((1, 3, 3, 3)))
    with pytest.raises(ValidationError, match="inconsistent"):
        conv2d_backward(np.zeros((1, 1, 3, 3)), np.zeros((1, 1, 4, 4)), np.zeros((1, 1, 3, 3)))


def test_conv_backward_zero_grad(rng):
    x, w = rng.standard_normal((2, 2, 4, 4)), rng.standard_normal((3, 2, 2, 2))
    gx, gw, gb = conv2d_backward(np.zeros((2, 3, 3, 3)), x, w)
    assert not gx.any() and not gw.any() and not gb.any()


def test_conv_backward_scalar_chain_rule():
    x, w = np.array([[[[1.5]]]]), np.array([[[[-2.0]]]])
    gx, gw, gb = conv2d_backward(np.array([[[[0.25]]]]), x, w)
    assert gw[0, 0, 0, 0] == 1.5 * 0.25
    assert gx[0, 0, 0, 0] == -2.0 * 0.25
    assert gb[0] == 0.25


def test_conv_backward_matches_finite_differences(rng):
    x = rng.standard_normal((2, 2, 5, 4))
    w = rng.standard_normal((3, 2, 3, 2))
    b = rng.standard_normal(3)
    proj = rng.standard_normal((2, 3, 3, 3))

    def loss():
        return float(np.sum(conv2d_forward(x, w, b) * proj))

    gx, gw, gb = conv2d_backward(proj, x, w)
    for analytic, arr in [(gx, x), (gw, w), (gb, b)]:
        # the loss is linear in every single coordinate: no truncation error at any step
        numeric = numeric_grad(loss, arr, step=1e-3)
        rel = np.abs(analytic - numeric) / np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), 1e-6)
        assert rel.max() <= 1e-6


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1), st.floats(-2, 2), st.floats(-2, 2))
def test_conv_linearity(seed, a, b):
    r = np.random.default_rng(seed)
    x, y = r.standard_normal((2, 2, 5, 6)), r.standard_normal((2, 2, 5, 6))
    w = r.standard_normal((3, 2, 3, 2))
    lhs = conv2d_forward(a * x + b * y, w)
    rhs = a * conv2d_forward(x, w) + b * conv2d_forward(y, w)
    np.testing.assert_allclose(lhs, rhs, atol=1e-10)


def test_conv_layer_init_is_fan_in_uniform():
    layer = Conv2d(4, 6, (3, 2), rng=np.random.default_rng(0))
    bound = 1 / math.sqrt(4 * 3 * 2)
    assert np.abs(layer.params["weight"]).max() <= bound
    assert not layer.params["bias"].any()
    assert Conv2d(4, 6, (3, 2), bias=False).n_trainable() == 6 * 4 * 3 * 2


# -- batch norm ---------------------------------------------------------------

def test_bn_constant_input_gives_zeros():
    out = BatchNorm(3).forward(np.full((4, 3, 2, 2), 7.0), training=True)
    assert not out.any()


def test_bn_fixed_point(rng):
    x = rng.standard_normal((64, 2, 3))
    x = (x - x.mean(axis=(0, 2), keepdims=True)) / x.std(axis=(0, 2), keepdims=True)
    # with the default epsilon the output is scaled by 1/sqrt(1 + 1e-5)
    np.testing.assert_allclose(BatchNorm(2, eps=1e-12).forward(x), x, atol=1e-6)
    np.testing.assert_allclose(BatchNorm(2).forward(x), x / math.sqrt(1 + 1e-5), atol=1e-12)


def test_bn_random_batch_moments(rng):
    x = 3.0 * rng.standard_normal((16, 4, 5, 5)) + 5.0
    out = BatchNorm(4).forward(x, training=True)
    for f in range(4):
        vals = out[:, f].ravel()
        assert abs(vals.sum() / vals.size) <= 1e-5
        assert abs(((vals - vals.mean()) ** 2).sum() / vals.size - 1.0) <= 1e-5


def test_bn_running_stats_and_inference(rng):
    bn = BatchNorm(2)
    x = rng.standard_normal((10, 2, 3)) * 2 + 1
    bn.forward(x, training=True)
    n = 10 * 3
    mean = x.mean(axis=(0, 2))
    var_unbiased = x.var(axis=(0, 2)) * n / (n - 1)
    np.testing.assert_allclose(bn.buffers["running_mean"], 0.1 * mean)
    np.testing.assert_allclose(bn.buffers["running_var"], 0.9 + 0.1 * var_unbiased)
    out = bn.forward(x, training=False)
    expected = (x - bn.buffers["running_mean"][None, :, None]) / np.sqrt(
        bn.buffers["running_var"][None, :, None] + 1e-5
    )
    np.testing.assert_allclose(out, expected)
    assert bn.n_trainable() == 0


def test_bn_single_value_training_rejected():
    with pytest.raises(ValidationError):
        BatchNorm(3).forward(np.ones((1, 3)), training=True)


@settings(max_examples=30, deadline=None)
@given(st.integers(8, 40), st.integers(1, 4), st.integers(0, 2**32 - 1))
def test_bn_training_statistics_property(batch, feats, seed):
    x = np.random.default_rng(seed).standard_normal((batch, feats, 3))
    out = BatchNorm(feats).forward(x, training=True)
    assert np.abs(out.mean(axis=(0, 2))).max() <= 1e-5
    assert np.abs(out.var(axis=(0, 2)) - 1).max() <= 1e-4


# -- softmax cross-entropy ----------------------------------------------------

def test_ce_uniform():
    loss, _ = softmax_cross_entropy(np.zeros((3, 2)), np.array([0, 1, 1]))
    assert loss == pytest.approx(math.log(2), abs=1e-15)


def test_ce_saturation():
    logits = np.zeros((2, 3))
    logits[0, 1] = 20.0
    logits[1, 2] = 20.0
    loss, _ = softmax_cross_entropy(logits, np.array([1, 2]))
    assert loss < 1e-8


def test_ce_matches_direct_formula(rng):
    logits = rng.standard_normal((4, 3))
    labels = np.array([0, 2, 1, 2])
    loss, grad = softmax_cross_entropy(logits, labels)
    direct = np.mean([math.log(sum(math.exp(v) for v in row)) - row[y] for row, y in zip(logits, labels)])
    assert loss == pytest.approx(direct, abs=1e-12)
    soft = np.exp(logits) / np.exp(logits).sum(axis=1, keepdims=True)
    np.testing.assert_allclose(grad, (soft - np.eye(3)[labels]) / 4, atol=1e-15)
    np.testing.assert_allclose(grad.sum(axis=1), 0.0, atol=1e-12)


def test_ce_large_logits_stable():
    loss, grad = softmax_cross_entropy(np.array([[1000.0, 0.0]]), np.array([1]))
    assert loss == pytest.approx(1000.0)
    assert np.isfinite(grad).all()


def test_ce_label_out_of_range():
    with pytest.raises(ValidationError):
        softmax_cross_entropy(np.zeros((2, 3)), np.array([0, 3]))


# -- gradient checks per layer ------------------------------------------------

def test_grad_check_dense_is_exact(rng):
    report = grad_check(Dense(5, 3, rng=rng), rng.standard_normal((4, 5)))
    assert report.passed
    assert report.max_error <= 1e-8


def test_grad_check_conv_bn_dense_ce_chain(rng):
    net = Sequential([
        ("conv", Conv2d(1, 2, (3, 3), rng=rng)),
        ("bn", BatchNorm(2)),
        ("flat", Flatten()),
        ("dense", Dense(2 * 3 * 3, 3, rng=rng)),
    ])
    net.layers[0][1].params["bias"][:] = rng.standard_normal(2)
    report = grad_check(net, rng.standard_normal((4, 1, 5, 5)), labels=np.array([0, 1, 2, 1]))
    assert report.passed, str(report)
    assert set(report.errors) == {"conv.weight", "conv.bias", "dense.weight", "dense.bias", "input"}


@pytest.mark.parametrize("training", [True, False])
def test_grad_check_batchnorm_modes(rng, training):
    bn = BatchNorm(3)
    bn.buffers["running_mean"][:] = rng.standard_normal(3)
    bn.buffers["running_var"][:] = rng.uniform(0.5, 2.0, 3)
    assert grad_check(bn, rng.standard_normal((5, 3, 2, 2)), training=training).passed


@pytest.mark.parametrize(
    "layer, shape",
    [
        (Conv2d(2, 3, (2, 3), rng=np.random.default_rng(1)), (2, 2, 4, 5)),
        (Square(), (3, 4)),
        (MeanPoolTime(4, 2), (2, 3, 1, 11)),
        (Flatten(), (2, 3, 2)),
    ],
)
def test_grad_check_layers(rng, layer, shape):
    assert grad_check(layer, rng.standard_normal(shape)).passed


def test_grad_check_safe_log(rng):
    x = rng.uniform(0.5, 3.0, (3, 4))
    assert grad_check(SafeLog(), x).passed


def test_safe_log_floor():
    out = SafeLog().forward(np.array([0.0, 1e-9, 1.0]))
    np.testing.assert_allclose(out, [math.log(1e-6), math.log(1e-6), 0.0])
    layer = SafeLog()
    layer.forward(np.array([0.0, 2.0]))
    np.testing.assert_array_equal(layer.backward(np.ones(2)), [0.0, 0.5])


def test_grad_check_detects_corrupted_gradient(rng):
    class Corrupted(Dense):
        def backward(self, grad):
            gx = super().backward(grad)
            self.grads["weight"] *= 1.01
            return gx

    report = grad_check(Corrupted(4, 2, rng=rng), rng.standard_normal((3, 4)))
    assert not report.passed
    assert report.errors["weight"] > 1e-4


def test_grad_check_requires_float64(rng):
    with pytest.raises(ValidationError):
        grad_check(Dense(2, 2), np.zeros((1, 2), dtype=np.float32))


def test_grad_check_non_finite():
    with pytest.raises(NumericalError):
        grad_check(Square(), np.array([[np.inf, 1.0]]))


# -- misc -----------------------------------------------------------------------

def test_dropout_inverted_scaling():
    d = Dropout(0.5, rng=np.random.default_rng(0))
    x = np.ones((1000, 10))
    out = d.forward(x, training=True)
    assert set(np.unique(out)) <= {0.0, 2.0}
    assert abs(out.mean() - 1.0) < 0.05
    np.testing.assert_array_equal(d.backward(np.ones_like(x)), out)
    np.testing.assert_array_equal(d.forward(x, training=False), x)


def test_mean_pool_values():
    x = np.arange(10.0).reshape(1, 1, 1, 10)
    out = MeanPoolTime(4, 3).forward(x)
    np.testing.assert_allclose(out.ravel(), [1.5, 4.5, 7.5])


def test_precision_modes(monkeypatch):
    assert precision_dtype("fast") == np.float32
    assert precision_dtype("check") == np.float64
    monkeypatch.setenv("TRM_PRECISION", "check")
    assert precision_dtype() == np.float64
    with pytest.raises(ValidationError):
        precision_dtype("half")
