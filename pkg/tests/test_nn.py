import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from eegflow import nn
from helpers import check_gradient, numeric_grad, rel_error

TOL = 1e-4


def layer_grad_error(layer, x, params, seed=0):
    """Max relative error of dx and every parameter gradient against central differences."""
    rng = np.random.default_rng(seed)
    y, cache = layer.forward(params, x)
    probe = rng.standard_normal(y.shape)
    dx, grads = layer.backward(params, cache, probe)
    f = lambda: float(np.sum(layer.forward(params, x)[0] * probe))
    errs = [check_gradient(f, x, dx)]
    for k in layer.keys():
        errs.append(check_gradient(f, params[k], grads[k]))
    return max(errs)


@pytest.fixture
def rng():
    return np.random.default_rng(42)


def test_dense(rng):
    layer = nn.Dense("d", 6, 4)
    assert layer_grad_error(layer, rng.standard_normal((5, 6)), layer.init(rng)) < TOL


def test_dense_nd_input(rng):
    layer = nn.Dense("d", 3, 2)
    assert layer_grad_error(layer, rng.standard_normal((2, 4, 3)), layer.init(rng)) < TOL


@pytest.mark.parametrize("c_in,c_out,k", [(2, 3, 3), (4, 3, 1), (1, 2, 3)])
def test_conv(rng, c_in, c_out, k):
    layer = nn.Conv2d("c", c_in, c_out, k)
    p = layer.init(rng)
    p["c.b"] = rng.standard_normal(p["c.b"].shape)
    assert layer_grad_error(layer, rng.standard_normal((2, c_in, 6, 5)), p) < TOL


def test_conv_matches_direct_correlation(rng):
    layer = nn.Conv2d("c", 2, 3, 3)
    p = layer.init(rng)
    x = rng.standard_normal((1, 2, 5, 6))
    y, _ = layer.forward(p, x)
    W = p["c.W"].reshape(3, 3, 2, 3)  # (kernel row, kernel col, c_in, c_out)
    xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
    ref = np.zeros((1, 3, 5, 6))
    for o in range(3):
        for i in range(5):
            for j in range(6):
                ref[0, o, i, j] = np.sum(xp[0, :, i:i + 3, j:j + 3].transpose(1, 2, 0) * W[..., o]) + p["c.b"][o]
    np.testing.assert_allclose(y, ref, atol=1e-12)


def test_relu(rng):
    x = rng.standard_normal((4, 7))
    x[np.abs(x) < 1e-3] = 0.5
    assert layer_grad_error(nn.ReLU(), x, {}) < TOL


def test_maxpool(rng):
    x = rng.permutation(2 * 3 * 6 * 8).reshape(2, 3, 6, 8) / 7.0  # distinct values: no ties
    assert layer_grad_error(nn.MaxPool2(), x.astype(float), {}) < TOL
    y, _ = nn.MaxPool2().forward({}, x)
    np.testing.assert_array_equal(y, x.reshape(2, 3, 3, 2, 4, 2).max(axis=(3, 5)))


def test_maxpool_tie_routes_to_first():
    x = np.ones((1, 1, 2, 2))
    y, cache = nn.MaxPool2().forward({}, x)
    dx, _ = nn.MaxPool2().backward({}, cache, np.ones_like(y))
    assert dx.sum() == 1 and dx[0, 0, 0, 0] == 1


def test_flatten(rng):
    x = rng.standard_normal((2, 3, 2, 2))
    assert layer_grad_error(nn.Flatten(), x, {}) < TOL


def test_lstm_bptt(rng):
    layer = nn.LSTM("l", 3, 4)
    p = layer.init(rng)
    p["l.b"] = 0.3 * rng.standard_normal(p["l.b"].shape)
    assert layer_grad_error(layer, rng.standard_normal((2, 6, 3)), p) < TOL


def test_lstm_single_step_by_hand():
    layer = nn.LSTM("l", 1, 1)
    p = {"l.Wx": np.array([[0.5, -0.3, 0.8, 0.2]]), "l.Wh": np.array([[0.1, 0.1, 0.1, 0.1]]),
         "l.b": np.array([0.1, 0.2, -0.1, 0.0])}
    x = 0.7
    sig = lambda v: 1 / (1 + np.exp(-v))
    i, f, o = sig(0.5 * x + 0.1), sig(-0.3 * x + 0.2), sig(0.8 * x - 0.1)
    g = np.tanh(0.2 * x)
    c = i * g  # previous cell state is zero
    h = o * np.tanh(c)
    hs, _ = layer.forward(p, np.array([[[x]]]))
    assert hs[0, 0, 0] == pytest.approx(h, abs=1e-15)


def test_lstm_zero_fixed_point():
    layer = nn.LSTM("l", 3, 5)
    p = {k: np.zeros_like(v) for k, v in layer.init(np.random.default_rng(0)).items()}
    hs, _ = layer.forward(p, np.zeros((2, 12, 3)))
    assert hs.shape == (2, 12, 5) and np.all(hs == 0)


def test_sequential(rng):
    net = nn.Sequential([nn.Dense("a", 4, 5), nn.ReLU(), nn.Dense("b", 5, 3)])
    assert layer_grad_error(net, rng.standard_normal((3, 4)), net.init(rng)) < TOL


def test_cross_entropy(rng):
    z = rng.standard_normal((5, 4))
    y = rng.integers(0, 4, 5)
    loss, dz = nn.cross_entropy(z, y)
    manual = -np.mean([np.log(np.exp(z[i, y[i]]) / np.exp(z[i]).sum()) for i in range(5)])
    assert loss == pytest.approx(manual, rel=1e-12)
    assert check_gradient(lambda: nn.cross_entropy(z, y)[0], z, dz, limit=None) < TOL


def test_uniform_cross_entropy(rng):
    z = rng.standard_normal((6, 2))
    loss, dz = nn.uniform_cross_entropy(z)
    p = np.exp(z) / np.exp(z).sum(1, keepdims=True)
    assert loss == pytest.approx(float(np.mean(-np.log(p).mean(1))), rel=1e-12)
    assert check_gradient(lambda: nn.uniform_cross_entropy(z)[0], z, dz, limit=None) < TOL


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31), st.floats(-50, 50))
def test_softmax_shift_invariance(seed, shift):
    z = np.random.default_rng(seed).standard_normal((3, 5))
    np.testing.assert_allclose(nn.softmax(z + shift), nn.softmax(z), atol=1e-12)
    np.testing.assert_allclose(nn.softmax(z).sum(axis=1), 1.0, atol=1e-12)


def test_dropout_inverted_expectation():
    # on a linear stub the expectation of the masked pass is exactly the inference pass
    rng = np.random.default_rng(0)
    drop = nn.Dropout(0.25)
    w = rng.standard_normal(50)
    x = rng.standard_normal((1, 50))
    infer = float((drop.forward({}, x, train=False)[0] @ w)[0])
    draws = np.array([float((drop.forward({}, x, True, rng)[0] @ w)[0]) for _ in range(20000)])
    se = draws.std() / np.sqrt(len(draws))
    assert abs(draws.mean() - infer) <= 4 * se


def test_dropout_backward_uses_mask():
    drop = nn.Dropout(0.5)
    x = np.ones((2, 6))
    y, mask = drop.forward({}, x, True, np.random.default_rng(1))
    dx, _ = drop.backward({}, mask, np.ones_like(y))
    np.testing.assert_array_equal(dx, y)
    with pytest.raises(ValueError):
        drop.forward({}, x, True, None)
    with pytest.raises(ValueError):
        nn.Dropout(1.0)


def test_clamped_log_flags():
    out, flag = nn.clamped_log(np.array([1.0, 0.0]))
    assert flag and out[1] == pytest.approx(np.log(1e-12))
    assert not nn.clamped_log(np.array([0.5]))[1]


def test_sgd():
    p = {"a": np.ones(3), "b": np.ones(2)}
    g = {"a": np.full(3, 2.0), "b": np.ones(2)}
    nn.sgd(p, g, 0.0)
    assert np.all(p["a"] == 1)
    nn.sgd(p, g, 0.5, keys=["a"])
    np.testing.assert_array_equal(p["a"], 0.0)
    np.testing.assert_array_equal(p["b"], 1.0)


def test_glorot_bounds():
    w = nn.glorot(np.random.default_rng(0), (40, 60), 40, 60)
    assert np.abs(w).max() <= np.sqrt(6 / 100)


def test_helpers_detect_wrong_gradient():
    # the oracle itself must flag a wrong derivative
    x = np.array([1.0, 2.0])
    idx, num = numeric_grad(lambda: float(np.sum(x ** 2)), x)
    assert rel_error(np.array([2.0, 4.0]), num) < 1e-8
    assert rel_error(np.array([2.0, 4.4]), num) > 1e-2
