import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from oracles import batchnorm_train, direct_conv2d, window_avgpool, window_maxpool
from resfri import ops
from resfri.errors import ConfigError, DataError, ShapeError, UsageError
from resfri.gradcheck import check, primitive_checks
from resfri.layers import BatchNorm2d
from resfri.tensor import Tensor, backward, no_grad


def f64(rng, *shape, grad=False):
    return Tensor(rng.uniform(-1, 1, shape), requires_grad=grad)


# --- Tensor / tape --------------------------------------------------------

def test_tensor_invariants():
    t = Tensor(np.zeros((2, 3)))
    assert t.size == 6 and t.shape == (2, 3)
    with pytest.raises(ShapeError):
        Tensor(np.zeros((0, 3)))


def test_sum_grad_is_ones(rng):
    x = f64(rng, 2, 3, 4, grad=True)
    backward(ops.sum_all(x))
    assert np.array_equal(x.grad, np.ones((2, 3, 4)))
    assert x.grad.shape == x.shape


def test_relu_grad_example():
    x = Tensor(np.array([-1.0, 2.0]), requires_grad=True)
    backward(ops.sum_all(ops.relu(x)))
    assert x.grad.tolist() == [0.0, 1.0]


def test_backward_usage_errors(rng):
    x = f64(rng, 3, grad=True)
    loss = ops.sum_all(ops.mul(x, x))
    backward(loss)
    with pytest.raises(UsageError):
        backward(loss)
    with pytest.raises(UsageError):
        backward(Tensor(np.array(1.0)))
    with pytest.raises(UsageError):
        backward(ops.mul(x, x))  # not a scalar
    with no_grad():
        detached = ops.sum_all(x)
    with pytest.raises(UsageError):
        backward(detached)


def test_shared_subexpression_accumulates(rng):
    x = f64(rng, 4, grad=True)
    y = ops.add(x, x)
    backward(ops.sum_all(ops.mul(y, y)))
    assert np.allclose(x.grad, 8 * x.data)


# --- convolution ------------------------------------------------------------

def test_identity_1x1_conv(rng):
    x = f64(rng, 2, 4, 5, 5)
    w = np.eye(4).reshape(4, 4, 1, 1)
    assert np.array_equal(ops.conv2d(x, Tensor(w)).data, x.data)


def test_conv_output_shape(rng):
    x = Tensor(rng.standard_normal((2, 3, 32, 32)).astype(np.float32))
    w = Tensor(rng.standard_normal((16, 3, 3, 3)).astype(np.float32))
    assert ops.conv2d(x, w, padding=1).shape == (2, 16, 32, 32)


def test_conv_matches_direct_loop(rng):
    x, w = rng.uniform(-1, 1, (1, 2, 5, 5)), rng.uniform(-1, 1, (3, 2, 3, 3))
    b = rng.uniform(-1, 1, 3)
    got = ops.conv2d(Tensor(x), Tensor(w), Tensor(b), 1, 1).data
    assert np.max(np.abs(got - direct_conv2d(x, w, b, 1, 1))) <= 1e-12


@pytest.mark.parametrize("k", [1, 3, 5])
@pytest.mark.parametrize("p", [0, 1, 2])
@pytest.mark.parametrize("s", [1, 2])
def test_conv_grid_matches_direct_loop(rng, k, p, s):
    x, w = rng.uniform(-1, 1, (2, 3, 7, 6)), rng.uniform(-1, 1, (2, 3, k, k))
    got = ops.conv2d(Tensor(x), Tensor(w), None, s, p).data
    assert np.max(np.abs(got - direct_conv2d(x, w, None, s, p))) <= 1e-12


def test_conv_errors(rng):
    x = f64(rng, 1, 3, 4, 4)
    with pytest.raises(ShapeError, match="3.*2|2.*3"):
        ops.conv2d(x, f64(rng, 4, 2, 3, 3))
    with pytest.raises(ConfigError):
        ops.conv2d(x, f64(rng, 4, 3, 5, 5), padding=0)


def test_conv_mask_contributes_zero(rng):
    x, w = f64(rng, 1, 2, 5, 5), rng.uniform(-1, 1, (3, 2, 3, 3))
    mask = (rng.random(w.shape) > 0.5).astype(np.float64)
    got = ops.conv2d(x, Tensor(w), padding=1, mask=mask).data
    ref = ops.conv2d(x, Tensor(w * mask), padding=1).data
    assert np.max(np.abs(got - ref)) <= 1e-12


# --- pooling ----------------------------------------------------------------

def test_avgpool_constant_and_border():
    x = Tensor(np.full((1, 1, 4, 4), 2.0))
    out = ops.avgpool2d(x, 3, 1, 1).data[0, 0]
    assert np.allclose(out[1:3, 1:3], 2.0)
    assert out[0, 0] == pytest.approx(2.0 * 4 / 9)
    assert out[0, 1] == pytest.approx(2.0 * 6 / 9)


def test_maxpool_example():
    x = Tensor(np.array([[[[1.0, 2.0], [3.0, 4.0]]]]))
    assert ops.maxpool2d(x, 2, 1, 0).data.tolist() == [[[[4.0]]]]


def test_avgpool_matches_window_loop(rng):
    x = rng.uniform(-1, 1, (1, 3, 8, 8))
    got = ops.avgpool2d(Tensor(x), 3, 1, 1).data
    assert np.max(np.abs(got - window_avgpool(x, 3, 1, 1))) <= 1e-12


@pytest.mark.parametrize("k,s,p", [(3, 1, 1), (2, 2, 0), (3, 2, 1)])
def test_maxpool_matches_window_loop(rng, k, s, p):
    x = rng.uniform(-1, 1, (2, 2, 7, 7))
    assert np.array_equal(ops.maxpool2d(Tensor(x), k, s, p).data, window_maxpool(x, k, s, p))


def test_maxpool_tie_goes_to_first_index():
    x = Tensor(np.ones((1, 1, 2, 2)), requires_grad=True)
    backward(ops.sum_all(ops.maxpool2d(x, 2, 1, 0)))
    assert x.grad[0, 0].tolist() == [[1.0, 0.0], [0.0, 0.0]]


def test_pool_bad_extent():
    with pytest.raises(ConfigError):
        ops.avgpool2d(Tensor(np.ones((1, 1, 2, 2))), 3, 1, 0)


# --- batch norm ---------------------------------------------------------------

def test_batchnorm_train_normalises(rng):
    bn = BatchNorm2d(3, dtype=np.float64)
    x = Tensor(rng.normal(3.0, 2.0, (4, 3, 5, 5)))
    y = bn(x).data
    assert np.all(np.abs(y.mean(axis=(0, 2, 3))) <= 1e-6)
    assert np.all(np.abs(y.var(axis=(0, 2, 3)) - 1) <= 1e-5)
    assert np.max(np.abs(y - batchnorm_train(x.data, np.ones(3), np.zeros(3)))) <= 1e-12


def test_batchnorm_affine():
    bn = BatchNorm2d(1, dtype=np.float64)
    bn.gamma.data[:] = 2.0
    bn.beta.data[:] = 3.0
    v = np.array([-1.0, 1.0] * 8).reshape(1, 1, 4, 4)
    assert np.allclose(bn(Tensor(v)).data, 2 * v + 3, atol=1e-4)


def test_batchnorm_running_stats_and_eval(rng):
    bn = BatchNorm2d(2, dtype=np.float64)
    x = rng.normal(1.0, 2.0, (3, 2, 4, 4))
    bn(Tensor(x))
    n = 3 * 16
    mean = x.mean(axis=(0, 2, 3))
    var = x.var(axis=(0, 2, 3)) * n / (n - 1)
    assert np.allclose(bn.running_mean, 0.1 * mean)
    assert np.allclose(bn.running_var, 0.9 + 0.1 * var)
    bn.eval()
    before = (bn.running_mean.copy(), bn.running_var.copy())
    out = bn(Tensor(x)).data
    assert np.array_equal(bn.running_mean, before[0]) and np.array_equal(bn.running_var, before[1])
    ref = (x - before[0].reshape(1, -1, 1, 1)) / np.sqrt(before[1].reshape(1, -1, 1, 1) + 1e-5)
    assert np.allclose(out, ref)


def test_batchnorm_errors():
    bn = BatchNorm2d(2, dtype=np.float64)
    with pytest.raises(ShapeError):
        bn(Tensor(np.ones((2, 3, 2, 2))))
    with pytest.raises(ShapeError):
        bn(Tensor(np.ones((1, 2, 1, 1))))


# --- elementwise, concat, loss ----------------------------------------------------

def test_concat_order(rng):
    a, b = f64(rng, 2, 3, 4, 4), f64(rng, 2, 5, 4, 4)
    out = ops.concat_channels([a, b]).data
    assert out.shape[1] == 8
    assert np.array_equal(out[:, :3], a.data) and np.array_equal(out[:, 3:], b.data)


@given(st.lists(st.integers(1, 5), min_size=1, max_size=5), st.integers(0, 2**32 - 1))
def test_concat_slice_roundtrip(widths, seed):
    r = np.random.default_rng(seed)
    parts = [Tensor(r.standard_normal((2, c, 3, 3))) for c in widths]
    joined = ops.concat_channels(parts)
    start = 0
    for p in parts:
        piece = ops.slice_channels(joined, start, start + p.shape[1])
        assert np.array_equal(piece.data, p.data)
        start += p.shape[1]


def test_shape_errors(rng):
    with pytest.raises(ShapeError):
        ops.add(f64(rng, 1, 2, 3, 3), f64(rng, 1, 3, 3, 3))
    with pytest.raises(ShapeError):
        ops.concat_channels([f64(rng, 1, 2, 3, 3), f64(rng, 1, 2, 4, 3)])


def test_uniform_logits_loss():
    loss = ops.softmax_cross_entropy(Tensor(np.zeros((3, 10))), np.array([0, 4, 9]))
    assert float(loss.data) == pytest.approx(math.log(10), abs=1e-12)


def test_label_out_of_range():
    with pytest.raises(DataError):
        ops.softmax_cross_entropy(Tensor(np.zeros((2, 10))), np.array([0, 10]))


def test_linear_layout(rng):
    x, w, b = f64(rng, 4, 6), f64(rng, 3, 6), f64(rng, 3)
    assert np.allclose(ops.linear(x, w, b).data, x.data @ w.data.T + b.data)


# --- finite differences -----------------------------------------------------------

def test_primitive_gradients_match_finite_differences():
    results = primitive_checks(np.random.default_rng(7))
    worst = max(results, key=lambda r: r.max_rel_err)
    assert worst.max_rel_err <= 1e-4, worst
    assert all(r.coords >= 1 for r in results)


def test_softmax_ce_gradcheck(rng):
    logits = f64(rng, 4, 10, grad=True)
    labels = rng.integers(0, 10, 4)
    res = check("ce", lambda: ops.softmax_cross_entropy(logits, labels), {"l": logits}, rng)
    assert res.max_rel_err <= 1e-4


def test_forward_is_deterministic(rng):
    x, w = f64(rng, 2, 3, 9, 9), f64(rng, 4, 3, 3, 3)
    a = ops.relu(ops.conv2d(x, w, padding=1)).data
    b = ops.relu(ops.conv2d(x, w, padding=1)).data
    assert a.tobytes() == b.tobytes()
