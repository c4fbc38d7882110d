import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from conftest import tiny_config
from oracles import floor_count, prune_oracle
from resfri import ops
from resfri.errors import ConfigError, ShapeError
from resfri.layers import Conv2d
from resfri.network import build_network
from resfri.optim import SGD
from resfri.pruning import apply_mask, build_mask, num_to_prune
from resfri.tensor import Tensor, backward


def test_ratio_zero_is_all_ones(rng):
    m = build_mask(rng.standard_normal(20), 0.0)
    assert np.all(m.mask == 1) and m.num_pruned == 0


def test_ratio_07_of_ten():
    assert build_mask(np.arange(1.0, 11.0), 0.7).num_pruned == 7


def test_sort_by_magnitude_example():
    m = build_mask(np.array([0.5, -0.1, 0.3, -0.9]), 0.5)
    assert np.flatnonzero(m.mask == 0).tolist() == [1, 2]
    assert prune_oracle([0.5, -0.1, 0.3, -0.9], 0.5) == [1, 2]


def test_ties_break_to_lowest_index():
    m = build_mask(np.array([1.0, -1.0, 1.0, 1.0]), 0.5)
    assert np.flatnonzero(m.mask == 0).tolist() == [0, 1]


@pytest.mark.parametrize("ratio", [-0.1, 1.5])
def test_ratio_out_of_range(ratio):
    with pytest.raises(ConfigError):
        build_mask(np.ones(4), ratio)


@pytest.mark.parametrize("ratio", [0.0, 0.35, 0.7, 1.0])
def test_zero_count_exact_all_sizes(ratio):
    r = np.random.default_rng(0)
    for n in range(1, 1001):
        assert num_to_prune(n, ratio) == floor_count(ratio, n)
    for n in (1, 2, 3, 7, 10, 99, 1000):
        assert build_mask(r.standard_normal(n), ratio).num_pruned == floor_count(ratio, n)


@given(st.integers(1, 1000), st.sampled_from([0.0, 0.1, 0.25, 0.35, 0.5, 0.7, 0.9, 1.0]),
       st.integers(0, 2**31))
def test_mask_matches_sort_oracle(n, ratio, seed):
    w = np.random.default_rng(seed).standard_normal(n)
    m = build_mask(w, ratio)
    assert np.flatnonzero(m.mask == 0).tolist() == prune_oracle(w, ratio)


def test_mask_is_immutable(rng):
    m = build_mask(rng.standard_normal(8), 0.5)
    with pytest.raises(ValueError):
        m.mask[0] = 1.0


def test_apply_mask_shape_error(rng):
    conv = Conv2d(2, 3, 1, rng=rng)
    with pytest.raises(ShapeError):
        apply_mask(conv, build_mask(np.ones((3, 2, 3, 3)), 0.5))


def test_all_ones_mask_bitwise_identical(rng):
    conv = Conv2d(3, 4, 3, rng=rng, dtype=np.float64)
    x = Tensor(rng.standard_normal((2, 3, 5, 5)))
    before = conv(x).data
    apply_mask(conv, build_mask(conv.weight, 0.0))
    assert conv(x).data.tobytes() == before.tobytes()


def test_masked_forward_equals_manual_zeroing(rng):
    conv = Conv2d(3, 4, 1, bias=False, rng=rng, dtype=np.float64)
    w0 = conv.weight.data.copy()
    m = build_mask(conv.weight, 0.7)
    apply_mask(conv, m)
    x = Tensor(rng.standard_normal((2, 3, 5, 5)))
    ref = ops.conv2d(x, Tensor(w0 * m.mask))
    assert np.max(np.abs(conv(x).data - ref.data)) <= 1e-12


def test_masked_weights_stay_zero_under_sgd(rng):
    conv = Conv2d(4, 6, 1, bias=False, rng=rng, dtype=np.float64)
    m = build_mask(conv.weight, 0.7)
    apply_mask(conv, m)
    opt = SGD(conv, lr=0.05, momentum=0.9, weight_decay=5e-4)
    x = Tensor(rng.standard_normal((2, 4, 3, 3)))
    for _ in range(100):
        opt.zero_grad()
        backward(ops.sum_all(ops.mul(conv(x), conv(x))))
        assert np.all(conv.weight.grad[m.mask == 0] == 0.0)
        opt.step()
        assert np.all(conv.weight.data[m.mask == 0] == 0.0)
    assert np.any(conv.weight.data[m.mask == 1] != 0.0)


def _trajectory(net, steps, seed):
    r = np.random.default_rng(seed)
    opt = SGD(net, lr=0.01)
    out = []
    for _ in range(steps):
        x = Tensor(r.standard_normal((4, 1, 32, 32)).astype(np.float32))
        y = r.integers(0, 10, 4)
        opt.zero_grad()
        loss = ops.softmax_cross_entropy(net(x), y)
        out.append(float(loss.data))
        backward(loss)
        opt.step()
    return out, [p.data.copy() for p in net.parameters()]


def test_ratio_zero_mask_trajectory_bitwise_equal():
    plain = build_network(tiny_config(split=False, fusion="concatenation"), seed=5)
    masked = build_network(tiny_config(split=False, fusion="concatenation"), seed=5)
    for block in masked.blocks:
        for p in block.passages:
            apply_mask(p.conv, build_mask(p.conv.weight, 0.0))
    assert len(masked.masked_layers()) == 3 and not plain.masked_layers()
    la, pa = _trajectory(plain, 3, 9)
    lb, pb = _trajectory(masked, 3, 9)
    assert la == lb
    assert all(a.tobytes() == b.tobytes() for a, b in zip(pa, pb))
