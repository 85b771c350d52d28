import numpy as np
import pytest
from hypothesis import given, strategies as st

from feddhad import nn
from feddhad.errors import CapacityError, NumericalError, StructuralError

from conftest import tiny_problem

sizes_strategy = st.lists(st.integers(1, 5), min_size=2, max_size=4).map(tuple)


def brute_force_flops(sizes, batch, unit_keep=None):
    """Count scalar operations of the forward pass one by one."""
    hidden = sizes[1:-1]
    if unit_keep is None:
        unit_keep = np.ones(sum(hidden), bool)
    bounds = np.cumsum([0, *hidden])
    keep = [unit_keep[a:b] for a, b in zip(bounds[:-1], bounds[1:])]
    alive = [np.ones(sizes[0], bool), *keep, np.ones(sizes[-1], bool)]
    ops = 0
    for i in range(len(sizes) - 1):
        for _ in range(batch):
            for j in np.flatnonzero(alive[i + 1]):
                for _k in np.flatnonzero(alive[i]):
                    ops += 2  # multiply and add
                ops += 1  # bias
                if i < len(sizes) - 2:
                    ops += 1  # rectifier
    return ops


@given(st.integers(0, 10_000), sizes_strategy)
def test_gradient_matches_finite_differences(seed, sizes):
    spec, w, x, y = tiny_problem(seed, sizes)
    _, g = nn.value_and_grad(spec, w, x, y)
    num = nn.numerical_gradient(lambda v: nn.forward(spec, v, x, y)[1], w, 1e-5)
    assert np.allclose(g, num, rtol=1e-4, atol=1e-6)


@given(st.integers(0, 10_000))
def test_masked_gradient_matches_finite_differences(seed):
    spec, w, x, y = tiny_problem(seed, (3, 5, 4, 2))
    rng = np.random.default_rng(seed)
    d = rng.uniform(0, 0.6, spec.n_hidden_units)
    mask = np.where(rng.random(d.size) < d, 0.0, 1 / (1 - d))
    _, g = nn.value_and_grad(spec, w, x, y, mask)
    num = nn.numerical_gradient(lambda v: nn.forward(spec, v, x, y, mask)[1], w, 1e-5)
    assert np.allclose(g, num, rtol=1e-4, atol=1e-6)


@given(st.integers(0, 10_000), st.sampled_from([0, 1, -1]))
def test_hessian_block_matches_gradient_differences(seed, block):
    spec, w, x, y = tiny_problem(seed, (3, 4, 3))
    hb = nn.hessian_block(spec, w, x, y, block_id=block)
    sl = spec.block_slice(block)
    eps = 1e-4
    ref = np.empty_like(hb.block)
    for j, idx in enumerate(range(sl.start, sl.stop)):
        e = np.zeros(spec.n_params)
        e[idx] = eps
        gp = nn.backward(spec, w + e, x, y)[sl]
        gm = nn.backward(spec, w - e, x, y)[sl]
        ref[:, j] = (gp - gm) / (2 * eps)
    assert np.abs(hb.block - ref).max() <= 1e-3


def test_hvp_is_symmetric(rng):
    spec, w, x, y = tiny_problem(3, (4, 6, 3), 10)
    V = rng.normal(size=(2, spec.n_params))
    Hu, Hv = nn.hvp(spec, w, x, y, V)
    assert abs(Hu @ V[1] - Hv @ V[0]) <= 1e-10 * max(1.0, abs(Hu @ V[1]))


def test_hessian_spectrum_conventions():
    spec, w, x, y = tiny_problem(8, (3, 4, 3), 12)
    hb = nn.hessian_block(spec, w, x, y)
    assert np.all(np.diff(hb.eigenvalues) >= 0)
    assert hb.rank_estimate == len(hb.eigenvalues) <= hb.block.shape[0]
    assert np.allclose(hb.block, hb.block.T)


def test_hessian_cap_raises():
    spec = nn.ModelSpec((30, 20, 10))
    with pytest.raises(CapacityError):
        nn.hessian_block(spec, np.zeros(spec.n_params), np.zeros((2, 30)), np.zeros(2, int), block_id=0, cap=100)


def test_asymmetric_block_rejected():
    with pytest.raises(NumericalError):
        nn.HessianBlock.from_matrix(np.array([[1.0, 2.0], [0.0, 1.0]]))


@given(sizes_strategy, st.integers(1, 4), st.integers(0, 1000))
def test_flop_meter_matches_brute_force_count(sizes, batch, seed):
    spec = nn.ModelSpec(sizes)
    rng = np.random.default_rng(seed)
    keep = rng.random(spec.n_hidden_units) < 0.6
    mask = keep / 0.6
    x, y = rng.normal(size=(batch, sizes[0])), rng.integers(0, sizes[-1], batch)
    meter = nn.FlopMeter()
    nn.forward(spec, np.zeros(spec.n_params), x, y, mask=mask, meter=meter)
    assert meter.forward_flops == brute_force_flops(sizes, batch, keep)
    assert spec.flops_per_sample(keep) * batch == meter.forward_flops


def test_backward_costs_twice_forward():
    spec, w, x, y = tiny_problem(0)
    meter = nn.FlopMeter()
    nn.value_and_grad(spec, w, x, y, meter=meter)
    assert meter.backward_flops == 2 * meter.forward_flops
    assert meter.cumulative_mflops == meter.total_flops / 1e6


def test_kept_params_matches_coordinate_mask(rng):
    spec = nn.ModelSpec((5, 6, 4, 3))
    keep = rng.random(spec.n_hidden_units) < 0.5
    assert spec.kept_params(keep) == spec.coordinate_keep(keep).sum()
    assert spec.kept_params() == spec.n_params


def test_dead_unit_has_no_outgoing_gradient_either(rng):
    spec, w, x, y = tiny_problem(5, (3, 4, 2))
    mask = np.array([0.0, 2.0, 2.0, 2.0])
    g = nn.backward(spec, w, x, y, mask=mask)
    W2 = spec.unpack(g)[1][0]
    assert np.all(W2[:, 0] == 0.0)
    assert np.all(g[~spec.coordinate_keep(mask > 0)] == 0.0)


def test_training_is_deterministic():
    spec, w, x, y = tiny_problem(2, (3, 4, 2), 30)
    a = nn.local_sgd(spec, w, x, y, epochs=2, batch_size=7, lr=0.1, rng=np.random.default_rng(5))
    b = nn.local_sgd(spec, w, x, y, epochs=2, batch_size=7, lr=0.1, rng=np.random.default_rng(5))
    assert np.array_equal(a, b)


def test_shape_errors():
    spec = nn.ModelSpec((3, 2))
    with pytest.raises(StructuralError):
        nn.forward(spec, np.zeros(spec.n_params + 1), np.zeros((1, 3)), np.zeros(1, int))
    with pytest.raises(StructuralError):
        nn.forward(spec, np.zeros(spec.n_params), np.zeros((1, 4)), np.zeros(1, int))
    with pytest.raises(StructuralError):
        nn.forward(nn.ModelSpec((3, 4, 2)), np.zeros(26), np.zeros((1, 3)), np.zeros(1, int), mask=np.ones(3))


def test_non_finite_gradient_rejected_by_sgd():
    with pytest.raises(NumericalError):
        nn.sgd_step(np.zeros(2), np.array([np.inf, 0.0]), 0.1)


def test_index_map_locates_each_unit():
    spec = nn.ModelSpec((2, 3, 2))
    w = np.arange(spec.n_params, dtype=float)
    layers = spec.unpack(w)
    for i, units in enumerate(spec.index_map()):
        for j, (ws, bi) in enumerate(units):
            assert np.array_equal(w[ws], layers[i][0][j])
            assert w[bi] == layers[i][1][j]
