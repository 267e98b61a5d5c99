import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import brentq

from sparselab.numerics import Rng
from sparselab.nn import SparseLinear, linear_forward
from sparselab.sparsity import (
    FullyMaskedNeuronError,
    apply_preconditioner,
    build_preconditioner,
    erk_densities,
    neuron_sparsities,
    random_mask,
    repair_empty_rows,
    sparse_init_scale,
    uniform_fanin_mask,
)


def test_neuron_sparsity_examples():
    s = neuron_sparsities([[1, 0, 1, 0], [1, 1, 1, 1], [0, 0, 1, 0]])
    assert np.array_equal(s, [0.5, 0.0, 0.75])


def test_dense_preconditioner_is_identity(rng):
    p = build_preconditioner(np.ones((5, 7)))
    assert p.is_identity() and p.global_scale == 1.0
    g = rng.gaussian(5, 7)
    assert np.array_equal(apply_preconditioner(p, g), g)


def test_two_neuron_preconditioner():
    mask = np.array([[1, 1, 1, 1], [1, 0, 0, 0]], dtype=float)
    p = build_preconditioner(mask)
    assert np.allclose(p.factors, [1.0, 0.5])
    assert p.s_avg == 0.375
    assert p.global_scale == pytest.approx(1.264911, abs=1e-6)
    out = apply_preconditioner(p, np.ones((2, 4)) * mask)
    assert out[0, 0] == pytest.approx(1.264911, abs=1e-6)
    assert out[1, 0] == pytest.approx(0.632456, abs=1e-6)
    assert not out[1, 1:].any()


def test_uniform_sparsity_cancels(rng):
    mask = uniform_fanin_mask((6, 8), 4, rng)
    p = build_preconditioner(mask)
    g = rng.gaussian(6, 8) * mask
    assert np.allclose(apply_preconditioner(p, g), g, rtol=1e-15, atol=0)


def test_fully_masked_neuron_named():
    with pytest.raises(FullyMaskedNeuronError) as err:
        build_preconditioner([[1, 0], [0, 0], [0, 1]])
    assert err.value.neurons == [1]


def test_apply_shape_mismatch():
    p = build_preconditioner(np.ones((2, 3)))
    with pytest.raises(ValueError, match="shape"):
        apply_preconditioner(p, np.ones((3, 2)))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from([-2.0, 0.5, 3.0]))
def test_preconditioner_linearity(seed, alpha):
    r = Rng(seed)
    mask = random_mask((5, 6), 0.5, r)
    p = build_preconditioner(mask)
    g1, g2 = r.gaussian(5, 6), r.gaussian(5, 6)
    lhs = apply_preconditioner(p, alpha * g1 + g2)
    rhs = alpha * apply_preconditioner(p, g1) + apply_preconditioner(p, g2)
    assert np.allclose(lhs, rhs, rtol=1e-14, atol=1e-15)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_preconditioner_keeps_row_argmax(seed):
    r = Rng(seed)
    mask = random_mask((6, 9), 0.4, r)
    g = r.gaussian(6, 9) * mask
    out = apply_preconditioner(build_preconditioner(mask), g)
    assert np.array_equal(np.argmax(np.abs(out), axis=1), np.argmax(np.abs(g), axis=1))


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_factor_range(seed):
    r = Rng(seed)
    mask = random_mask((8, 10), 0.3 + 0.7 * r.uniform(1)[0], r)
    p = build_preconditioner(mask)
    s = neuron_sparsities(mask)
    assert np.all((p.factors > 0) & (p.factors <= 1))
    assert np.array_equal(p.factors == 1.0, s == 0.0)


# ---- ERK

def test_erk_dense_target():
    assert np.array_equal(erk_densities([(784, 64), (64, 10)], 0.0), [1.0, 1.0])


def test_erk_identical_layers():
    assert np.allclose(erk_densities([(50, 40), (50, 40)], 0.8), [0.2, 0.2])


def test_erk_matches_scalar_solve():
    dims = [(784, 64), (64, 10)]
    sizes = np.array([i * o for i, o in dims], float)
    raw = np.array([(i + o) / (i * o) for i, o in dims])

    def active(c):
        return np.minimum(c * raw, 1.0) @ sizes - 0.1 * sizes.sum()

    c = brentq(active, 1e-9, 1e3, xtol=1e-15)
    dens = erk_densities(dims, 0.9)
    assert np.allclose(dens, np.minimum(c * raw, 1.0), rtol=1e-9)
    assert abs(dens @ sizes / sizes.sum() - 0.1) < 1e-9


def test_erk_uniform_and_forced_dense():
    dims = [(32, 64), (64, 64), (64, 8)]
    sizes = np.array([i * o for i, o in dims], float)
    assert np.allclose(erk_densities(dims, 0.7, "uniform"), 0.3)
    dens = erk_densities(dims, 0.7, dense_layers=[2])
    assert dens[2] == 1.0
    assert dens @ sizes / sizes.sum() == pytest.approx(0.3, abs=1e-12)


def test_erk_all_forced_dense():
    assert np.array_equal(erk_densities([(4, 4)], 0.0, dense_layers=[0]), [1.0])


def test_erk_errors():
    with pytest.raises(ValueError):
        erk_densities([(10, 10)], 1.0)
    with pytest.raises(ValueError, match="infeasible"):
        erk_densities([(100, 100), (10, 10)], 0.9, dense_layers=[0])
    with pytest.raises(ValueError):
        erk_densities([(10, 10)], 0.5, "bogus")


# ---- masks and init

def test_random_mask_counts(rng):
    assert np.array_equal(random_mask((3, 5), 1.0, rng), np.ones((3, 5)))
    assert random_mask((4, 4), 0.5, rng).sum() == 8


def test_random_mask_deterministic():
    assert np.array_equal(random_mask((20, 30), 0.1, Rng(5)), random_mask((20, 30), 0.1, Rng(5)))


def test_random_mask_repairs_empty_rows(caplog):
    caplog.set_level("INFO")
    mask = random_mask((50, 50), 0.001, Rng(2))
    assert np.all(mask.sum(axis=1) >= 1)
    assert "empty row" in caplog.text


def test_repair_uses_scores():
    mask = np.zeros((2, 3))
    mask[0, 0] = 1
    grown = repair_empty_rows(mask, Rng(0), scores=np.array([[0, 0, 0], [0.1, -5.0, 2.0]]))
    assert grown == [(1, 1)]


def test_uniform_fanin_rows(rng):
    assert np.all(uniform_fanin_mask((10, 12), 3, rng).sum(axis=1) == 3)


def test_init_scales(rng):
    dense = np.ones((4, 8))
    assert np.array_equal(sparse_init_scale(dense, "dense-kaiming"), sparse_init_scale(dense, "sparse-aware"))
    half = uniform_fanin_mask((4, 8), 4, rng)
    assert np.allclose(sparse_init_scale(half, "sparse-aware"), np.sqrt(2) * sparse_init_scale(half))


def test_sparse_aware_preactivation_std_flat():
    r = Rng(9)
    in_f = 256
    mask = np.zeros((4, in_f))
    for i, k in enumerate([16, 32, 128, 256]):
        mask[i, r.choice(in_f, k)] = 1
    std = sparse_init_scale(mask, "sparse-aware")
    acc = []
    for _ in range(200):
        W = r.gaussian(4, in_f) * std[:, None]
        acc.append(linear_forward(SparseLinear(W, mask), r.gaussian(64, in_f)))
    per_neuron = np.concatenate(acc).std(axis=0)
    assert np.all(np.abs(per_neuron / per_neuron.mean() - 1) < 0.10)
