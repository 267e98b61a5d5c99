import math

import numpy as np
import pytest
from scipy.integrate import quad

from sparselab.flows import (
    FlowConfig,
    NeuronParams,
    TeacherDataset,
    gf_invariant,
    gf_step,
    ham_gf_step,
    ham_invariant,
    ham_potential,
    make_multi_student,
    make_teacher_student,
    network_loss_grads,
    neuron_loss_grads,
    run_flow_experiment,
    sign_flip_feasible,
)
from sparselab.numerics import Rng

from conftest import central_diff, rel_err


def _random_point(r, dim=10, sparse=True):
    mask = np.ones(dim)
    if sparse:
        mask[r.choice(dim, dim // 2)] = 0
    return NeuronParams(float(r.gaussian(1, 1)[0, 0]), r.normal(dim), float(1 + 0.5 * r.gaussian(1, 1)[0, 0]),
                        float(0.5 * r.gaussian(1, 1)[0, 0]), mask)


def test_teacher_has_zero_loss_and_gradients():
    teacher, student, data = make_teacher_student(rng=Rng(3))
    loss, g_a, g_w, g_gamma, g_beta = neuron_loss_grads(teacher, data)
    assert loss == 0.0 and g_a == 0.0 and g_gamma == 0.0 and g_beta == 0.0 and not g_w.any()
    aligned = teacher.copy()
    assert gf_step(aligned, data, 0.1).a == teacher.a


def test_student_setup():
    teacher, student, data = make_teacher_student(rng=Rng(3))
    assert np.array_equal(student.mask, teacher.mask) and teacher.mask.sum() == 2
    assert student.a == -1.0 and student.gamma == 1.0 and student.beta == 0.0
    assert not student.w[student.mask == 0].any()
    assert data.Z.shape == (200, 10)
    _, s2, d2 = make_teacher_student(rng=Rng(3))
    assert np.array_equal(d2.Z, data.Z) and np.array_equal(s2.w, student.w)
    with pytest.raises(ValueError):
        make_teacher_student(redundant=10)


@pytest.mark.parametrize("seed", range(20))
def test_gradients_finite_differences(seed):
    r = Rng(seed)
    _, _, data = make_teacher_student(m=30, rng=Rng(seed + 100))
    p = _random_point(r)
    for scale in (False, True):
        _, g_a, g_w, g_gamma, g_beta = neuron_loss_grads(p, data, scale_w=scale)

        box = np.array([p.a, p.gamma, p.beta])

        def scalar_loss():
            q = p.copy()
            q.a, q.gamma, q.beta = box
            return neuron_loss_grads(q, data)[0]

        num = central_diff(scalar_loss, box)
        assert rel_err(np.array([g_a, g_gamma, g_beta]), num) < 1e-6
        w = p.w

        def wloss():
            q = p.copy()
            q.w = w.copy()
            return neuron_loss_grads(q, data)[0]

        num_w = central_diff(wloss, w, where=p.mask)
        if scale:
            num_w = num_w * math.sqrt(1 - p.sparsity)
        assert rel_err(g_w, num_w * p.mask) < 1e-6


@pytest.mark.parametrize("seed", range(20))
@pytest.mark.parametrize("scale", [False, True])
def test_balance_identity(seed, scale):
    r = Rng(seed)
    _, _, data = make_teacher_student(rng=Rng(seed + 7))
    p = _random_point(r, sparse=seed % 2 == 0)
    _, g_a, _, g_gamma, g_beta = neuron_loss_grads(p, data, scale_w=scale)
    assert abs(p.a * g_a - p.gamma * g_gamma - p.beta * g_beta) < 1e-10


def test_balance_identity_multi_neuron():
    _, neurons, data = make_multi_student(rng=Rng(1))
    _, grads = network_loss_grads(neurons, data, scale_w=True)
    for p, (g_a, _, g_gamma, g_beta) in zip(neurons, grads):
        assert abs(p.a * g_a - p.gamma * g_gamma - p.beta * g_beta) < 1e-10


def test_zero_variance_without_eps():
    data = TeacherDataset(np.ones((4, 2)), np.zeros(4))
    with pytest.raises(ZeroDivisionError):
        neuron_loss_grads(NeuronParams(1.0, [1.0, 1.0]), data, eps=0.0)
    with pytest.raises(ValueError):
        neuron_loss_grads(NeuronParams(1.0, [1.0, 1.0]), TeacherDataset(np.ones((1, 2)), np.zeros(1)))


def test_step_examples():
    _, student, data = make_teacher_student(rng=Rng(2))
    same = gf_step(student, data, 0.0)
    assert same.a == student.a and np.array_equal(same.w, student.w)
    g = gf_step(student, data, 0.05)
    h = ham_gf_step(student, data, 0.05, 0.0)
    assert g.a == h.a and np.array_equal(g.w, h.w)
    h4 = ham_gf_step(student, data, 0.05, 4.0)
    assert h4.gamma == g.gamma and h4.beta == g.beta
    assert h4.a != g.a
    assert not h4.w[student.mask == 0].any()


def _drift(flow, eta, horizon=2.0):
    _, p, data = make_teacher_student(rng=Rng(1))
    steps = int(round(horizon / eta))
    inv = (lambda q: gf_invariant(q.a, q.gamma, q.beta)) if flow == "gf" else \
        (lambda q: ham_invariant(q.a, q.gamma, q.beta, 4.0))
    start = inv(p)
    per_step = []
    for _ in range(steps):
        before = inv(p)
        p = gf_step(p, data, eta) if flow == "gf" else ham_gf_step(p, data, eta, 4.0)
        per_step.append(abs(inv(p) - before))
    return abs(inv(p) - start), float(np.mean(per_step))


@pytest.mark.parametrize("flow", ["gf", "ham"])
def test_invariant_drift_step_halving(flow):
    total_a, step_a = _drift(flow, 0.01)
    total_b, step_b = _drift(flow, 0.005)
    # first-order integrator: total drift over fixed time halves, per-step drift quarters
    assert 0.4 <= total_b / total_a <= 0.6
    assert 0.2 <= step_b / step_a <= 0.3


def test_invariant_values():
    assert gf_invariant(1, 1, 0) == 0
    assert gf_invariant(2, 1, 1) == 2
    assert ham_invariant(0, 0, 0, 4) == 0
    oracle = quad(lambda p: p / (1 + 4 * p), 0, 1, epsabs=1e-14)[0]
    assert abs(ham_potential(1.0, 4.0) - oracle) < 1e-12
    # frozen from the quadrature oracle: (4 - ln 5)/16 = 0.1494101...
    assert ham_potential(1.0, 4.0) == pytest.approx(0.1494101, abs=1e-7)
    assert ham_invariant(1, 1, 0, 4) == pytest.approx(-0.3505899, abs=1e-7)
    assert ham_potential(-1.0, 4.0) == ham_potential(1.0, 4.0)
    with pytest.raises(ValueError):
        ham_potential(1.0, 0.0)


@pytest.mark.parametrize("a", [1e-6, 0.3, 2.0, 17.0])
def test_potential_matches_quadrature(a):
    oracle = quad(lambda p: p / (1 + 4 * p), 0, a, epsabs=1e-15, epsrel=1e-13)[0]
    assert ham_potential(a, 4.0) == pytest.approx(oracle, rel=1e-9, abs=1e-18)


def test_sign_flip_examples():
    assert sign_flip_feasible(1, 1, 0, 4)
    assert not sign_flip_feasible(1, 0, 0, 4)
    assert not sign_flip_feasible(-3, 0, 0, 0.5)


def test_sign_flip_monotonicity():
    gs = np.linspace(0, 2, 41)
    flags = [sign_flip_feasible(1.0, g, 0.0, 4.0) for g in gs]
    assert flags == sorted(flags)  # once true, stays true as gamma grows
    as_ = np.linspace(0.01, 5, 41)
    flags = [sign_flip_feasible(a, 1.0, 0.0, 4.0) for a in as_]
    assert flags == sorted(flags, reverse=True)


def test_gf_balanced_state_cannot_reach_zero_a():
    # on the GF invariant set a^2 = gamma^2 + beta^2, a = 0 forces gamma = beta = 0
    assert gf_invariant(0.0, 0.0, 0.0) == 0.0
    assert gf_invariant(0.0, 0.1, 0.0) != 0.0


def test_flow_run_ham_flips_and_gf_does_not():
    ham = run_flow_experiment(FlowConfig("ham", eta=0.01, steps=10_000, seed=1, record_every=100))
    gf = run_flow_experiment(FlowConfig("gf", eta=0.01, steps=10_000, seed=1, record_every=100))
    assert np.sign(ham.final[0].a) == np.sign(ham.teacher.a) and ham.final_loss < 1e-3
    assert gf.sign_changes == [[]] and np.sign(gf.final[0].a) == -1


def test_ham_flip_robust_across_seeds():
    ok = 0
    for seed in range(10):
        res = run_flow_experiment(FlowConfig("ham", eta=0.01, steps=10_000, seed=seed, record_every=10_000))
        ok += np.sign(res.final[0].a) == 1 and res.final_loss < 1e-3
    assert ok >= 7


def test_flow_records_schema():
    res = run_flow_experiment(FlowConfig("ham", steps=20, record_every=5))
    rows = res.trajectory()
    assert [r[0] for r in rows] == [0, 5, 10, 15, 20]
    step, loss, a, gamma, beta, gfi, hami = rows[0]
    assert gfi == pytest.approx(0.0) and hami == pytest.approx(-0.3505899, abs=1e-7)


def test_flow_config_validation():
    with pytest.raises(ValueError):
        FlowConfig("sgd")
    with pytest.raises(ValueError):
        FlowConfig(neurons="three")


@pytest.mark.xfail(strict=True, reason="multi-neuron 'dense neuron turns off only with scaling' trend "
                                       "does not reproduce with this setup; see decisions ledger")
def test_multi_neuron_scaling_turns_dense_neuron_off():
    cfg = dict(flow="ham", eta=0.1, steps=1000, neurons="multi", seed=1, record_every=1000)
    plain = run_flow_experiment(FlowConfig(scaling=False, **cfg))
    scaled = run_flow_experiment(FlowConfig(scaling=True, **cfg))
    assert abs(scaled.final[0].a) < abs(plain.final[0].a)
