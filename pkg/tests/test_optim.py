import math

import numpy as np
import pytest

from sparselab.nn import build_mlp, mlp_forward_backward
from sparselab.numerics import Rng
from sparselab.optim import (
    LrSchedule,
    OptState,
    Optimizer,
    StalePreconditionerError,
    grad_renormalize,
    ham_step,
    lr_at,
    sgd_step,
    sparseopt_step,
)
from sparselab.sparsity import apply_preconditioner, build_preconditioner, random_mask, uniform_fanin_mask


def _one(x):
    return {"w": np.array([[float(x)]])}


def test_sgd_single_step():
    p = _one(1.0)
    sgd_step(p, _one(0.5), OptState(), 0.1)
    assert p["w"][0, 0] == pytest.approx(0.95, abs=1e-15)


def test_sgd_zero_grad():
    p = _one(1.3)
    sgd_step(p, _one(0.0), OptState(), 0.1)
    assert p["w"][0, 0] == 1.3


def test_sgd_momentum_unroll():
    w, g1, g2, eta, mu, wd = 0.7, 0.3, -0.2, 0.05, 0.9, 0.01
    p, st = _one(w), OptState()
    sgd_step(p, _one(g1), st, eta, mu, wd)
    sgd_step(p, _one(g2), st, eta, mu, wd)
    v1 = g1 + wd * w
    w1 = w - eta * v1
    v2 = mu * v1 + g2 + wd * w1
    w2 = w1 - eta * v2
    assert abs(p["w"][0, 0] - w2) < 1e-12
    assert st.t == 2


def test_sgd_shape_mismatch():
    with pytest.raises(ValueError, match="shape"):
        sgd_step({"w": np.ones((2, 2))}, {"w": np.ones((2, 3))}, OptState(), 0.1)


def test_sparseopt_two_neuron_deltas():
    mask = np.array([[1, 1, 1, 1], [1, 0, 0, 0]], dtype=float)
    p = {"w": mask.copy()}
    sparseopt_step(p, {"w": mask.copy()}, {"w": build_preconditioner(mask)}, OptState(), 0.1, masks={"w": mask})
    delta = p["w"] - mask
    assert delta[0, 0] == pytest.approx(-0.126491, abs=1e-6)
    assert delta[1, 0] == pytest.approx(-0.063246, abs=1e-6)
    assert not p["w"][1, 1:].any()


def test_sparseopt_uniform_sparsity_equals_sgd(rng):
    mask = uniform_fanin_mask((5, 8), 2, rng)
    w, g = rng.gaussian(5, 8) * mask, rng.gaussian(5, 8) * mask
    a, b = {"w": w.copy()}, {"w": w.copy()}
    sgd_step(a, {"w": g}, OptState(), 0.1, masks={"w": mask})
    sparseopt_step(b, {"w": g}, {"w": build_preconditioner(mask)}, OptState(), 0.1, masks={"w": mask})
    assert np.allclose(a["w"], b["w"], rtol=1e-14, atol=1e-16)


def test_sparseopt_stale_preconditioner(rng):
    mask = np.ones((2, 3))
    p = build_preconditioner(mask)
    new = mask.copy()
    new[0, 0] = 0
    with pytest.raises(StalePreconditionerError):
        sparseopt_step({"w": np.ones((2, 3))}, {"w": np.ones((2, 3))}, {"w": p}, OptState(), 0.1, masks={"w": new})


def _dense_model(seed):
    r = Rng(seed)
    model = build_mlp([6, 8, 8, 3], r, "batchnorm")
    X, y = r.gaussian(16, 6), r.integers(3, 16)
    return model, X, y


def test_dense_sparseopt_bit_identical_to_sgd_1000_steps():
    runs = []
    for kind in ("sgd", "sparseopt"):
        model, X, y = _dense_model(4)
        opt = Optimizer(kind, momentum=0.9, weight_decay=5e-4)
        masks = {k: np.ones_like(v) for k, v in model.params().items() if k.endswith("weight")}
        opt.rebuild(masks)
        for _ in range(1000):
            _, grads = mlp_forward_backward(model, (X, y))
            opt.step(model.params(), grads, 0.05, masks)
        runs.append({k: v.copy() for k, v in model.params().items()})
    for k in runs[0]:
        assert np.array_equal(runs[0][k], runs[1][k]), k


@pytest.mark.parametrize("kind", Optimizer.KINDS)
def test_masked_entries_stay_zero(kind):
    r = Rng(11)
    masks = {0: random_mask((10, 6), 0.3, r), 1: random_mask((10, 10), 0.3, r)}
    model = build_mlp([6, 10, 10, 3], r, "batchnorm", masks)
    X, y = r.gaussian(16, 6), r.integers(3, 16)
    km = model.masks()
    classes = {k: ("weight" if k.endswith("weight") else "normalization") for k in model.params()}
    opt = Optimizer(kind, momentum=0.9, weight_decay=1e-3, param_class=classes)
    opt.rebuild(km)
    for _ in range(50):
        _, grads = mlp_forward_backward(model, (X, y))
        opt.step(model.params(), grads, 0.1, km)
    for k, m in km.items():
        assert not model.params()[k][m == 0].any()
        assert not opt.state.velocity[k][m == 0].any()


def test_mask_change_resets_velocity(rng):
    mask = np.ones((2, 2))
    opt = Optimizer("sparseopt", momentum=0.9)
    opt.rebuild({"w": mask})
    p = {"w": np.ones((2, 2))}
    opt.step(p, {"w": np.ones((2, 2))}, 0.1, {"w": mask})
    new = mask.copy()
    new[0, 1] = 0
    opt.mask_changed("w", mask, new)
    assert opt.state.velocity["w"][0, 1] == 0 and opt.state.velocity["w"][1, 1] != 0
    assert opt.preconditioners["w"].matches(new)


def test_ham_examples():
    p = _one(1.0)
    ham_step(p, _one(1.0), 0.1, 4.0, {"w": "weight"})
    assert p["w"][0, 0] == pytest.approx(0.5, abs=1e-15)
    p = {"gamma": np.array([1.0])}
    ham_step(p, {"gamma": np.array([1.0])}, 0.1, 4.0, {"gamma": "normalization"})
    assert p["gamma"][0] == pytest.approx(0.9, abs=1e-15)


def test_ham_alpha_zero_is_gd(rng):
    w, g = rng.gaussian(3, 4), rng.gaussian(3, 4)
    p = {"w": w.copy()}
    ham_step(p, {"w": g}, 0.1, 0.0, {"w": "weight"})
    assert np.array_equal(p["w"], w - 0.1 * g)
    with pytest.raises(ValueError):
        ham_step(p, {"w": g}, 0.1, -1.0, {})


def test_sparseopt_ham_composition():
    mask = np.array([[1, 1, 1, 1], [1, 0, 0, 0]], dtype=float)
    w = mask * 0.5
    opt = Optimizer("sparseopt+ham", momentum=0.0, alpha=4.0)
    opt.rebuild({"w": mask})
    p = {"w": w.copy()}
    opt.step(p, {"w": mask.copy()}, 0.1, {"w": mask})
    expected = w - 0.1 * (1 + 4 * 0.5) * apply_preconditioner(build_preconditioner(mask), mask)
    assert np.allclose(p["w"], expected, rtol=1e-15)


def test_renormalize_examples():
    g = {"a": np.array([2.0, 0.0])}
    out, norm = grad_renormalize(g)
    assert norm == 2.0 and np.array_equal(out["a"], [1.0, 0.0])
    g = {"a": np.array([0.3]), "b": np.array([[0.4]])}
    out, norm = grad_renormalize(g)
    assert norm == pytest.approx(0.5) and out["a"][0] == 0.3
    again, _ = grad_renormalize(out)
    assert again["a"][0] == 0.3 and again["b"][0, 0] == 0.4


@pytest.mark.parametrize("seed", range(10))
def test_renormalized_norm(seed):
    r = Rng(seed)
    g = {"a": r.gaussian(3, 4, 0, 0.1 + seed), "b": r.gaussian(1, 5, 0, 0.05)}
    out, norm = grad_renormalize(g)
    new = math.sqrt(sum(float(np.sum(v * v)) for v in out.values()))
    assert abs(new - min(norm, 1.0)) < 1e-12


def test_lr_imagenet_examples():
    s = LrSchedule.imagenet(90)
    assert lr_at(s, 0.0, 256) == 1e-5
    assert lr_at(s, 5.0, 1024) == 0.4
    assert lr_at(s, 90.0, 256) == s.eta_end


def test_lr_cifar_examples():
    s = LrSchedule.cifar(100)
    assert lr_at(s, 0.0, 64) == 0.0
    assert lr_at(s, 5.0, 64) == 0.1
    assert lr_at(s, 100.0, 64) == 1e-6
    assert lr_at(s, 52.5, 64) == pytest.approx(1e-6 + 0.5 * (0.1 - 1e-6))


@pytest.mark.parametrize("schedule", [LrSchedule.imagenet(), LrSchedule.cifar()])
def test_lr_continuous_at_warmup(schedule):
    tw = schedule.warmup_epochs
    peak = schedule.peak(512)
    left = lr_at(schedule, np.nextafter(tw, 0), 512)
    right = lr_at(schedule, np.nextafter(tw, np.inf), 512)
    assert abs(left - peak) < 1e-12 and abs(right - peak) < 1e-12


def test_lr_monotone_pieces():
    s = LrSchedule.imagenet()
    warm = [lr_at(s, t) for t in np.linspace(0, 5, 50)]
    decay = [lr_at(s, t) for t in np.linspace(5, 90, 200)]
    assert np.all(np.diff(warm) > 0) and np.all(np.diff(decay) <= 0)


def test_lr_schedule_validation():
    with pytest.raises(ValueError):
        LrSchedule("cifar", warmup_epochs=10, total_epochs=10)
    with pytest.raises(ValueError):
        LrSchedule("other")
