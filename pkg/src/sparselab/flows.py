"""Student-teacher ReLU neurons with full-dataset batch norm under GF and HAM.

A network is a list of neurons ``f(z) = sum_k a_k relu(gamma_k xhat_k + beta_k)``
where ``xhat_k`` is the batch-normalized pre-activation ``w_k . z`` over the
whole dataset. Flows are integrated with explicit Euler steps.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from .numerics import Rng

log = logging.getLogger(__name__)

__all__ = [
    "NeuronParams",
    "TeacherDataset",
    "FlowConfig",
    "make_teacher_student",
    "make_multi_student",
    "network_output",
    "network_loss_grads",
    "neuron_loss_grads",
    "gf_step",
    "ham_gf_step",
    "gf_invariant",
    "ham_invariant",
    "ham_potential",
    "sign_flip_feasible",
    "run_flow_experiment",
    "TRAJECTORY_COLUMNS",
]

TRAJECTORY_COLUMNS = ["step", "loss", "a", "gamma", "beta", "gf_invariant", "ham_invariant"]


@dataclass
class NeuronParams:
    a: float
    w: np.ndarray
    gamma: float = 1.0
    beta: float = 0.0
    mask: np.ndarray | None = None

    def __post_init__(self):
        self.w = np.array(self.w, dtype=np.float64)
        if self.mask is None:
            self.mask = np.ones_like(self.w)
        self.mask = np.asarray(self.mask, dtype=np.float64)
        self.w = self.w * self.mask

    @property
    def sparsity(self) -> float:
        return 1.0 - self.mask.sum() / self.mask.size

    def copy(self) -> "NeuronParams":
        return replace(self, w=self.w.copy(), mask=self.mask.copy())


@dataclass
class TeacherDataset:
    Z: np.ndarray  # m x dim
    y: np.ndarray  # m


def _as_list(p):
    return [p] if isinstance(p, NeuronParams) else list(p)


def _neuron_forward(p: NeuronParams, Z, eps):
    x = Z @ p.w
    mu = x.mean()
    std = math.sqrt(((x - mu) ** 2).mean() + eps)
    if std == 0.0:
        raise ZeroDivisionError("zero pre-activation variance with eps=0")
    xhat = (x - mu) / std
    y = p.gamma * xhat + p.beta
    return xhat, std, y


def network_output(neurons, Z, eps: float = 1e-8) -> np.ndarray:
    out = np.zeros(Z.shape[0])
    for p in _as_list(neurons):
        _, _, y = _neuron_forward(p, Z, eps)
        out += p.a * np.maximum(y, 0.0)
    return out


def network_loss_grads(neurons, data: TeacherDataset, eps: float = 1e-8, scale_w: bool = False):
    """Loss ``(1/2m) sum (yhat - f)^2`` and per-neuron gradients.

    Returns ``(loss, [(g_a, g_w, g_gamma, g_beta), ...])``. ``g_w`` is zero on
    masked inputs; with ``scale_w`` it is also multiplied by ``sqrt(1 - s)``
    where ``s`` is the neuron's input sparsity.
    """
    neurons = _as_list(neurons)
    Z = data.Z
    m = Z.shape[0]
    if m < 2:
        raise ValueError("need at least 2 samples")
    cache = [_neuron_forward(p, Z, eps) for p in neurons]
    f = sum(p.a * np.maximum(y, 0.0) for p, (_, _, y) in zip(neurons, cache))
    r = (f - data.y) / m
    loss = float(((data.y - f) ** 2).sum() / (2 * m))
    grads = []
    for p, (xhat, std, y) in zip(neurons, cache):
        if np.any(y == 0.0):
            log.debug("pre-activation exactly at the ReLU kink; using derivative 0")
        g_a = float(r @ np.maximum(y, 0.0))
        dy = r * p.a * (y > 0)
        g_gamma = float(dy @ xhat)
        g_beta = float(dy.sum())
        dxhat = p.gamma * dy
        dx = (dxhat - dxhat.mean() - xhat * (dxhat * xhat).mean()) / std
        g_w = (Z.T @ dx) * p.mask
        if scale_w:
            g_w = g_w * math.sqrt(1.0 - p.sparsity)
        grads.append((g_a, g_w, g_gamma, g_beta))
    return loss, grads


def neuron_loss_grads(p: NeuronParams, data: TeacherDataset, eps: float = 1e-8, scale_w: bool = False):
    """Single-neuron form: ``(loss, g_a, g_w, g_gamma, g_beta)``."""
    loss, [(g_a, g_w, g_gamma, g_beta)] = network_loss_grads([p], data, eps, scale_w)
    return loss, g_a, g_w, g_gamma, g_beta


def _step(neurons, data, eta, eps, alpha, scale_w):
    single = isinstance(neurons, NeuronParams)
    neurons = _as_list(neurons)
    _, grads = network_loss_grads(neurons, data, eps, scale_w)
    out = []
    for p, (g_a, g_w, g_gamma, g_beta) in zip(neurons, grads):
        # gamma and beta are never metriced
        da = (1.0 + alpha * abs(p.a)) * g_a
        dw = (1.0 + alpha * np.abs(p.w)) * g_w
        q = p.copy()
        q.a = p.a - eta * da
        q.w = (p.w - eta * dw) * p.mask
        q.gamma = p.gamma - eta * g_gamma
        q.beta = p.beta - eta * g_beta
        out.append(q)
    return out[0] if single else out


def gf_step(p, data: TeacherDataset, eta: float, eps: float = 1e-8, scale_w: bool = False):
    """One Euler step of plain gradient flow."""
    return _step(p, data, eta, eps, 0.0, scale_w)


def ham_gf_step(p, data: TeacherDataset, eta: float, alpha: float, eps: float = 1e-8,
                scale_w: bool = False):
    """One Euler step of the HAM flow: ``a`` and ``w`` see ``(1 + alpha|.|)``."""
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    return _step(p, data, eta, eps, alpha, scale_w)


def gf_invariant(a, gamma, beta) -> float:
    return a * a - gamma * gamma - beta * beta


def ham_potential(a, alpha) -> float:
    """``int_0^|a| p/(1+alpha p) dp = (alpha|a| - ln(1+alpha|a|))/alpha^2``."""
    if alpha == 0:
        raise ValueError("alpha must be non-zero; use gf_invariant for plain gradient flow")
    x = alpha * abs(a)
    # log1p keeps precision for small alpha|a|
    return (x - math.log1p(x)) / (alpha * alpha)


def ham_invariant(a, gamma, beta, alpha) -> float:
    return ham_potential(a, alpha) - 0.5 * (gamma * gamma + beta * beta)


def sign_flip_feasible(a0, gamma0, beta0, alpha) -> bool:
    """Whether the HAM balance set admits ``a = 0`` with non-zero ``(gamma, beta)``."""
    return gamma0 * gamma0 + beta0 * beta0 > 2.0 * ham_potential(a0, alpha)


def make_teacher_student(dim: int = 10, m: int = 200, redundant: int = 8, opposite_sign: bool = True,
                         rng: Rng | None = None, eps: float = 1e-8):
    """Teacher neuron on the first ``dim - redundant`` inputs, and a masked student.

    Inputs are i.i.d. N(0, 1). The teacher has ``a = 1, gamma = 1, beta = 0``;
    the student starts balanced at ``a = -1`` (or ``+1``), ``gamma = 1, beta = 0``
    with random weights on the same informative inputs.
    """
    if not 0 <= redundant < dim:
        raise ValueError(f"redundant must be in [0, {dim}), got {redundant}")
    rng = rng if rng is not None else Rng(0)
    informative = dim - redundant
    mask = np.zeros(dim)
    mask[:informative] = 1.0
    w_teacher = np.zeros(dim)
    w_teacher[:informative] = rng.normal(informative)
    teacher = NeuronParams(1.0, w_teacher, 1.0, 0.0, mask.copy())
    Z = rng.gaussian(m, dim)
    data = TeacherDataset(Z, network_output([teacher], Z, eps))
    student = NeuronParams(-1.0 if opposite_sign else 1.0, rng.normal(dim), 1.0, 0.0, mask.copy())
    return teacher, student, data


def make_multi_student(dim: int = 10, m: int = 200, redundant: int = 8, opposite_sign: bool = True,
                       rng: Rng | None = None, eps: float = 1e-8):
    """Teacher as above plus a two-neuron student.

    Neuron 0 ("dense") is active only on the redundant inputs; neuron 1
    ("sparse") is masked to exactly the teacher's informative inputs.
    """
    rng = rng if rng is not None else Rng(0)
    teacher, sparse, data = make_teacher_student(dim, m, redundant, opposite_sign, rng, eps)
    dense_mask = 1.0 - teacher.mask
    a0 = -1.0 if opposite_sign else 1.0
    dense = NeuronParams(a0, rng.normal(dim), 1.0, 0.0, dense_mask)
    return teacher, [dense, sparse], data


@dataclass
class FlowConfig:
    flow: str = "ham"  # gf | ham
    eta: float = 0.01
    alpha: float = 4.0
    steps: int = 10_000
    scaling: bool = False
    neurons: str = "one"  # one | multi
    seed: int = 0
    dim: int = 10
    m: int = 200
    redundant: int = 8
    opposite_sign: bool = True
    eps: float = 1e-8
    record_every: int = 1

    def __post_init__(self):
        if self.flow not in ("gf", "ham"):
            raise ValueError(f"unknown flow {self.flow!r}")
        if self.neurons not in ("one", "multi"):
            raise ValueError(f"unknown neuron setup {self.neurons!r}")
        if self.eta < 0 or self.alpha < 0 or self.steps < 0 or self.record_every < 1:
            raise ValueError("eta, alpha, steps must be >= 0 and record_every >= 1")


@dataclass
class FlowResult:
    config: FlowConfig
    teacher: NeuronParams
    final: list
    records: list = field(default_factory=list)  # per recorded step, one tuple per neuron
    sign_changes: list = field(default_factory=list)  # per neuron: steps where sign(a) changed

    def trajectory(self, neuron: int = 0):
        """Rows matching :data:`TRAJECTORY_COLUMNS` for one neuron."""
        return [(step, loss, *vals[neuron]) for step, loss, vals in self.records]

    @property
    def final_loss(self) -> float:
        return self.records[-1][1]


def _snapshot(neurons, alpha):
    alpha_inv = alpha if alpha > 0 else 4.0
    return [(p.a, p.gamma, p.beta, gf_invariant(p.a, p.gamma, p.beta),
             ham_invariant(p.a, p.gamma, p.beta, alpha_inv)) for p in neurons]


def run_flow_experiment(config: FlowConfig) -> FlowResult:
    """Integrate GF or HAM from the standard initialization and record the trajectory.

    The HAM invariant column uses ``config.alpha`` (or 4 when ``alpha`` is 0).
    """
    rng = Rng(config.seed)
    if config.neurons == "one":
        teacher, student, data = make_teacher_student(config.dim, config.m, config.redundant,
                                                      config.opposite_sign, rng, config.eps)
        neurons = [student]
    else:
        teacher, neurons, data = make_multi_student(config.dim, config.m, config.redundant,
                                                    config.opposite_sign, rng, config.eps)
    alpha = config.alpha if config.flow == "ham" else 0.0
    result = FlowResult(config, teacher, neurons, sign_changes=[[] for _ in neurons])
    for step in range(config.steps + 1):
        loss, grads = network_loss_grads(neurons, data, config.eps, config.scaling)
        if not math.isfinite(loss):
            raise FloatingPointError(f"non-finite loss at step {step}")
        if step % config.record_every == 0 or step == config.steps:
            result.records.append((step, loss, _snapshot(neurons, config.alpha)))
        if step == config.steps:
            break
        new = []
        for p, (g_a, g_w, g_gamma, g_beta) in zip(neurons, grads):
            q = p.copy()
            q.a = p.a - config.eta * (1.0 + alpha * abs(p.a)) * g_a
            q.w = (p.w - config.eta * (1.0 + alpha * np.abs(p.w)) * g_w) * p.mask
            q.gamma = p.gamma - config.eta * g_gamma
            q.beta = p.beta - config.eta * g_beta
            new.append(q)
        for k, (p, q) in enumerate(zip(neurons, new)):
            if np.sign(q.a) != np.sign(p.a):
                result.sign_changes[k].append(step + 1)
        neurons = new
    result.final = neurons
    return result
