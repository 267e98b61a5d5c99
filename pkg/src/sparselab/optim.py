"""Optimizer steps and learning-rate schedules.

Parameters, gradients and masks are dicts keyed by parameter name (see
:class:`sparselab.nn.MLP`). Steps update the parameter arrays in place, so
the arrays owned by the model layers see the new values directly.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .sparsity import Preconditioner, apply_preconditioner, build_preconditioner

__all__ = [
    "OptState",
    "LrSchedule",
    "StalePreconditionerError",
    "sgd_step",
    "sparseopt_step",
    "ham_metric",
    "ham_step",
    "grad_renormalize",
    "lr_at",
    "Optimizer",
]


class StalePreconditionerError(RuntimeError):
    pass


@dataclass
class OptState:
    velocity: dict = field(default_factory=dict)
    t: int = 0

    def buffer(self, key, like):
        v = self.velocity.get(key)
        if v is None:
            v = self.velocity[key] = np.zeros_like(like)
        return v

    def reset_entries(self, key, changed) -> None:
        """Zero the velocity on entries flagged by ``changed`` (e.g. after a mask update)."""
        v = self.velocity.get(key)
        if v is not None:
            v[np.asarray(changed, dtype=bool)] = 0.0


def _momentum_update(params, key, g, state, eta, momentum, masks):
    w = params[key]
    if g.shape != w.shape:
        raise ValueError(f"shape mismatch for {key}: param {w.shape}, grad {g.shape}")
    v = state.buffer(key, w)
    v *= momentum
    v += g
    w -= eta * v
    if masks is not None and key in masks:
        w *= masks[key]
        v *= masks[key]


def sgd_step(params, grads, state: OptState, eta, momentum=0.0, weight_decay=0.0, masks=None):
    """``v <- momentum*v + (g + wd*w)``; ``w <- w - eta*v``."""
    for key, g in grads.items():
        g = g + weight_decay * params[key] if weight_decay else g
        _momentum_update(params, key, g, state, eta, momentum, masks)
    state.t += 1
    return params


def sparseopt_step(params, grads, preconditioners, state: OptState, eta, momentum=0.0,
                   weight_decay=0.0, masks=None):
    """SGD recurrence on preconditioned gradients of the sparse weight matrices.

    Parameters without an entry in ``preconditioners`` take the plain SGD path.
    When ``masks`` is given, every preconditioner must have been built from the
    current mask of its layer.
    """
    for key, g in grads.items():
        g = g + weight_decay * params[key] if weight_decay else g
        p = preconditioners.get(key)
        if p is not None:
            if masks is not None and key in masks and not p.matches(masks[key]):
                raise StalePreconditionerError(f"preconditioner for {key} was built from an older mask")
            g = apply_preconditioner(p, g)
        _momentum_update(params, key, g, state, eta, momentum, masks)
    state.t += 1
    return params


def ham_metric(w, g, alpha):
    """Inverse-metric scaling ``(1 + alpha*|w|) * g`` applied elementwise."""
    return (1.0 + alpha * np.abs(w)) * g


def ham_step(params, grads, eta, alpha, param_class):
    """Plain descent with the hyperbolic metric on ``weight``-class parameters.

    ``param_class`` maps each key to ``"weight"`` or ``"normalization"``;
    normalization parameters take an unmodified gradient step.
    """
    if alpha < 0:
        raise ValueError("alpha must be >= 0")
    for key, g in grads.items():
        if param_class.get(key, "weight") == "weight":
            g = ham_metric(params[key], g, alpha)
        params[key] -= eta * g
    return params


def grad_renormalize(grads):
    """Scale all gradients by ``1/max(||g||_2, 1)`` using the global norm."""
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    scale = 1.0 / max(norm, 1.0)
    if scale == 1.0:
        return dict(grads), norm
    return {k: g * scale for k, g in grads.items()}, norm


@dataclass
class LrSchedule:
    """Linear warmup followed by cosine decay, in units of epochs.

    ``imagenet`` style warms up from ``eta_init`` to ``eta_base*B/batch_scale_ref``;
    ``cifar`` style warms up from 0 to ``eta_base`` and ignores the batch size.
    """

    variant: str = "cifar"
    eta_base: float = 0.1
    eta_init: float = 1e-5
    eta_end: float = 1e-6
    warmup_epochs: float = 5
    total_epochs: float = 100
    batch_scale_ref: int = 256

    def __post_init__(self):
        if self.variant not in ("imagenet", "cifar"):
            raise ValueError(f"unknown schedule variant {self.variant!r}")
        if not 0 <= self.warmup_epochs < self.total_epochs:
            raise ValueError("need 0 <= warmup_epochs < total_epochs")
        if min(self.eta_base, self.eta_init, self.eta_end) < 0:
            raise ValueError("learning rates must be non-negative")

    @classmethod
    def imagenet(cls, total_epochs=90, eta_base=0.1):
        return cls("imagenet", eta_base, 1e-5, 1e-5, 5, total_epochs)

    @classmethod
    def cifar(cls, total_epochs=100, eta_base=0.1):
        return cls("cifar", eta_base, 0.0, 1e-6, 5, total_epochs)

    def peak(self, batch_size: int) -> float:
        if self.variant == "imagenet":
            return self.eta_base * batch_size / self.batch_scale_ref
        return self.eta_base


def lr_at(schedule: LrSchedule, epoch_fraction: float, batch_size: int = 256) -> float:
    t = float(epoch_fraction)
    peak = schedule.peak(batch_size)
    start = schedule.eta_init if schedule.variant == "imagenet" else 0.0
    tw, tt = schedule.warmup_epochs, schedule.total_epochs
    if t < tw:
        return start + (peak - start) * t / tw
    # boundaries returned exactly rather than through the cosine
    if t == tw:
        return peak
    if t >= tt:
        return schedule.eta_end
    cos = math.cos(math.pi * (t - tw) / (tt - tw))
    return schedule.eta_end + 0.5 * (peak - schedule.eta_end) * (1.0 + cos)


class Optimizer:
    """Momentum SGD with optional sparsity preconditioning and HAM metric.

    ``kind`` is one of ``sgd``, ``sparseopt``, ``sgd+ham``, ``sparseopt+ham``.
    The per-step gradient pipeline is: add weight decay, precondition sparse
    weights, apply the HAM metric to weight parameters, then the momentum
    recurrence.
    """

    KINDS = ("sgd", "sparseopt", "sgd+ham", "sparseopt+ham")

    def __init__(self, kind="sgd", momentum=0.9, weight_decay=0.0, alpha=4.0, param_class=None):
        if kind not in self.KINDS:
            raise ValueError(f"unknown optimizer {kind!r}")
        self.kind = kind
        self.momentum = momentum
        self.weight_decay = weight_decay
        self.alpha = alpha
        self.param_class = param_class or {}
        self.state = OptState()
        self.preconditioners: dict[str, Preconditioner] = {}

    @property
    def preconditioned(self) -> bool:
        return self.kind.startswith("sparseopt")

    @property
    def uses_ham(self) -> bool:
        return self.kind.endswith("+ham")

    def rebuild(self, masks) -> None:
        if self.preconditioned:
            self.preconditioners = {k: build_preconditioner(m) for k, m in masks.items()}

    def mask_changed(self, key, old_mask, new_mask) -> None:
        self.state.reset_entries(key, old_mask != new_mask)
        if self.preconditioned:
            self.preconditioners[key] = build_preconditioner(new_mask)

    def step(self, params, grads, eta, masks=None):
        if self.uses_ham:
            wd = self.weight_decay
            g2 = {}
            for k, g in grads.items():
                g = g + wd * params[k] if wd else g
                p = self.preconditioners.get(k) if self.preconditioned else None
                if p is not None:
                    if masks is not None and k in masks and not p.matches(masks[k]):
                        raise StalePreconditionerError(f"preconditioner for {k} was built from an older mask")
                    g = apply_preconditioner(p, g)
                if self.param_class.get(k, "weight") == "weight":
                    g = ham_metric(params[k], g, self.alpha)
                g2[k] = g
            return sgd_step(params, g2, self.state, eta, self.momentum, 0.0, masks)
        if self.preconditioned:
            return sparseopt_step(params, grads, self.preconditioners, self.state, eta,
                                  self.momentum, self.weight_decay, masks)
        return sgd_step(params, grads, self.state, eta, self.momentum, self.weight_decay, masks)
