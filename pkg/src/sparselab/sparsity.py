"""Masks, per-neuron sparsity and the sparsity-aware diagonal preconditioner."""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from .numerics import Rng

log = logging.getLogger(__name__)

__all__ = [
    "Preconditioner",
    "neuron_sparsities",
    "build_preconditioner",
    "apply_preconditioner",
    "erk_densities",
    "random_mask",
    "uniform_fanin_mask",
    "repair_empty_rows",
    "sparse_init_scale",
    "FullyMaskedNeuronError",
]


class FullyMaskedNeuronError(ValueError):
    def __init__(self, neurons):
        self.neurons = list(neurons)
        super().__init__(f"neurons with no active incoming weight: {self.neurons}")


def _check_mask(mask) -> np.ndarray:
    mask = np.asarray(mask, dtype=np.float64)
    if mask.ndim != 2 or mask.size == 0:
        raise ValueError("mask must be a non-empty 2-D array")
    return mask


def neuron_sparsities(mask) -> np.ndarray:
    """``s_i = 1 - fan_in_i / in_features`` for every output neuron (row)."""
    mask = _check_mask(mask)
    return 1.0 - mask.sum(axis=1) / mask.shape[1]


@dataclass(frozen=True)
class Preconditioner:
    factors: np.ndarray  # sqrt(1 - s_i), one per output neuron
    s_avg: float
    global_scale: float  # 1 / sqrt(1 - s_avg)
    mask: np.ndarray  # copy of the mask it was built from

    def is_identity(self) -> bool:
        return bool(np.all(self.factors == 1.0)) and self.global_scale == 1.0

    def matches(self, mask) -> bool:
        return np.array_equal(self.mask, mask)


def build_preconditioner(mask) -> Preconditioner:
    mask = _check_mask(mask)
    s = neuron_sparsities(mask)
    empty = np.flatnonzero(s >= 1.0)
    if empty.size:
        raise FullyMaskedNeuronError(empty.tolist())
    s_avg = float(s.mean())
    return Preconditioner(
        factors=np.sqrt(1.0 - s),
        s_avg=s_avg,
        global_scale=float(1.0 / np.sqrt(1.0 - s_avg)),
        mask=mask.copy(),
    )


def apply_preconditioner(p: Preconditioner, grad) -> np.ndarray:
    """Scale row ``i`` by ``factors[i]``, then everything by ``global_scale``."""
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != p.mask.shape:
        raise ValueError(f"shape mismatch: gradient {grad.shape}, preconditioner built for {p.mask.shape}")
    return (grad * p.factors[:, None]) * p.global_scale


def erk_densities(layer_dims, target_sparsity: float, distribution: str = "erk",
                  dense_layers=()) -> np.ndarray:
    """Per-layer densities whose parameter-weighted mean is ``1 - target_sparsity``.

    ``layer_dims`` is a list of ``(in, out)``. With ``distribution="erk"`` the
    density of layer ``l`` is proportional to ``(in+out)/(in*out)``; layers that
    would exceed density 1 are clamped and the remaining budget re-spread over
    the others until no layer overflows. ``"uniform"`` gives every layer the
    same density. Layers listed in ``dense_layers`` are forced to density 1.
    """
    if not 0 <= target_sparsity < 1:
        raise ValueError(f"target_sparsity must be in [0, 1), got {target_sparsity}")
    sizes = np.array([i * o for i, o in layer_dims], dtype=np.float64)
    if distribution == "erk":
        raw = np.array([(i + o) / (i * o) for i, o in layer_dims], dtype=np.float64)
    elif distribution == "uniform":
        raw = np.ones(len(layer_dims))
    else:
        raise ValueError(f"unknown distribution {distribution!r}")
    required = (1.0 - target_sparsity) * sizes.sum()
    dense = np.zeros(len(layer_dims), dtype=bool)
    dense[list(dense_layers)] = True
    while True:
        budget = required - sizes[dense].sum()
        if budget < -1e-9 * sizes.sum():
            raise ValueError("infeasible target: forced-dense layers exceed the active-parameter budget")
        free = ~dense
        if not free.any():
            break
        eps = budget / (raw[free] * sizes[free]).sum()
        dens = eps * raw
        over = free & (dens > 1.0)
        if not over.any():
            break
        dense[np.argmax(np.where(over, dens, -np.inf))] = True
    out = np.where(dense, 1.0, eps * raw if free.any() else 1.0)
    if sizes @ out > sizes.sum() + 1e-9:
        raise ValueError("infeasible target")
    return out


def repair_empty_rows(mask: np.ndarray, rng: Rng, scores=None) -> list[tuple[int, int]]:
    """Activate one entry in every all-zero row, in place.

    Picks the highest-scored column when ``scores`` is given (lowest index on
    ties), otherwise a uniformly random one. Returns the activated entries.
    """
    grown = []
    for i in np.flatnonzero(mask.sum(axis=1) == 0):
        if scores is None:
            j = rng.integers(mask.shape[1])
        else:
            j = int(np.argmax(np.abs(scores[i])))
        mask[i, j] = 1.0
        grown.append((int(i), int(j)))
    if grown:
        log.info("regrew one weight into %d empty row(s): %s", len(grown), grown)
    return grown


def random_mask(shape, density: float, rng: Rng) -> np.ndarray:
    """Exactly ``round(density * size)`` active entries, uniformly placed.

    Rows left empty are repaired with one random entry each (see
    :func:`repair_empty_rows`), which can raise the count slightly.
    """
    if not 0 < density <= 1:
        raise ValueError(f"density must be in (0, 1], got {density}")
    rows, cols = shape
    n = rows * cols
    k = int(round(density * n))
    mask = np.zeros(n)
    mask[rng.choice(n, k)] = 1.0
    mask = mask.reshape(rows, cols)
    repair_empty_rows(mask, rng)
    return mask


def uniform_fanin_mask(shape, fan_in: int, rng: Rng) -> np.ndarray:
    """Every row gets exactly ``fan_in`` active entries."""
    rows, cols = shape
    if not 1 <= fan_in <= cols:
        raise ValueError(f"fan_in must be in [1, {cols}], got {fan_in}")
    mask = np.zeros((rows, cols))
    for i in range(rows):
        mask[i, rng.choice(cols, fan_in)] = 1.0
    return mask


def sparse_init_scale(mask, scheme: str = "dense-kaiming") -> np.ndarray:
    """Per-neuron weight std: ``sqrt(2/in)`` for every neuron, or ``sqrt(2/fan_in_i)``."""
    mask = _check_mask(mask)
    rows, cols = mask.shape
    if scheme == "dense-kaiming":
        return np.full(rows, np.sqrt(2.0 / cols))
    if scheme == "sparse-aware":
        fan_in = mask.sum(axis=1)
        return np.sqrt(2.0 / np.maximum(fan_in, 1.0))
    raise ValueError(f"unknown init scheme {scheme!r}")
