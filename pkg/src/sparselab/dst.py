"""Dynamic sparse training: magnitude pruning, SET/RigL regrowth, ITOP tracking."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from .numerics import Rng
from .sparsity import apply_preconditioner, neuron_sparsities

log = logging.getLogger(__name__)

__all__ = [
    "DstConfig",
    "MaskUpdateEvent",
    "ItopTracker",
    "magnitude_prune",
    "set_regrow",
    "rigl_regrow",
    "drop_fraction_at",
    "is_update_step",
    "mask_update",
    "itop_update",
    "itop_rate",
    "EVENT_COLUMNS",
]


@dataclass
class DstConfig:
    method: str = "rigl"  # set | rigl | static
    drop_fraction: float = 0.3
    update_every: int = 100
    stop_after: float = 0.75  # fraction of total training
    regrow_gradient_source: str = "original"  # original | corrected
    drop_fraction_decay: str = "constant"  # constant | cosine

    def __post_init__(self):
        if self.method not in ("set", "rigl", "static"):
            raise ValueError(f"unknown DST method {self.method!r}")
        if not 0 < self.drop_fraction < 1:
            raise ValueError("drop_fraction must be in (0, 1)")
        if self.update_every < 1:
            raise ValueError("update_every must be >= 1")
        if self.regrow_gradient_source not in ("original", "corrected"):
            raise ValueError(f"unknown regrow source {self.regrow_gradient_source!r}")
        if self.drop_fraction_decay not in ("constant", "cosine"):
            raise ValueError(f"unknown drop fraction decay {self.drop_fraction_decay!r}")


@dataclass
class MaskUpdateEvent:
    step: int
    layer: str
    dropped: int
    grown: int
    s_before: np.ndarray
    s_after: np.ndarray
    repaired_rows: list = field(default_factory=list)

    def csv_row(self) -> list:
        s = self.s_after
        return [self.step, self.layer, self.dropped, self.grown,
                float(s.min()), float(s.max()), float(s.mean())]


EVENT_COLUMNS = ["step", "layer", "dropped", "grown", "min_s", "max_s", "mean_s"]


def _active_flat(mask) -> np.ndarray:
    return np.flatnonzero(np.asarray(mask).ravel() != 0)


def _inactive_flat(mask) -> np.ndarray:
    return np.flatnonzero(np.asarray(mask).ravel() == 0)


def magnitude_prune(weights, mask, k: int) -> np.ndarray:
    """Deactivate the ``k`` active entries of smallest ``|w|``.

    Ties go to the entry that comes first in row-major order.
    """
    active = _active_flat(mask)
    if not 0 <= k <= active.size:
        raise ValueError(f"cannot prune {k} of {active.size} active weights")
    out = np.array(mask, dtype=np.float64)
    if k == 0:
        return out
    mags = np.abs(np.asarray(weights).ravel()[active])
    order = np.argsort(mags, kind="stable")
    out.ravel()[active[order[:k]]] = 0.0
    return out


def set_regrow(mask, k: int, rng: Rng, candidates=None) -> np.ndarray:
    """Activate ``k`` inactive entries chosen uniformly without replacement."""
    cand = _inactive_flat(mask) if candidates is None else np.asarray(candidates)
    if not 0 <= k <= cand.size:
        raise ValueError(f"cannot grow {k} of {cand.size} inactive weights")
    out = np.array(mask, dtype=np.float64)
    if k:
        out.ravel()[cand[rng.choice(cand.size, k)]] = 1.0
    return out


def rigl_regrow(mask, dense_grad, k: int, candidates=None) -> np.ndarray:
    """Activate the ``k`` inactive entries of largest ``|grad|`` (row-major tie-break)."""
    cand = _inactive_flat(mask) if candidates is None else np.asarray(candidates)
    if not 0 <= k <= cand.size:
        raise ValueError(f"cannot grow {k} of {cand.size} inactive weights")
    out = np.array(mask, dtype=np.float64)
    if k:
        scores = np.abs(np.asarray(dense_grad).ravel()[cand])
        order = np.argsort(-scores, kind="stable")
        out.ravel()[cand[order[:k]]] = 1.0
    return out


def drop_fraction_at(cfg: DstConfig, step: int, total_steps: int) -> float:
    if cfg.drop_fraction_decay == "constant":
        return cfg.drop_fraction
    t_stop = max(cfg.stop_after * total_steps, 1.0)
    return cfg.drop_fraction * 0.5 * (1.0 + math.cos(math.pi * min(step / t_stop, 1.0)))


def is_update_step(cfg: DstConfig, step: int, total_steps: int) -> bool:
    return (cfg.method != "static" and step > 0 and step % cfg.update_every == 0
            and step <= cfg.stop_after * total_steps)


def _update_layer(layer, key, score, cfg, frac, step, rng):
    mask = layer.mask
    active = _active_flat(mask)
    originally_inactive = mask == 0
    k = int(round(frac * active.size))
    k = min(k, int(originally_inactive.sum()))
    s_before = neuron_sparsities(mask)
    pruned = magnitude_prune(layer.weights, mask, k)

    # rows emptied by pruning get one weight back before global regrowth
    repaired = []
    for i in np.flatnonzero(pruned.sum(axis=1) == 0):
        cols = np.flatnonzero(originally_inactive[i])
        if cols.size == 0:
            # no fresh candidate in this row; keep its largest dropped weight
            dropped_cols = np.flatnonzero(mask[i] != 0)
            j = dropped_cols[np.argmax(np.abs(layer.weights[i, dropped_cols]))]
            k -= 1
        elif cfg.method == "rigl":
            j = cols[np.argmax(np.abs(score[i, cols]))]
        else:
            j = cols[rng.integers(cols.size)]
        pruned[i, j] = 1.0
        repaired.append((int(i), int(j)))
    if repaired:
        log.info("step %d %s: repaired empty rows %s", step, key, repaired)

    candidates = np.flatnonzero((originally_inactive & (pruned == 0)).ravel())
    n_grow = int(mask.sum() - pruned.sum())
    if cfg.method == "rigl":
        new_mask = rigl_regrow(pruned, score, n_grow, candidates)
    else:
        new_mask = set_regrow(pruned, n_grow, rng, candidates)
    return new_mask, repaired, s_before


def mask_update(model, grads_dense, cfg: DstConfig, step: int, rng: Rng, optimizer=None,
                total_steps: int | None = None, layers=None):
    """Prune and regrow every DST-managed layer; returns the emitted events.

    ``grads_dense`` maps layer keys to gradients with the mask lifted. With a
    preconditioning optimizer and ``regrow_gradient_source="corrected"`` those
    scores are passed through the layer's current preconditioner first.
    Newly grown weights start at zero and the optimizer's velocity is cleared
    on every changed entry.
    """
    if cfg.method == "static":
        return []
    sparse = model.sparse_layers()
    keys = list(layers) if layers is not None else list(sparse)
    total_steps = total_steps if total_steps is not None else step
    frac = drop_fraction_at(cfg, step, total_steps)
    events = []
    for key in keys:
        layer = sparse[key]
        score = np.asarray(grads_dense[key]) if grads_dense is not None else None
        if cfg.method == "rigl":
            if score is None:
                raise ValueError(f"RigL needs a dense gradient for {key}")
            if (cfg.regrow_gradient_source == "corrected" and optimizer is not None
                    and optimizer.preconditioned and key in optimizer.preconditioners):
                score = apply_preconditioner(optimizer.preconditioners[key], score)
        old_mask = layer.mask.copy()
        new_mask, repaired, s_before = _update_layer(layer, key, score, cfg, frac, step, rng)
        grown_entries = (new_mask != 0) & (old_mask == 0)
        layer.weights[grown_entries] = 0.0
        layer.set_mask(new_mask)
        if optimizer is not None:
            optimizer.mask_changed(key, old_mask, new_mask)
        grown = int(grown_entries.sum())
        dropped_n = int(((old_mask != 0) & (new_mask == 0)).sum())
        events.append(MaskUpdateEvent(step, key, dropped_n, grown, s_before,
                                      neuron_sparsities(new_mask), repaired))
    return events


class ItopTracker:
    """Running union of all masks seen per layer."""

    def __init__(self, masks=None):
        self.union: dict[str, np.ndarray] = {}
        if masks:
            itop_update(self, masks)

    @property
    def total(self) -> int:
        return int(sum(u.size for u in self.union.values()))

    def rate(self) -> float:
        return itop_rate(self)


def itop_update(tracker: ItopTracker, masks) -> None:
    for key, m in masks.items():
        m = np.asarray(m) != 0
        u = tracker.union.get(key)
        tracker.union[key] = m.copy() if u is None else (u | m)


def itop_rate(tracker: ItopTracker) -> float:
    total = tracker.total
    if total == 0:
        return 0.0
    return float(sum(int(u.sum()) for u in tracker.union.values()) / total)
