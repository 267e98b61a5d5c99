"""Experiment runners. Each returns its rows and, when ``cfg.out`` is set, writes CSVs there."""

from __future__ import annotations

import csv
import hashlib
import logging
import math
import os
from dataclasses import dataclass, field

import numpy as np

from .. import flows
from ..dst import EVENT_COLUMNS, ItopTracker, is_update_step, itop_update, mask_update
from ..nn import MLP, BatchNorm, LayerNorm, ReLU, SparseLinear, build_mlp, mlp_forward_backward
from ..numerics import Rng
from ..optim import Optimizer, grad_renormalize, lr_at
from ..sparsity import (
    apply_preconditioner,
    build_preconditioner,
    erk_densities,
    neuron_sparsities,
    random_mask,
    uniform_fanin_mask,
)
from . import svg
from .config import ExperimentConfig
from .data import IdxFormatError, load_idx, synth_classification, synth_gaussian

log = logging.getLogger(__name__)

__all__ = [
    "write_csv",
    "skew_batches",
    "gradient_ratio",
    "run_grad_skew",
    "precond_spread",
    "ln_gradient_ratio",
    "run_ln_check",
    "RunResult",
    "train",
    "run_dst_train",
    "run_itop_report",
    "run_ham_sim",
    "GRAD_SKEW_COLUMNS",
    "LN_CHECK_COLUMNS",
    "SPREAD_COLUMNS",
]

GRAD_SKEW_COLUMNS = ["s", "theory", "ratio_bn", "ratio_no_bn", "ratio_bn_precond", "mean_s_i", "min_s_i", "max_s_i"]
NEURON_COLUMNS = ["s", "neuron", "s_i", "ratio_bn", "ratio_no_bn"]
SPREAD_COLUMNS = ["s_bin", "neurons", "mean_abs_grad", "mean_abs_grad_precond"]
LN_CHECK_COLUMNS = ["s", "theory", "ratio_ln"]
SUMMARY_COLUMNS = ["setup", "flow", "scaling", "eta", "steps", "final_loss", "a_final", "a_dense_final", "sign_flips"]


def write_csv(path: str, header, rows) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)


def _out(cfg: ExperimentConfig, name: str) -> str | None:
    return os.path.join(cfg.out, name) if cfg.out else None


# ------------------------------------------------------------ grad skew ---

def skew_batches(cfg: ExperimentConfig, rng: Rng):
    """``cfg.batches`` mini-batches of ``cfg.batch_size`` for the gradient probes."""
    n = cfg.batches * cfg.batch_size
    if cfg.dataset == "idx-files":
        try:
            X, y = load_idx(cfg.idx_images, cfg.idx_labels)
            idx = rng.choice(X.shape[0], min(n, X.shape[0]))
            X, y = X[idx], y[idx]
        except (FileNotFoundError, IdxFormatError) as e:
            log.warning("IDX data unavailable (%s); falling back to synthetic-gaussian", e)
            X, y = synth_gaussian(n, cfg.skew_input_dim, cfg.skew_classes, rng)
    else:
        X, y = synth_gaussian(n, cfg.skew_input_dim, cfg.skew_classes, rng)
    b = cfg.batch_size
    return [(X[k * b:(k + 1) * b], y[k * b:(k + 1) * b]) for k in range(X.shape[0] // b)]


def _probe_model(W1, W2, mask, normalization, eps=1e-5) -> MLP:
    layers = [SparseLinear(W1, mask)]
    if normalization == "batchnorm":
        layers.append(BatchNorm(W1.shape[0], eps=eps))
    elif normalization == "layernorm":
        layers.append(LayerNorm(W1.shape[0], eps=eps))
    layers += [ReLU(), SparseLinear(W2)]
    return MLP(layers, loss="ce")


def _first_layer_abs_grads(model: MLP, batches) -> np.ndarray:
    """Mean over batches of ``|dL/dW1|`` (no updates are applied)."""
    acc = np.zeros_like(model.layers[0].weights)
    for X, y in batches:
        _, grads = mlp_forward_backward(model, (X, y))
        acc += np.abs(grads["0.weight"])
    return acc / len(batches)


def gradient_ratio(W1, W2, mask, batches, normalization="batchnorm", eps=1e-5):
    """Sparse/dense first-layer gradient magnitudes on the sparse model's active entries.

    Returns ``(ratio, per_neuron_ratio, sparse_abs, dense_abs)`` where the
    ratio is the global mean of ``|g_sparse|`` over active entries divided by
    that of ``|g_dense|`` over the same entries.
    """
    dense = _first_layer_abs_grads(_probe_model(W1, W2, np.ones_like(mask), normalization, eps), batches)
    sparse = _first_layer_abs_grads(_probe_model(W1, W2, mask, normalization, eps), batches)
    active = mask != 0
    ratio = sparse[active].mean() / dense[active].mean()
    per_neuron = (sparse * mask).sum(axis=1) / np.maximum((dense * mask).sum(axis=1), 1e-300)
    return float(ratio), per_neuron, sparse, dense


def _probe_weights(cfg: ExperimentConfig, rng: Rng):
    d, h, c = cfg.skew_input_dim, cfg.skew_hidden, cfg.skew_classes
    W1 = rng.gaussian(h, d, 0.0, math.sqrt(2.0 / d))
    W2 = rng.gaussian(c, h, 0.0, math.sqrt(2.0 / h))
    return W1, W2


def run_grad_skew(cfg: ExperimentConfig):
    """Gradient ratio of a masked first layer vs its dense twin, with and without BN.

    Also measures the spread of per-neuron gradient scale at mixed neuron
    sparsities before and after preconditioning (see :func:`precond_spread`).
    Returns ``(rows, neuron_rows, spread_rows)``.
    """
    root = Rng(cfg.seed)
    W1, W2 = _probe_weights(cfg, root.spawn())
    batches = skew_batches(cfg, root.spawn())
    mask_rng = root.spawn()
    rows, neuron_rows = [], []
    for s in cfg.sparsities:
        mask = np.ones_like(W1) if s == 0 else random_mask(W1.shape, 1.0 - s, mask_rng)
        s_i = neuron_sparsities(mask)
        r_bn, pn_bn, sparse_bn, dense_bn = gradient_ratio(W1, W2, mask, batches, "batchnorm", cfg.bn_eps)
        r_none, pn_none, _, _ = gradient_ratio(W1, W2, mask, batches, "none", cfg.bn_eps)
        p = build_preconditioner(mask)
        corrected = apply_preconditioner(p, sparse_bn) / p.global_scale
        active = mask != 0
        r_pre = corrected[active].mean() / dense_bn[active].mean()
        rows.append([s, (1.0 - s) ** -0.5, r_bn, r_none, float(r_pre),
                     float(s_i.mean()), float(s_i.min()), float(s_i.max())])
        neuron_rows += [[s, i, float(s_i[i]), float(pn_bn[i]), float(pn_none[i])] for i in range(len(s_i))]
    spread_rows = precond_spread(cfg, W1, W2, batches, root.spawn())[0]
    if cfg.out:
        write_csv(_out(cfg, "grad_skew.csv"), GRAD_SKEW_COLUMNS, rows)
        write_csv(_out(cfg, "grad_skew_neurons.csv"), NEURON_COLUMNS, neuron_rows)
        write_csv(_out(cfg, "grad_skew_spread.csv"), SPREAD_COLUMNS, spread_rows)
        if cfg.svg:
            xs = [r[0] for r in rows]
            svg.line_chart(_out(cfg, "grad_skew.svg"), xs,
                           {"theory": [r[1] for r in rows], "with BN": [r[2] for r in rows],
                            "without BN": [r[3] for r in rows]},
                           "sparsity", "gradient ratio")
    return rows, neuron_rows, spread_rows


def mixed_sparsity_mask(shape, levels, rng: Rng) -> np.ndarray:
    """Neurons cycle through ``levels`` of sparsity, each with an exact uniform fan-in."""
    rows, cols = shape
    mask = np.zeros(shape)
    for i in range(rows):
        s = levels[i % len(levels)]
        fan_in = max(1, int(round((1.0 - s) * cols)))
        mask[i, rng.choice(cols, fan_in)] = 1.0
    return mask


def precond_spread(cfg: ExperimentConfig, W1, W2, batches, rng: Rng):
    """Per-neuron gradient scale binned by neuron sparsity, raw and preconditioned.

    Returns ``(rows, spread_raw, spread_corrected)`` where a spread is the
    max/min ratio of the bin means.
    """
    mask = mixed_sparsity_mask(W1.shape, cfg.spread_sparsities, rng)
    g = _first_layer_abs_grads(_probe_model(W1, W2, mask, "batchnorm", cfg.bn_eps), batches)
    p = build_preconditioner(mask)
    g_pre = apply_preconditioner(p, g)
    fan_in = mask.sum(axis=1)
    per_neuron = (g * mask).sum(axis=1) / fan_in
    per_neuron_pre = (g_pre * mask).sum(axis=1) / fan_in
    s_i = neuron_sparsities(mask)
    rows = []
    for level in np.unique(np.round(s_i, 6)):
        sel = np.isclose(s_i, level)
        rows.append([float(level), int(sel.sum()), float(per_neuron[sel].mean()), float(per_neuron_pre[sel].mean())])
    raw = [r[2] for r in rows]
    pre = [r[3] for r in rows]
    return rows, max(raw) / min(raw), max(pre) / min(pre)


# ------------------------------------------------------------- ln check ---

def ln_gradient_ratio(W1, W2, mask, batches, eps=1e-5) -> float:
    """Sparse/dense gradient ratio for a layer-normalized masked layer of uniform fan-in."""
    fan_in = np.asarray(mask).sum(axis=1)
    if not np.all(fan_in == fan_in[0]):
        raise ValueError("layer-norm check needs a mask with identical fan-in for every neuron")
    return gradient_ratio(W1, W2, mask, batches, "layernorm", eps)[0]


def run_ln_check(cfg: ExperimentConfig):
    root = Rng(cfg.seed)
    W1, W2 = _probe_weights(cfg, root.spawn())
    batches = skew_batches(cfg, root.spawn())
    mask_rng = root.spawn()
    rows = []
    d = W1.shape[1]
    for s in cfg.sparsities:
        fan_in = max(1, int(round((1.0 - s) * d)))
        mask = uniform_fanin_mask(W1.shape, fan_in, mask_rng)
        s_actual = 1.0 - fan_in / d
        rows.append([s, (1.0 - s_actual) ** -0.5, ln_gradient_ratio(W1, W2, mask, batches, cfg.bn_eps)])
    if cfg.out:
        write_csv(_out(cfg, "ln_check.csv"), LN_CHECK_COLUMNS, rows)
        if cfg.svg:
            svg.line_chart(_out(cfg, "ln_check.svg"), [r[0] for r in rows],
                           {"theory": [r[1] for r in rows], "layer norm": [r[2] for r in rows]},
                           "sparsity", "gradient ratio")
    return rows


# ------------------------------------------------------------ training ---

@dataclass
class RunResult:
    columns: list
    rows: list
    events: list
    managed: list
    mask_digests: list = field(default_factory=list)
    param_digests: list = field(default_factory=list)
    update_steps: list = field(default_factory=list)

    def column(self, name):
        i = self.columns.index(name)
        return [r[i] for r in self.rows]

    def epochs_to(self, threshold: float) -> float:
        for epoch, loss in zip(self.column("epoch"), self.column("train_loss")):
            if loss <= threshold:
                return epoch
        return math.inf


def _digest(arrays) -> str:
    h = hashlib.blake2b(digest_size=16)
    for a in arrays:
        h.update(np.ascontiguousarray(a).tobytes())
    return h.hexdigest()


def _load_train_data(cfg: ExperimentConfig, rng: Rng):
    if cfg.dataset == "idx-files":
        Xtr, ytr = load_idx(cfg.idx_images, cfg.idx_labels)
        Xte, yte = load_idx(cfg.idx_test_images, cfg.idx_test_labels)
        return Xtr, ytr, Xte, yte
    if cfg.dataset == "synthetic-gaussian":
        Xtr, ytr = synth_gaussian(cfg.n_train, cfg.input_dim, cfg.classes, rng)
        Xte, yte = synth_gaussian(cfg.n_test, cfg.input_dim, cfg.classes, rng)
        return Xtr, ytr, Xte, yte
    Xtr, ytr = synth_classification(cfg.n_train, cfg.input_dim, cfg.classes, rng, cfg.cluster_std)
    Xte, yte = synth_classification(cfg.n_test, cfg.input_dim, cfg.classes, rng, cfg.cluster_std)
    return Xtr, ytr, Xte, yte


def _accuracy(model: MLP, X, y) -> float:
    return float((model.predict(X).argmax(axis=1) == y).mean())


def train(cfg: ExperimentConfig, trace: bool = False) -> RunResult:
    """Full sparse training loop; deterministic for a given config and seed."""
    root = Rng(cfg.seed)
    data_rng, mask_rng, init_rng, shuffle_rng, dst_rng = (root.spawn() for _ in range(5))
    Xtr, ytr, Xte, yte = _load_train_data(cfg, data_rng)
    dims = [Xtr.shape[1], *cfg.hidden, cfg.classes]
    layer_dims = list(zip(dims[:-1], dims[1:]))
    densities = erk_densities(layer_dims, cfg.sparsity, cfg.distribution)
    masks = {k: random_mask((o, i), d, mask_rng) for k, ((i, o), d) in enumerate(zip(layer_dims, densities)) if d < 1.0}
    model = build_mlp(dims, init_rng, cfg.normalization, masks, cfg.init, "ce", cfg.bn_eps, cfg.bn_momentum,
                      last_sparse=True)
    sparse = model.sparse_layers()
    linear_keys = list(sparse)
    managed = [linear_keys[k] for k in sorted(masks)]
    param_class = {k: ("normalization" if k.endswith(("gamma", "beta")) else "weight") for k in model.params()}
    opt = Optimizer(cfg.optimizer, cfg.momentum, cfg.weight_decay, cfg.alpha, param_class)
    opt.rebuild({k: sparse[k].mask for k in managed})
    dst_cfg = cfg.dst_config()
    schedule = cfg.lr_schedule()
    tracker = ItopTracker({k: sparse[k].mask for k in managed})

    n = Xtr.shape[0]
    spe = n // cfg.batch_size
    if spe < 1:
        raise ValueError("batch_size larger than the training set")
    total_steps = spe * cfg.epochs
    columns = ["epoch", "train_loss", "train_acc", "test_acc", "lr", "R_m"]
    for k in managed:
        columns += [f"{k}_active", f"{k}_mean_s", f"{k}_min_s", f"{k}_max_s"]
    result = RunResult(columns, [], [], managed)
    step = 0
    for epoch in range(1, cfg.epochs + 1):
        order = shuffle_rng.permutation(n)
        losses = []
        for b in range(spe):
            idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
            eta = lr_at(schedule, step / spe, cfg.batch_size)
            loss, grads = mlp_forward_backward(model, (Xtr[idx], ytr[idx]))
            if not math.isfinite(loss):
                raise FloatingPointError(f"non-finite loss at step {step}")
            if cfg.renormalize_grads:
                grads, _ = grad_renormalize(grads)
            current_masks = {k: sparse[k].mask for k in managed}
            opt.step(model.params(), grads, eta, current_masks)
            losses.append(loss)
            step += 1
            if is_update_step(dst_cfg, step, total_steps) and managed:
                events = mask_update(model, model.dense_grads(), dst_cfg, step, dst_rng, opt,
                                     total_steps, managed)
                result.events += events
                result.update_steps.append(step)
                itop_update(tracker, {k: sparse[k].mask for k in managed})
            if trace:
                result.mask_digests.append(_digest(sparse[k].mask for k in managed))
                result.param_digests.append(_digest(model.params().values()))
        row = [epoch, float(np.mean(losses)), _accuracy(model, Xtr, ytr), _accuracy(model, Xte, yte),
               lr_at(schedule, step / spe, cfg.batch_size), tracker.rate()]
        for k in managed:
            s_i = neuron_sparsities(sparse[k].mask)
            row += [int(sparse[k].mask.sum()), float(s_i.mean()), float(s_i.min()), float(s_i.max())]
        result.rows.append(row)
    return result


def run_dst_train(cfg: ExperimentConfig, trace: bool = False) -> RunResult:
    result = train(cfg, trace)
    if cfg.out:
        write_csv(_out(cfg, "run.csv"), result.columns, result.rows)
        write_csv(_out(cfg, "events.csv"), EVENT_COLUMNS, [e.csv_row() for e in result.events])
        if cfg.svg:
            svg.line_chart(_out(cfg, "run.svg"), result.column("epoch"),
                           {"train loss": result.column("train_loss")}, "epoch", "loss")
    return result


def run_itop_report(cfg: ExperimentConfig):
    """ITOP rate per epoch for SET and RigL under both regrowth gradient sources."""
    rows, summary = [], []
    for method in ("set", "rigl"):
        for source in ("original", "corrected"):
            run = train(cfg.replace(dst_method=method, regrow_source=source, out=""))
            for epoch, rm in zip(run.column("epoch"), run.column("R_m")):
                rows.append([method, source, epoch, rm])
            summary.append([method, source, run.column("R_m")[-1], run.column("test_acc")[-1]])
    if cfg.out:
        write_csv(_out(cfg, "itop.csv"), ["method", "regrow_source", "epoch", "R_m"], rows)
        write_csv(_out(cfg, "itop_summary.csv"), ["method", "regrow_source", "final_R_m", "final_test_acc"], summary)
    return rows, summary


# --------------------------------------------------------------- flows ---

def run_ham_sim(cfg: ExperimentConfig):
    """One-neuron and two-neuron student-teacher runs over flow x scaling."""
    kinds = ("gf", "ham") if cfg.flow == "both" else (cfg.flow,)
    summary, results = [], {}
    for setup, eta, steps in (("one", cfg.eta, cfg.steps), ("multi", cfg.multi_eta, cfg.multi_steps)):
        for kind in kinds:
            for scaling in (False, True):
                fc = flows.FlowConfig(flow=kind, eta=eta, alpha=cfg.alpha, steps=steps, scaling=scaling,
                                      neurons=setup, seed=cfg.seed, record_every=cfg.record_every)
                res = flows.run_flow_experiment(fc)
                tag = f"{setup}_{kind}_{'scaled' if scaling else 'plain'}"
                results[tag] = res
                if setup == "one":
                    a_final, a_dense = res.final[0].a, ""
                else:
                    a_final, a_dense = res.final[1].a, res.final[0].a
                summary.append([setup, kind, scaling, eta, steps, res.final_loss, a_final, a_dense,
                                sum(len(c) for c in res.sign_changes)])
                if cfg.out:
                    for k in range(len(res.final)):
                        suffix = "" if setup == "one" else f"_n{k}"
                        write_csv(_out(cfg, f"traj_{tag}{suffix}.csv"), flows.TRAJECTORY_COLUMNS,
                                  res.trajectory(k))
                    if cfg.svg:
                        tr = res.trajectory(0 if setup == "one" else 1)
                        svg.line_chart(_out(cfg, f"traj_{tag}.svg"), [r[0] for r in tr],
                                       {"a": [r[2] for r in tr], "gamma": [r[3] for r in tr]}, "step", "value")
    if cfg.out:
        write_csv(_out(cfg, "ham_summary.csv"), SUMMARY_COLUMNS, summary)
    return summary, results
