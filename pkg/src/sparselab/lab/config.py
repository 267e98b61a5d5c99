"""Flat ``key = value`` experiment configuration."""

from __future__ import annotations

import dataclasses
import os
import typing
from dataclasses import dataclass, field, fields

from ..dst import DstConfig
from ..optim import LrSchedule, Optimizer

__all__ = ["ConfigError", "ExperimentConfig", "parse_config", "load_config", "dump_config"]

EXPERIMENTS = ("grad-skew", "ham-sim", "dst-train", "ln-check", "itop-report")


class ConfigError(ValueError):
    pass


@dataclass
class ExperimentConfig:
    experiment: str = "dst-train"
    seed: int = 0
    out: str = "out"
    svg: bool = False

    # data
    dataset: str = "synthetic-classification"  # synthetic-gaussian | synthetic-classification | idx-files
    idx_images: str = ""
    idx_labels: str = ""
    idx_test_images: str = ""
    idx_test_labels: str = ""
    n_train: int = 2048
    n_test: int = 1024
    input_dim: int = 32
    classes: int = 8
    cluster_std: float = 1.0

    # model
    hidden: list[int] = field(default_factory=lambda: [64, 64])
    normalization: str = "batchnorm"  # batchnorm | layernorm | none
    sparsity: float = 0.9
    distribution: str = "erk"  # erk | uniform
    init: str = "dense-kaiming"  # dense-kaiming | sparse-aware
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1

    # optimization
    optimizer: str = "sgd"  # sgd | sparseopt | sgd+ham | sparseopt+ham
    lr: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 5e-4
    alpha: float = 4.0
    ham_h1: float = 80.0  # recorded only; no mapping to alpha is defined
    renormalize_grads: bool = False
    schedule: str = "cifar"  # cifar | imagenet
    eta_init: float = 1e-5
    eta_end: float = 1e-6
    warmup_epochs: float = 1.0
    epochs: int = 50
    batch_size: int = 64
    loss_threshold: float = 0.3

    # dynamic sparse training
    dst_method: str = "rigl"  # set | rigl | static
    drop_fraction: float = 0.3
    update_every: int = 100
    stop_after: float = 0.75
    regrow_source: str = "original"  # original | corrected
    drop_fraction_decay: str = "constant"  # constant | cosine

    # grad-skew / ln-check
    batches: int = 100
    sparsities: list[float] = field(default_factory=lambda: [round(0.05 * k, 2) for k in range(0, 19, 2)] + [0.95])
    skew_input_dim: int = 784
    skew_hidden: int = 64
    skew_classes: int = 10
    spread_sparsities: list[float] = field(default_factory=lambda: [0.0, 0.75])

    # ham-sim
    flow: str = "both"  # gf | ham | both
    eta: float = 0.01
    steps: int = 10_000
    multi_eta: float = 0.1
    multi_steps: int = 1000
    record_every: int = 10

    def validate(self) -> "ExperimentConfig":
        choices = {
            "experiment": EXPERIMENTS,
            "dataset": ("synthetic-gaussian", "synthetic-classification", "idx-files"),
            "normalization": ("batchnorm", "layernorm", "none"),
            "distribution": ("erk", "uniform"),
            "init": ("dense-kaiming", "sparse-aware"),
            "optimizer": Optimizer.KINDS,
            "schedule": ("cifar", "imagenet"),
            "flow": ("gf", "ham", "both"),
        }
        for key, allowed in choices.items():
            if getattr(self, key) not in allowed:
                raise ConfigError(f"{key} must be one of {', '.join(allowed)}; got {getattr(self, key)!r}")
        if not 0 <= self.sparsity < 1:
            raise ConfigError("sparsity must be in [0, 1)")
        if any(not 0 <= s < 1 for s in self.sparsities + self.spread_sparsities):
            raise ConfigError("sparsity grid values must be in [0, 1)")
        for key in ("n_train", "n_test", "input_dim", "classes", "epochs", "batch_size", "batches"):
            if getattr(self, key) < 1:
                raise ConfigError(f"{key} must be >= 1")
        if self.seed < 0:
            raise ConfigError("seed must be >= 0")
        if self.experiment in ("dst-train", "itop-report") and self.dataset == "idx-files":
            for key in ("idx_images", "idx_labels", "idx_test_images", "idx_test_labels"):
                path = getattr(self, key)
                if not path or not os.path.exists(path):
                    raise ConfigError(f"{key}: file not found: {path!r}")
        try:
            self.dst_config()
            self.lr_schedule()
        except ValueError as e:
            raise ConfigError(str(e)) from e
        return self

    def dst_config(self) -> DstConfig:
        return DstConfig(self.dst_method, self.drop_fraction, self.update_every, self.stop_after,
                         self.regrow_source, self.drop_fraction_decay)

    def lr_schedule(self) -> LrSchedule:
        return LrSchedule(self.schedule, self.lr, self.eta_init, self.eta_end,
                          self.warmup_epochs, self.epochs)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)


_HINTS = typing.get_type_hints(ExperimentConfig)
FIELD_NAMES = [f.name for f in fields(ExperimentConfig)]


def _parse_bool(text: str) -> bool:
    t = text.strip().lower()
    if t in ("true", "yes", "1", "on"):
        return True
    if t in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def coerce(key: str, text: str):
    key = key.replace("-", "_")
    if key not in _HINTS:
        raise ConfigError(f"unknown config key {key!r}")
    hint = _HINTS[key]
    text = text.strip()
    try:
        if hint is bool:
            return _parse_bool(text)
        if hint is int:
            return int(text)
        if hint is float:
            return float(text)
        if hint is str:
            return text
        if typing.get_origin(hint) is list:
            (item,) = typing.get_args(hint)
            return [item(v) for v in text.split(",") if v.strip()]
    except ValueError as e:
        raise ConfigError(f"bad value for {key}: {text!r} ({e})") from e
    raise ConfigError(f"unsupported type for {key}")


def parse_config(text: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = line.split("=", 1)
        values[key.strip().replace("-", "_")] = coerce(key.strip(), value)
    cfg = base if base is not None else ExperimentConfig()
    return dataclasses.replace(cfg, **values)


def load_config(path: str, base: ExperimentConfig | None = None) -> ExperimentConfig:
    if not os.path.isfile(path):
        raise ConfigError(f"config file not found: {path}")
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read(), base)


def _fmt(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, list):
        return ",".join(_fmt(v) for v in value)
    return repr(value) if isinstance(value, float) else str(value)


def dump_config(cfg: ExperimentConfig) -> str:
    return "".join(f"{name} = {_fmt(getattr(cfg, name))}\n" for name in FIELD_NAMES)
