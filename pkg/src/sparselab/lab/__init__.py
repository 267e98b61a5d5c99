"""Experiment runners, data ingestion, configuration and the command line."""

from .config import ConfigError, ExperimentConfig, dump_config, load_config, parse_config
from .data import load_idx, synth_classification, synth_gaussian
from .experiments import (
    run_dst_train,
    run_grad_skew,
    run_ham_sim,
    run_itop_report,
    run_ln_check,
)

__all__ = [
    "ConfigError",
    "ExperimentConfig",
    "dump_config",
    "load_config",
    "parse_config",
    "load_idx",
    "synth_classification",
    "synth_gaussian",
    "run_dst_train",
    "run_grad_skew",
    "run_ham_sim",
    "run_itop_report",
    "run_ln_check",
]
