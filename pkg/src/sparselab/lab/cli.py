"""Command line entry point: ``sparselab <experiment> [--config FILE] [--key value ...]``."""

from __future__ import annotations

import argparse
import logging
import sys

from .config import EXPERIMENTS, ConfigError, ExperimentConfig, coerce, dump_config, load_config
from . import experiments

RUNNERS = {
    "grad-skew": experiments.run_grad_skew,
    "ham-sim": experiments.run_ham_sim,
    "dst-train": experiments.run_dst_train,
    "ln-check": experiments.run_ln_check,
    "itop-report": experiments.run_itop_report,
}


def _build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sparselab", description="Sparse training experiments.")
    p.add_argument("experiment", choices=EXPERIMENTS)
    p.add_argument("--config", help="key = value config file")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _overrides(extra) -> dict:
    values = {}
    i = 0
    while i < len(extra):
        tok = extra[i]
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
        else:
            if i + 1 >= len(extra):
                raise ConfigError(f"missing value for --{key}")
            i += 1
            value = extra[i]
        values[key.replace("-", "_")] = coerce(key, value)
        i += 1
    return values


def resolve_config(argv) -> ExperimentConfig:
    args, extra = _build_parser().parse_known_args(argv)
    cfg = ExperimentConfig(experiment=args.experiment)
    if args.config:
        cfg = load_config(args.config, cfg)
    cfg = cfg.replace(**_overrides(extra), experiment=args.experiment)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    if args.out is not None:
        cfg = cfg.replace(out=args.out)
    return cfg.validate()


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    verbose = "-v" in argv or "--verbose" in argv
    logging.basicConfig(level=logging.INFO if verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = resolve_config(argv)
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except SystemExit as e:  # argparse usage errors
        return 1 if e.code else 0
    sys.stdout.write(dump_config(cfg))
    sys.stdout.flush()
    try:
        RUNNERS[cfg.experiment](cfg)
    except Exception as e:  # noqa: BLE001 - any failure during a run maps to exit 2
        print(f"runtime error: {type(e).__name__}: {e}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
