"""Sparse-training laboratory: BN gradient skew, sparsity-aware preconditioning,
dynamic sparse training and balance invariants of BN student-teacher flows."""

from . import dst, flows, nn, numerics, optim, sparsity
from .numerics import Rng

__version__ = "0.1.0"

__all__ = ["Rng", "dst", "flows", "nn", "numerics", "optim", "sparsity", "__version__"]
