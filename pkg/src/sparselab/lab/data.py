"""Dataset loaders: IDX files and synthetic generators."""

from __future__ import annotations

import os
import struct

import numpy as np

from ..numerics import Rng

__all__ = ["IdxFormatError", "read_idx", "write_idx", "load_idx", "synth_classification", "synth_gaussian"]

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
MNIST_MEAN = 0.1307
MNIST_STD = 0.3081


class IdxFormatError(ValueError):
    pass


def read_idx(path: str, expected_magic: int) -> np.ndarray:
    """Read an unsigned-byte IDX file into an array of its declared shape."""
    with open(path, "rb") as fh:
        raw = fh.read()
    if len(raw) < 4:
        raise IdxFormatError(f"{path}: truncated header at offset 0")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise IdxFormatError(f"{path}: bad magic 0x{magic:08x} at offset 0, expected 0x{expected_magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxFormatError(f"{path}: truncated dimension header at offset 4")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    n = int(np.prod(dims))
    if len(raw) < header + n:
        raise IdxFormatError(f"{path}: truncated data at offset {len(raw)}, expected {header + n} bytes")
    return np.frombuffer(raw, dtype=np.uint8, count=n, offset=header).reshape(dims)


def write_idx(path: str, array) -> None:
    array = np.asarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(f">{array.ndim}I", *array.shape))
        fh.write(array.tobytes())


def load_idx(images_path: str, labels_path: str):
    """MNIST-style images flattened to rows, scaled to [0, 1] and standardized."""
    for p in (images_path, labels_path):
        if not os.path.isfile(p):
            raise FileNotFoundError(p)
    images = read_idx(images_path, IMAGE_MAGIC)
    labels = read_idx(labels_path, LABEL_MAGIC)
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(f"count mismatch: {images.shape[0]} images vs {labels.shape[0]} labels")
    X = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    X = (X - MNIST_MEAN) / MNIST_STD
    return X, labels.astype(np.int64)


def synth_classification(n: int, dim: int, classes: int, rng: Rng, std: float = 0.1):
    """Gaussian clusters centred on the first ``classes`` coordinate axes.

    Labels are balanced (``i % classes``) and then shuffled.
    """
    if classes > dim:
        raise ValueError("need classes <= dim for axis-aligned class means")
    labels = np.arange(n) % classes
    labels = labels[rng.permutation(n)]
    means = np.eye(classes, dim)
    X = means[labels] + rng.gaussian(n, dim, 0.0, std)
    return X, labels.astype(np.int64)


def synth_gaussian(n: int, dim: int, classes: int, rng: Rng):
    """i.i.d. N(0, 1) inputs with uniformly random labels."""
    X = rng.gaussian(n, dim)
    labels = rng.integers(classes, n)
    return X, labels
