"""Deterministic arithmetic and random sampling.

Matrices are plain ``numpy.ndarray`` objects of dtype float64. The random
generator is xoshiro256** seeded through SplitMix64, with bulk generation
compiled by numba so that large draws stay fast while producing exactly the
same stream as the scalar reference path.
"""

from __future__ import annotations

import math

import numba
import numpy as np

__all__ = [
    "Rng",
    "splitmix64",
    "matmul",
    "as_matrix",
]

MASK64 = (1 << 64) - 1
TWO_PI = 2.0 * math.pi


def splitmix64(x: int) -> tuple[int, int]:
    """One SplitMix64 step. Returns ``(new_state, output)``."""
    x = (x + 0x9E3779B97F4A7C15) & MASK64
    z = x
    z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK64
    z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK64
    return x, z ^ (z >> 31)


@numba.njit(cache=True)
def _rotl(x, k):
    return (x << np.uint64(k)) | (x >> np.uint64(64 - k))


@numba.njit(cache=True)
def _next(s):
    result = _rotl(s[1] * np.uint64(5), 7) * np.uint64(9)
    t = s[1] << np.uint64(17)
    s[2] ^= s[0]
    s[3] ^= s[1]
    s[1] ^= s[2]
    s[0] ^= s[3]
    s[2] ^= t
    s[3] = _rotl(s[3], 45)
    return result


@numba.njit(cache=True)
def _fill_u64(s, out):
    for i in range(out.size):
        out[i] = _next(s)


@numba.njit(cache=True)
def _fill_uniform(s, out):
    # 53 high bits -> [0, 1)
    scale = 1.0 / 9007199254740992.0
    for i in range(out.size):
        out[i] = float(_next(s) >> np.uint64(11)) * scale


@numba.njit(cache=True)
def _fill_normal(s, out):
    scale = 1.0 / 9007199254740992.0
    n = out.size
    i = 0
    while i < n:
        u1 = 1.0 - float(_next(s) >> np.uint64(11)) * scale  # (0, 1]
        u2 = float(_next(s) >> np.uint64(11)) * scale
        r = math.sqrt(-2.0 * math.log(u1))
        out[i] = r * math.cos(2.0 * math.pi * u2)
        if i + 1 < n:
            out[i + 1] = r * math.sin(2.0 * math.pi * u2)
        i += 2


@numba.njit(cache=True)
def _bounded(s, n):
    # rejection on the full word; unbiased for any n
    n64 = np.uint64(n)
    limit = np.uint64(0xFFFFFFFFFFFFFFFF) - (np.uint64(0xFFFFFFFFFFFFFFFF) % n64)
    while True:
        x = _next(s)
        if x < limit:
            return x % n64


@numba.njit(cache=True)
def _partial_shuffle(s, arr, k):
    # first k entries become a uniform sample without replacement
    n = arr.size
    for i in range(k):
        j = i + np.int64(_bounded(s, n - i))
        tmp = arr[i]
        arr[i] = arr[j]
        arr[j] = tmp


class Rng:
    """xoshiro256** generator.

    The four state words are produced by feeding ``seed`` through successive
    SplitMix64 steps. Every sampling method advances the same stream, so a
    given seed and call sequence always reproduces the same numbers.
    """

    def __init__(self, seed: int):
        if seed < 0:
            raise ValueError("seed must be non-negative")
        x = seed & MASK64
        words = []
        for _ in range(4):
            x, out = splitmix64(x)
            words.append(out)
        self.state = np.array(words, dtype=np.uint64)

    @classmethod
    def from_state(cls, words) -> "Rng":
        rng = cls.__new__(cls)
        rng.state = np.array([int(w) & MASK64 for w in words], dtype=np.uint64)
        if not rng.state.any():
            raise ValueError("xoshiro state must not be all zero")
        return rng

    def next_u64(self) -> int:
        return int(_next(self.state))

    def u64(self, n: int) -> np.ndarray:
        out = np.empty(n, dtype=np.uint64)
        _fill_u64(self.state, out)
        return out

    def uniform(self, shape) -> np.ndarray:
        out = np.empty(int(np.prod(shape)), dtype=np.float64)
        _fill_uniform(self.state, out)
        return out.reshape(shape)

    def gaussian(self, rows: int, cols: int, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        """Box-Muller normals, two per pair of uniform draws, in row-major order."""
        if std < 0:
            raise ValueError(f"std must be >= 0, got {std}")
        out = np.empty(rows * cols, dtype=np.float64)
        _fill_normal(self.state, out)
        return (mean + std * out).reshape(rows, cols)

    def normal(self, shape, mean: float = 0.0, std: float = 1.0) -> np.ndarray:
        shape = (shape,) if np.isscalar(shape) else tuple(shape)
        n = int(np.prod(shape))
        return self.gaussian(1, n, mean, std).reshape(shape)

    def integers(self, n: int, size: int | None = None):
        """Uniform integers in ``[0, n)`` by rejection sampling."""
        if n <= 0:
            raise ValueError("n must be positive")
        if size is None:
            return int(_bounded(self.state, n))
        return np.array([_bounded(self.state, n) for _ in range(size)], dtype=np.int64)

    def choice(self, n: int, k: int) -> np.ndarray:
        """``k`` distinct indices from ``range(n)``, uniformly without replacement."""
        if not 0 <= k <= n:
            raise ValueError(f"cannot choose {k} of {n}")
        arr = np.arange(n, dtype=np.int64)
        _partial_shuffle(self.state, arr, k)
        return arr[:k].copy()

    def permutation(self, n: int) -> np.ndarray:
        return self.choice(n, n)

    def spawn(self) -> "Rng":
        """Independent child generator seeded from this stream."""
        return Rng(self.next_u64())


def as_matrix(a) -> np.ndarray:
    m = np.asarray(a, dtype=np.float64)
    if m.ndim == 1:
        m = m.reshape(1, -1)
    if m.ndim != 2:
        raise ValueError(f"expected a 2-D matrix, got shape {m.shape}")
    return m


def matmul(a, b) -> np.ndarray:
    a = as_matrix(a)
    b = as_matrix(b)
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"dimension mismatch: {a.shape} x {b.shape}")
    return a @ b
