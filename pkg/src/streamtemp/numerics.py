"""Shared numeric primitives: deterministic RNG, dense algebra, rank statistics.

Everything stochastic in the package draws from an explicit :class:`Rng` so
that a run is a pure function of (inputs, seed).  The statistical helpers
here are deliberately small and self-contained; heavier model code lives in
the dedicated modules.
"""

from __future__ import annotations

import hashlib
import math

import numpy as np

__all__ = [
    "Rng",
    "DimensionError",
    "UndefinedCorrelationError",
    "matmul",
    "xavier_normal_init",
    "average_ranks",
    "pearson",
    "spearman",
    "lower_median",
    "normal_cdf",
    "sample_skewness",
    "sample_excess_kurtosis",
]


class DimensionError(ValueError):
    """Operands have incompatible shapes."""


class UndefinedCorrelationError(ValueError):
    """Correlation undefined because one input has zero rank variance."""


class Rng:
    """Deterministic, splittable random source.

    Wraps numpy's PCG64 seeded through a ``SeedSequence`` so equal seeds
    reproduce identical draw streams across runs and platforms.  Children
    derived with :meth:`child` are statistically independent and fully
    determined by ``(seed, path)``, which lets concurrent tasks own private
    generators without shared state.
    """

    def __init__(self, seed: int, path: tuple[int, ...] = ()):
        if seed < 0:
            raise ValueError("seed must be non-negative")
        self.seed = int(seed)
        self.path = tuple(int(p) for p in path)
        self._sequence = np.random.SeedSequence(entropy=self.seed, spawn_key=self.path)
        self.generator = np.random.Generator(np.random.PCG64(self._sequence))

    def child(self, *indices: int) -> "Rng":
        """Derive an independent child stream at the given index path."""
        return Rng(self.seed, self.path + tuple(indices))

    def child_named(self, name: str) -> "Rng":
        """Derive a child keyed by a stable hash of ``name``."""
        digest = hashlib.sha256(name.encode("utf-8")).digest()
        return self.child(int.from_bytes(digest[:4], "big"))

    def __repr__(self):
        return f"Rng(seed={self.seed}, path={self.path})"


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Dense 2-D matrix product with explicit shape validation.

    Raises:
        DimensionError: if either operand is not 2-D or the inner
            dimensions disagree.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2:
        raise DimensionError(f"matmul expects 2-D operands, got {a.ndim}-D and {b.ndim}-D")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner dimensions disagree: {a.shape} x {b.shape}")
    return a @ b


def xavier_normal_init(rows: int, cols: int, rng: Rng) -> np.ndarray:
    """Draw a (rows, cols) weight matrix from N(0, 2/(rows+cols))."""
    if rows <= 0 or cols <= 0:
        raise DimensionError(f"matrix dimensions must be positive, got ({rows}, {cols})")
    std = math.sqrt(2.0 / (rows + cols))
    return rng.generator.normal(loc=0.0, scale=std, size=(rows, cols))


def average_ranks(values: np.ndarray) -> np.ndarray:
    """Rank data from 1..n, assigning tied values the mean of their ranks."""
    values = np.asarray(values, dtype=np.float64)
    n = values.size
    order = np.argsort(values, kind="stable")
    ranks = np.empty(n, dtype=np.float64)
    sorted_vals = values[order]
    i = 0
    while i < n:
        j = i
        while j + 1 < n and sorted_vals[j + 1] == sorted_vals[i]:
            j += 1
        # ties share the average of the ranks they span
        ranks[order[i : j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def pearson(x: np.ndarray, y: np.ndarray) -> float:
    """Pearson correlation of two equal-length vectors."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.shape != y.shape or x.ndim != 1:
        raise DimensionError("pearson expects two 1-D vectors of equal length")
    dx = x - x.mean()
    dy = y - y.mean()
    sx = math.sqrt(float(dx @ dx))
    sy = math.sqrt(float(dy @ dy))
    if sx == 0.0 or sy == 0.0:
        raise UndefinedCorrelationError("zero variance input")
    return float(dx @ dy) / (sx * sy)


def spearman(x: np.ndarray, y: np.ndarray) -> float:
    """Spearman rank correlation (average ranks for ties).

    Raises:
        UndefinedCorrelationError: when either input has zero rank variance.
        DimensionError: for mismatched lengths or fewer than 3 points.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if x.ndim != 1 or y.ndim != 1 or x.size != y.size:
        raise DimensionError("spearman expects two 1-D vectors of equal length")
    if x.size < 3:
        raise DimensionError("spearman needs at least 3 observations")
    return pearson(average_ranks(x), average_ranks(y))


def lower_median(values: np.ndarray) -> float:
    """Median that returns the lower of the two central order statistics.

    For odd counts this is the ordinary median; for even counts the value at
    sorted position (n - 1) // 2 is returned rather than an interpolation, so
    the result is always an observed value.
    """
    values = np.asarray(values, dtype=np.float64)
    if values.size == 0:
        raise ValueError("lower_median of empty sequence")
    return float(np.sort(values)[(values.size - 1) // 2])


def normal_cdf(z: float) -> float:
    """Standard normal CDF via the complementary error function."""
    return 0.5 * math.erfc(-z / math.sqrt(2.0))


def sample_skewness(values: np.ndarray) -> float:
    """Skewness m3 / m2^1.5 with population moments (zero for symmetric data)."""
    values = np.asarray(values, dtype=np.float64)
    d = values - values.mean()
    m2 = float(np.mean(d * d))
    if m2 == 0.0:
        return 0.0
    m3 = float(np.mean(d * d * d))
    return m3 / m2**1.5


def sample_excess_kurtosis(values: np.ndarray) -> float:
    """Excess kurtosis m4 / m2^2 - 3 with population moments."""
    values = np.asarray(values, dtype=np.float64)
    d = values - values.mean()
    m2 = float(np.mean(d * d))
    if m2 == 0.0:
        return 0.0
    m4 = float(np.mean(d**4))
    return m4 / m2**2 - 3.0
