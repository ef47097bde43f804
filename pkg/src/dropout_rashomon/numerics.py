"""Shared numeric helpers: seeded streams, dropout diagonals, simplex utilities.

Dense matrices are plain float64 ``numpy`` arrays; dropout matrices are kept
as their diagonals (1-d arrays) and never materialized as d x d storage.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Iterable, Sequence, TypeVar

import numpy as np

from .errors import InvalidArgument

T = TypeVar("T")
R = TypeVar("R")

SIMPLEX_TOL = 1e-9
_U64 = 2**64


def as_matrix(a, name: str = "matrix") -> np.ndarray:
    """Return ``a`` as a finite 2-d float64 array, raising on NaN/Inf."""
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 2:
        raise InvalidArgument(f"{name} must be 2-d, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidArgument(f"{name} contains non-finite entries")
    return arr


def as_vector(a, name: str = "vector") -> np.ndarray:
    arr = np.asarray(a, dtype=np.float64)
    if arr.ndim != 1:
        raise InvalidArgument(f"{name} must be 1-d, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidArgument(f"{name} contains non-finite entries")
    return arr


class Rng:
    """Counter-based random stream keyed by ``(seed, stream path)``.

    Streams are derived, never advanced, so the draws for task ``i`` depend
    only on the master seed and ``i``; worker count cannot change results.
    """

    def __init__(self, seed: int, stream: Sequence[int] = ()):
        seed = int(seed)
        if not 0 <= seed < _U64:
            raise InvalidArgument(f"seed must be a 64-bit unsigned integer, got {seed}")
        stream = tuple(int(s) for s in stream)
        if any(not 0 <= s < _U64 for s in stream):
            raise InvalidArgument(f"stream ids must be 64-bit unsigned, got {stream}")
        self.seed = seed
        self.stream = stream
        ss = np.random.SeedSequence(seed, spawn_key=stream)
        self.generator = np.random.Generator(np.random.Philox(ss))

    def derive(self, *index: int) -> "Rng":
        """Independent sub-stream for a task index (or index path)."""
        return Rng(self.seed, self.stream + tuple(index))

    def __repr__(self):
        return f"Rng(seed={self.seed}, stream={self.stream})"


def softmax(logits) -> np.ndarray:
    """Stable exponential normalization along the last axis."""
    z = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(z)):
        raise InvalidArgument("softmax input must be finite")
    z = z - np.max(z, axis=-1, keepdims=True)
    e = np.exp(z)
    return e / np.sum(e, axis=-1, keepdims=True)


def is_simplex(s, tol: float = SIMPLEX_TOL) -> bool:
    s = np.asarray(s, dtype=np.float64)
    if s.size == 0 or not np.all(np.isfinite(s)):
        return False
    if np.any(s < -tol) or np.any(s > 1 + tol):
        return False
    return bool(np.all(np.abs(np.sum(s, axis=-1) - 1.0) <= tol))


def sample_bernoulli_diag(d: int, p: float, rng: Rng) -> np.ndarray:
    """Diagonal of a Bernoulli dropout matrix: each entry is 0 with probability ``p``."""
    if not 0.0 <= p <= 1.0:
        raise InvalidArgument(f"dropout rate must lie in [0, 1], got {p}")
    if d < 0:
        raise InvalidArgument(f"dimension must be non-negative, got {d}")
    u = rng.generator.random(d)
    return (u >= p).astype(np.float64)


def sample_gaussian_diag(d: int, alpha: float, rng: Rng) -> np.ndarray:
    """Diagonal of a Gaussian dropout matrix with entries ~ Normal(1, alpha)."""
    if not alpha >= 0.0 or not np.isfinite(alpha):
        raise InvalidArgument(f"Gaussian dropout variance must be finite and >= 0, got {alpha}")
    if d < 0:
        raise InvalidArgument(f"dimension must be non-negative, got {d}")
    if alpha == 0.0:
        return np.ones(d)
    return 1.0 + np.sqrt(alpha) * rng.generator.standard_normal(d)


def nearest_rank_quantile(values, q: float) -> float:
    """Nearest-rank quantile: the ceil(q*n)-th smallest value (1-based)."""
    v = np.sort(np.asarray(values, dtype=np.float64).ravel())
    if v.size == 0:
        raise InvalidArgument("quantile of an empty array")
    if not 0.0 <= q <= 1.0:
        raise InvalidArgument(f"quantile level must lie in [0, 1], got {q}")
    k = max(int(np.ceil(q * v.size)), 1)
    return float(v[k - 1])


def parallel_map(fn: Callable[[T], R], items: Iterable[T], threads: int = 1) -> list[R]:
    """Map ``fn`` over ``items`` and return results in input order."""
    items = list(items)
    if threads is None or threads <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=threads) as pool:
        return list(pool.map(fn, items))


def derive_seed(seed: int, *index: int) -> int:
    """Integer seed for sub-task ``index`` of ``seed``, stable across runs and platforms."""
    state = np.random.SeedSequence(int(seed), spawn_key=tuple(int(i) for i in index)).generate_state(1, np.uint64)
    return int(state[0] >> np.uint64(1))
