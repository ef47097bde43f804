"""Bundled synthetic datasets so experiments need no downloads."""
from __future__ import annotations

import numpy as np

from .errors import InvalidArgument
from .numerics import Rng
from .training import Dataset


def gaussian_blobs(n: int = 300, d: int = 2, n_classes: int = 2, separation: float = 2.0,
                   seed: int = 0) -> Dataset:
    """Isotropic unit-variance Gaussian classes with centers ``separation`` apart from the origin.

    Smaller ``separation`` means more class overlap. Class sizes are balanced
    (round-robin labels, then shuffled).
    """
    if n < 1 or d < 1 or n_classes < 2:
        raise InvalidArgument("need n >= 1, d >= 1 and at least two classes")
    g = Rng(seed).generator
    centers = g.standard_normal((n_classes, d))
    centers /= np.linalg.norm(centers, axis=1, keepdims=True)
    centers *= separation / 2.0
    labels = np.arange(n) % n_classes
    g.shuffle(labels)
    X = centers[labels] + g.standard_normal((n, d))
    return Dataset(X, labels.astype(np.int64), n_classes, name=f"blobs-n{n}-d{d}-c{n_classes}")


def gaussian_regression(n: int, d: int, noise: float = 0.5, seed: int = 0) -> tuple[Dataset, np.ndarray]:
    """``y = X w + noise`` with standard normal ``X`` and ``w``; returns the true ``w`` too."""
    g = Rng(seed).generator
    X = g.standard_normal((n, d))
    w = g.standard_normal(d)
    y = X @ w + noise * g.standard_normal(n)
    return Dataset(X, y, None, name=f"regression-n{n}-d{d}"), w


def orthonormal_design(n: int, d: int, seed: int = 0) -> np.ndarray:
    """An n x d matrix with X^T X = I (Q factor of a Gaussian matrix)."""
    if n < d:
        raise InvalidArgument("orthonormal columns need n >= d")
    q, _ = np.linalg.qr(Rng(seed).generator.standard_normal((n, d)))
    return q


def train_test_split(data: Dataset, test_fraction: float = 0.25, seed: int = 0) -> tuple[Dataset, Dataset]:
    perm = Rng(seed, (7,)).generator.permutation(data.n)
    n_test = int(round(test_fraction * data.n))
    if not 0 < n_test < data.n:
        raise InvalidArgument(f"test fraction {test_fraction} leaves an empty split of {data.n} samples")
    return data.subset(perm[n_test:]), data.subset(perm[:n_test])
