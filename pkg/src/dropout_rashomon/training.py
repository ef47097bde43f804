"""Empirical risk, mini-batch SGD, and the re-training baseline sampler."""
from __future__ import annotations

import logging
from dataclasses import dataclass, replace
from typing import Optional, Sequence

import numpy as np

from .errors import DatasetError, InvalidArgument, TrainingDiverged
from .losses import LossKind, check_compatible, loss_and_grad
from .models import ModelParams, NetworkSpec, _batch, _forward_cache, check_params, forward, init_params, loss_and_gradient
from .numerics import Rng, as_matrix, parallel_map

log = logging.getLogger(__name__)


@dataclass
class Dataset:
    """Features ``X`` (n x d) with integer class labels or real targets.

    ``n_classes`` is ``None`` for regression data.
    """

    X: np.ndarray
    y: np.ndarray
    n_classes: Optional[int] = None
    name: str = "dataset"

    def __post_init__(self):
        self.X = as_matrix(self.X, "X")
        self.y = np.asarray(self.y)
        if self.X.shape[0] < 1:
            raise DatasetError("dataset is empty")
        if self.y.shape[0] != self.X.shape[0]:
            raise DatasetError(f"{self.y.shape[0]} labels for {self.X.shape[0]} samples")
        if self.n_classes is not None:
            if not np.issubdtype(self.y.dtype, np.integer):
                if not np.all(np.equal(np.mod(self.y, 1), 0)):
                    raise DatasetError("class labels must be integers")
                self.y = self.y.astype(np.int64)
            if self.y.min() < 0 or self.y.max() >= self.n_classes:
                raise DatasetError(f"labels must lie in [0, {self.n_classes})")
        else:
            self.y = self.y.astype(np.float64)

    @property
    def n(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.X[idx], self.y[idx], self.n_classes, self.name)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 100
    learning_rate: float = 0.001
    batch_size: int = 100
    seed: int = 0
    loss: LossKind = LossKind.CROSS_ENTROPY
    l2_penalty: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "loss", LossKind(self.loss))
        if self.epochs < 1:
            raise InvalidArgument(f"epochs must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise InvalidArgument(f"batch size must be >= 1, got {self.batch_size}")
        if not self.learning_rate >= 0:
            raise InvalidArgument(f"learning rate must be >= 0, got {self.learning_rate}")
        if not self.l2_penalty >= 0:
            raise InvalidArgument(f"l2 penalty must be >= 0, got {self.l2_penalty}")


def evaluate_loss(spec: NetworkSpec, params: ModelParams, data: Dataset, loss: LossKind) -> float:
    """Empirical risk of ``params`` on ``data`` (sse is the unaveraged sum)."""
    check_params(spec, params)
    check_compatible(loss, spec.head)
    X, _ = _batch(spec, data.X)
    pre, _ = _forward_cache(spec, params, X)
    return loss_and_grad(loss, pre[-1], data.y, want_grad=False)[0]


def accuracy(spec: NetworkSpec, params: ModelParams, data: Dataset) -> float:
    pred = np.argmax(forward(spec, params, data.X), axis=1)
    return float(np.mean(pred == data.y))


def _finite(params: ModelParams) -> bool:
    return bool(np.all(np.isfinite(params.flat())))


def sgd_train(spec: NetworkSpec, init: ModelParams, data: Dataset, cfg: TrainConfig) -> ModelParams:
    """Plain shuffled mini-batch SGD; the final partial batch is kept.

    The shuffle order is drawn from ``cfg.seed``. Raises ``TrainingDiverged``
    carrying the last finite parameters if the loss blows up.
    """
    check_params(spec, init)
    check_compatible(cfg.loss, spec.head)
    params = init.copy()
    if cfg.learning_rate == 0:
        return params
    with np.errstate(over="ignore", invalid="ignore"):
        return _sgd_loop(spec, params, data, cfg)


def _sgd_loop(spec, params, data, cfg):
    rng = Rng(cfg.seed, (1,)).generator
    n = data.n
    lr, lam = cfg.learning_rate, cfg.l2_penalty
    for epoch in range(cfg.epochs):
        order = rng.permutation(n)
        for start in range(0, n, cfg.batch_size):
            idx = order[start:start + cfg.batch_size]
            value, grad = loss_and_gradient(spec, params, data.X[idx], data.y[idx], cfg.loss)
            if not np.isfinite(value):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}", params, epoch)
            new_w = [w - lr * (g + 2.0 * lam * w) for w, g in zip(params.weights, grad.weights)]
            new_b = None
            if params.biases is not None:
                new_b = [b - lr * g for b, g in zip(params.biases, grad.biases)]
            candidate = ModelParams(new_w, new_b)
            if not _finite(candidate):
                raise TrainingDiverged(f"non-finite weights at epoch {epoch}", params, epoch)
            params = candidate
    if not np.isfinite(evaluate_loss(spec, params, data, cfg.loss)):
        raise TrainingDiverged("non-finite final loss", params, cfg.epochs)
    return params


@dataclass
class RetrainEntry:
    seed: int
    epochs: int
    params: Optional[ModelParams]
    loss: float
    diagnostic: str = ""

    @property
    def ok(self) -> bool:
        return self.params is not None


def train_from_seed(spec: NetworkSpec, data: Dataset, cfg: TrainConfig) -> ModelParams:
    """Fresh initialization from ``cfg.seed`` followed by ``sgd_train``."""
    return sgd_train(spec, init_params(spec, Rng(cfg.seed, (0,))), data, cfg)


def retrain_sampler(spec: NetworkSpec, data: Dataset, cfg_template: TrainConfig,
                    seeds: Sequence[int], epochs_grid: Sequence[int],
                    threads: int = 1) -> list[RetrainEntry]:
    """Train one model per ``(seed, epochs)`` pair, in grid order.

    Diverged runs come back as entries with ``params=None`` and a diagnostic.
    """
    if not seeds or not epochs_grid:
        raise InvalidArgument("re-training needs at least one seed and one epoch count")
    tasks = [(int(s), int(e)) for s in seeds for e in epochs_grid]

    def run(task):
        seed, epochs = task
        cfg = replace(cfg_template, seed=seed, epochs=epochs)
        try:
            params = train_from_seed(spec, data, cfg)
        except TrainingDiverged as exc:
            log.warning("retrain seed=%d epochs=%d diverged: %s", seed, epochs, exc)
            return RetrainEntry(seed, epochs, None, float("nan"), f"diverged: {exc}")
        return RetrainEntry(seed, epochs, params, evaluate_loss(spec, params, data, cfg.loss))

    return parallel_map(run, tasks, threads)
