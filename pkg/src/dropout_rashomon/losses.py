"""Per-dataset losses evaluated on network outputs, with gradients w.r.t. the logits."""
from __future__ import annotations

import enum

import numpy as np

from .errors import InvalidArgument
from .numerics import softmax


class LossKind(str, enum.Enum):
    CROSS_ENTROPY = "cross-entropy"
    BRIER = "brier"
    MSE = "mse"
    SSE = "sse"

    @property
    def needs_softmax(self) -> bool:
        return self in (LossKind.CROSS_ENTROPY, LossKind.BRIER)


def check_compatible(loss: LossKind, head: str) -> None:
    loss = LossKind(loss)
    if loss.needs_softmax and head != "softmax":
        raise InvalidArgument(f"loss {loss.value!r} requires a softmax head, got {head!r}")
    if not loss.needs_softmax and head != "linear":
        raise InvalidArgument(f"loss {loss.value!r} requires a linear head, got {head!r}")


def _onehot(labels, c: int) -> np.ndarray:
    labels = np.asarray(labels)
    if labels.ndim != 1 or not np.issubdtype(labels.dtype, np.integer):
        raise InvalidArgument("classification labels must be a 1-d integer array")
    if labels.size and (labels.min() < 0 or labels.max() >= c):
        raise InvalidArgument(f"labels must lie in [0, {c})")
    out = np.zeros((labels.size, c))
    out[np.arange(labels.size), labels] = 1.0
    return out


def _targets(y, n: int, c: int) -> np.ndarray:
    t = np.asarray(y, dtype=np.float64).reshape(n, -1)
    if t.shape[1] != c:
        raise InvalidArgument(f"targets have {t.shape[1]} columns, network outputs {c}")
    return t


def loss_and_grad(loss: LossKind, logits: np.ndarray, y, want_grad: bool = True):
    """Loss value and d(loss)/d(logits) for a batch of pre-head outputs.

    cross-entropy, brier and mse are means over samples (brier and mse use
    the squared Euclidean norm per sample); sse is the plain sum.
    """
    loss = LossKind(loss)
    n, c = logits.shape
    if n == 0:
        raise InvalidArgument("empty batch")
    grad = None
    if loss is LossKind.CROSS_ENTROPY:
        onehot = _onehot(y, c)
        zmax = logits.max(axis=1, keepdims=True)
        lse = zmax[:, 0] + np.log(np.exp(logits - zmax).sum(axis=1))
        value = float(np.mean(lse - np.sum(logits * onehot, axis=1)))
        if want_grad:
            grad = (softmax(logits) - onehot) / n
    elif loss is LossKind.BRIER:
        onehot = _onehot(y, c)
        s = softmax(logits)
        diff = s - onehot
        value = float(np.mean(np.sum(diff**2, axis=1)))
        if want_grad:
            g = 2.0 * diff / n
            grad = s * (g - np.sum(s * g, axis=1, keepdims=True))
    else:
        diff = logits - _targets(y, n, c)
        sq = np.sum(diff**2, axis=1)
        if loss is LossKind.MSE:
            value = float(np.mean(sq))
            if want_grad:
                grad = 2.0 * diff / n
        else:
            value = float(np.sum(sq))
            if want_grad:
                grad = 2.0 * diff
    return value, grad
