"""Dense feed-forward networks, closed-form ridge regression and weight dropout.

A network maps ``x`` to ``W_K^T s(... s(W_1^T x))`` with ``W_k`` of shape
``(m_{k-1}, m_k)``; a softmax head turns the final layer into class scores.
"""
from __future__ import annotations

import io
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import InvalidArgument, SingularMatrixError
from .losses import LossKind, check_compatible, loss_and_grad
from .numerics import Rng, as_matrix, as_vector, sample_bernoulli_diag, sample_gaussian_diag, softmax

FORMAT_VERSION = 1

ACTIVATIONS = ("relu", "tanh")
HEADS = ("softmax", "linear")


@dataclass(frozen=True)
class NetworkSpec:
    widths: tuple[int, ...]
    activation: str = "relu"
    head: str = "softmax"
    use_bias: bool = False

    def __post_init__(self):
        object.__setattr__(self, "widths", tuple(int(w) for w in self.widths))
        if len(self.widths) < 2:
            raise InvalidArgument("a network needs at least an input and an output width")
        if any(w < 1 for w in self.widths):
            raise InvalidArgument(f"all layer widths must be >= 1, got {self.widths}")
        if self.activation not in ACTIVATIONS:
            raise InvalidArgument(f"unknown activation {self.activation!r}")
        if self.head not in HEADS:
            raise InvalidArgument(f"unknown output head {self.head!r}")

    @property
    def n_layers(self) -> int:
        return len(self.widths) - 1

    @property
    def n_inputs(self) -> int:
        return self.widths[0]

    @property
    def n_outputs(self) -> int:
        return self.widths[-1]

    def to_dict(self) -> dict:
        return {
            "widths": list(self.widths),
            "activation": self.activation,
            "head": self.head,
            "use_bias": self.use_bias,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NetworkSpec":
        return cls(tuple(d["widths"]), d.get("activation", "relu"), d.get("head", "softmax"),
                   bool(d.get("use_bias", False)))


@dataclass
class ModelParams:
    weights: list[np.ndarray]
    biases: Optional[list[np.ndarray]] = None

    def copy(self) -> "ModelParams":
        return ModelParams([w.copy() for w in self.weights],
                           None if self.biases is None else [b.copy() for b in self.biases])

    def flat(self) -> np.ndarray:
        parts = [w.ravel() for w in self.weights]
        if self.biases is not None:
            parts += [b.ravel() for b in self.biases]
        return np.concatenate(parts)

    @property
    def n_weights(self) -> int:
        return int(sum(w.size for w in self.weights))

    def allclose(self, other: "ModelParams", **kw) -> bool:
        a, b = self.flat(), other.flat()
        return a.shape == b.shape and bool(np.allclose(a, b, **kw))

    def equal(self, other: "ModelParams") -> bool:
        a, b = self.flat(), other.flat()
        return a.shape == b.shape and bool(np.array_equal(a, b))


@dataclass(frozen=True)
class DropoutSpec:
    """Bernoulli(rate) or Gaussian(variance) multiplicative weight noise."""

    family: str
    param: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.family not in ("bernoulli", "gaussian"):
            raise InvalidArgument(f"unknown dropout family {self.family!r}")
        if self.family == "bernoulli" and not 0.0 <= self.param <= 1.0:
            raise InvalidArgument(f"Bernoulli dropout rate must lie in [0, 1], got {self.param}")
        if self.family == "gaussian" and not (self.param >= 0.0 and np.isfinite(self.param)):
            raise InvalidArgument(f"Gaussian dropout variance must be >= 0, got {self.param}")

    @classmethod
    def bernoulli(cls, p: float, seed: int = 0) -> "DropoutSpec":
        return cls("bernoulli", float(p), seed)

    @classmethod
    def gaussian(cls, alpha: float, seed: int = 0) -> "DropoutSpec":
        return cls("gaussian", float(alpha), seed)

    def sample_diag(self, d: int, rng: Rng) -> np.ndarray:
        if self.family == "bernoulli":
            return sample_bernoulli_diag(d, self.param, rng)
        return sample_gaussian_diag(d, self.param, rng)

    def with_seed(self, seed: int) -> "DropoutSpec":
        return DropoutSpec(self.family, self.param, seed)

    def to_dict(self) -> dict:
        return {"family": self.family, "param": self.param, "seed": self.seed}


def check_params(spec: NetworkSpec, params: ModelParams) -> None:
    if len(params.weights) != spec.n_layers:
        raise InvalidArgument(f"expected {spec.n_layers} weight matrices, got {len(params.weights)}")
    for k, w in enumerate(params.weights):
        shape = (spec.widths[k], spec.widths[k + 1])
        if w.shape != shape:
            raise InvalidArgument(f"weights[{k}] has shape {w.shape}, expected {shape}")
    if spec.use_bias:
        if params.biases is None or len(params.biases) != spec.n_layers:
            raise InvalidArgument("network uses biases but params carry none")
        for k, b in enumerate(params.biases):
            if b.shape != (spec.widths[k + 1],):
                raise InvalidArgument(f"biases[{k}] has shape {b.shape}, expected {(spec.widths[k + 1],)}")


def _act(name, z):
    return np.maximum(z, 0.0) if name == "relu" else np.tanh(z)


def _act_grad(name, z, a):
    return (z > 0.0).astype(np.float64) if name == "relu" else 1.0 - a**2


def _batch(spec: NetworkSpec, x) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    X = x[None, :] if single else x
    if X.ndim != 2 or X.shape[1] != spec.n_inputs:
        raise InvalidArgument(f"input has shape {x.shape}, network expects {spec.n_inputs} features")
    return X, single


def _forward_cache(spec, params, X):
    pre, post = [], [X]
    a = X
    for k, w in enumerate(params.weights):
        z = a @ w
        if spec.use_bias:
            z = z + params.biases[k]
        pre.append(z)
        if k < spec.n_layers - 1:
            a = _act(spec.activation, z)
            post.append(a)
    return pre, post


def logits(spec: NetworkSpec, params: ModelParams, x) -> np.ndarray:
    """Final-layer outputs before the head."""
    check_params(spec, params)
    X, single = _batch(spec, x)
    z = _forward_cache(spec, params, X)[0][-1]
    return z[0] if single else z


def forward(spec: NetworkSpec, params: ModelParams, x) -> np.ndarray:
    """Network output for one sample (1-d) or a batch (rows)."""
    z = logits(spec, params, x)
    return softmax(z) if spec.head == "softmax" else z


def _backprop(spec, params, pre, post, dlogits) -> ModelParams:
    K = spec.n_layers
    gw: list = [None] * K
    gb: list = [None] * K
    delta = dlogits
    for k in range(K - 1, -1, -1):
        gw[k] = post[k].T @ delta
        gb[k] = delta.sum(axis=0)
        if k > 0:
            delta = (delta @ params.weights[k].T) * _act_grad(spec.activation, pre[k - 1], post[k])
    return ModelParams(gw, gb if spec.use_bias else None)


def loss_and_gradient(spec: NetworkSpec, params: ModelParams, X, y, loss: LossKind):
    check_params(spec, params)
    check_compatible(loss, spec.head)
    X, _ = _batch(spec, X)
    if X.shape[0] == 0:
        raise InvalidArgument("empty batch")
    pre, post = _forward_cache(spec, params, X)
    value, dlogits = loss_and_grad(loss, pre[-1], y)
    return value, _backprop(spec, params, pre, post, dlogits)


def gradient(spec: NetworkSpec, params: ModelParams, X, y, loss: LossKind) -> ModelParams:
    """Gradient of the batch loss w.r.t. every weight (and bias)."""
    return loss_and_gradient(spec, params, X, y, loss)[1]


def score_gradient(spec: NetworkSpec, params: ModelParams, x, k: int) -> tuple[float, ModelParams]:
    """Value and parameter gradient of output coordinate ``k`` at a single input."""
    check_params(spec, params)
    X, _ = _batch(spec, x)
    pre, post = _forward_cache(spec, params, X[:1])
    z = pre[-1][0]
    if spec.head == "softmax":
        s = softmax(z)
        value = float(s[k])
        dz = -s[k] * s
        dz[k] += s[k]
    else:
        value = float(z[k])
        dz = np.zeros_like(z)
        dz[k] = 1.0
    return value, _backprop(spec, params, pre, post, dz[None, :])


def apply_dropout(params: ModelParams, dropout: DropoutSpec, rng: Rng) -> ModelParams:
    """New params with ``W_k <- D_k W_k`` for an independent diagonal ``D_k`` per layer.

    ``D_k`` has size ``m_{k-1}`` (it scales the rows, i.e. the layer inputs).
    Biases are copied unchanged.
    """
    weights = []
    for k, w in enumerate(params.weights):
        z = dropout.sample_diag(w.shape[0], rng.derive(k))
        weights.append(w * z[:, None])
    biases = None if params.biases is None else [b.copy() for b in params.biases]
    return ModelParams(weights, biases)


def init_params(spec: NetworkSpec, rng: Rng) -> ModelParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights; biases start at zero."""
    weights = []
    for k in range(spec.n_layers):
        fan_in, fan_out = spec.widths[k], spec.widths[k + 1]
        bound = 1.0 / np.sqrt(fan_in)
        weights.append(rng.derive(k).generator.uniform(-bound, bound, size=(fan_in, fan_out)))
    biases = [np.zeros(w) for w in spec.widths[1:]] if spec.use_bias else None
    return ModelParams(weights, biases)


@dataclass
class RidgeSolution:
    weights: np.ndarray
    lam: float

    def as_params(self) -> tuple[NetworkSpec, ModelParams]:
        spec = NetworkSpec((self.weights.size, 1), head="linear")
        return spec, ModelParams([self.weights.reshape(-1, 1).copy()])


def ridge_fit(X, y, lam: float) -> RidgeSolution:
    """Solve ``(X^T X + lam I) w = X^T y`` by a dense LU factorization."""
    X = as_matrix(X, "X")
    y = as_vector(y, "y")
    n, d = X.shape
    if n < 1 or d < 1:
        raise InvalidArgument("ridge regression needs n >= 1 and d >= 1")
    if y.size != n:
        raise InvalidArgument(f"y has {y.size} entries, X has {n} rows")
    if not lam >= 0:
        raise InvalidArgument(f"regularization strength must be >= 0, got {lam}")
    if lam == 0 and np.linalg.matrix_rank(X) < d:
        raise SingularMatrixError("X^T X is singular (rank-deficient X with lambda = 0)")
    A = X.T @ X + lam * np.eye(d)
    try:
        w = np.linalg.solve(A, X.T @ y)
    except np.linalg.LinAlgError as exc:
        raise SingularMatrixError(str(exc)) from exc
    return RidgeSolution(w, float(lam))


def save_model(path, spec: NetworkSpec, params: ModelParams) -> None:
    """Write spec + raw float64 arrays to an ``.npz`` file (bit-exact round trip)."""
    check_params(spec, params)
    header = {"format_version": FORMAT_VERSION, "spec": spec.to_dict(),
              "has_biases": params.biases is not None}
    arrays = {"header": np.array(json.dumps(header, sort_keys=True))}
    for k, w in enumerate(params.weights):
        arrays[f"W{k}"] = np.ascontiguousarray(w, dtype=np.float64)
    if params.biases is not None:
        for k, b in enumerate(params.biases):
            arrays[f"b{k}"] = np.ascontiguousarray(b, dtype=np.float64)
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    Path(path).write_bytes(buf.getvalue())


def load_model(path) -> tuple[NetworkSpec, ModelParams]:
    with np.load(path, allow_pickle=False) as f:
        header = json.loads(str(f["header"]))
        if header.get("format_version") != FORMAT_VERSION:
            raise InvalidArgument(f"unsupported model format version {header.get('format_version')}")
        spec = NetworkSpec.from_dict(header["spec"])
        weights = [f[f"W{k}"].copy() for k in range(spec.n_layers)]
        biases = [f[f"b{k}"].copy() for k in range(spec.n_layers)] if header["has_biases"] else None
    params = ModelParams(weights, biases)
    check_params(spec, params)
    return spec, params
