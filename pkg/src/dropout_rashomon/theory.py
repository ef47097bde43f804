"""Closed-form dropout bounds and Monte Carlo checks against them.

Covers the expected SSE deviation of Bernoulli dropout on ridge regression,
the Markov-type membership bounds for ridge and linear Brier models, the
high-probability loss bound for bias-free networks under Gaussian dropout,
and the sample complexity of the dropout score-variance surrogate.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Optional

import numpy as np

from .errors import InvalidArgument
from .losses import LossKind
from .models import DropoutSpec, ModelParams, NetworkSpec, apply_dropout, check_params, forward, ridge_fit
from .numerics import Rng, as_matrix, as_vector, parallel_map, sample_bernoulli_diag
from .training import Dataset, evaluate_loss

ORTHONORMAL_TOL = 1e-10


@dataclass(frozen=True)
class BoundInputs:
    """Symbols shared by the bound calculators. ``family`` picks ``p`` or ``alpha``."""

    family: str = "bernoulli"
    p: float = 0.0
    alpha: float = 0.0
    lam: float = 0.0
    M: float = 1.0
    epsilon: float = 1.0
    d: int = 1
    K: int = 1
    m: int = 1
    rho: float = 0.1
    mean_x_norm: float = 1.0
    T: int = 1
    w_max: float = 0.0

    def __post_init__(self):
        if self.family not in ("bernoulli", "gaussian"):
            raise InvalidArgument(f"unknown dropout family {self.family!r}")
        if not 0.0 <= self.p <= 1.0:
            raise InvalidArgument(f"dropout rate must lie in [0, 1], got {self.p}")
        if not self.alpha >= 0:
            raise InvalidArgument(f"dropout variance must be >= 0, got {self.alpha}")
        if not self.lam >= 0:
            raise InvalidArgument(f"ridge strength must be >= 0, got {self.lam}")
        if not self.M >= 0 or not self.mean_x_norm >= 0:
            raise InvalidArgument("norm bounds must be >= 0")

    @property
    def rate(self) -> float:
        return self.p if self.family == "bernoulli" else self.alpha


@dataclass(frozen=True)
class Bound:
    value: float   # clamped to [0, 1] for probabilities
    raw: float


@dataclass
class McResult:
    name: str
    trials: int
    statistic: float
    theory: float
    passed: bool
    seed: int
    detail: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def _check_rho(rho: float) -> float:
    if not 0.0 < rho <= 1.0:
        raise InvalidArgument(f"failure probability must lie in (0, 1], got {rho}")
    return float(rho)


def _check_eps(eps: float) -> float:
    if not eps > 0:
        raise InvalidArgument(f"epsilon must be > 0 for a membership bound, got {eps}")
    return float(eps)


def _binomial_se(q: float, trials: int) -> float:
    q = min(max(q, 0.0), 1.0)
    return math.sqrt(q * (1.0 - q) / trials)


def _draw_masks(d: int, p: float, trials: int, seed: int, threads: int) -> np.ndarray:
    root = Rng(seed)
    rows = parallel_map(lambda j: sample_bernoulli_diag(d, p, root.derive(j)), range(trials), threads)
    return np.stack(rows)


# -- expected SSE deviation of Bernoulli dropout on ridge regression ----------------------------------


def prop1_expected_epsilon(X, y, lam: float, p: float) -> float:
    """``p (1-p) w*^T diag(X^T X) w*`` for the ridge solution ``w*``."""
    if not 0.0 <= p <= 1.0:
        raise InvalidArgument(f"dropout rate must lie in [0, 1], got {p}")
    X = as_matrix(X, "X")
    w = ridge_fit(X, y, lam).weights
    return float(p * (1.0 - p) * np.sum(w * w * np.sum(X * X, axis=0)))


def sse_deviations(X, y, w, p: float, masks: np.ndarray) -> np.ndarray:
    """``L_SSE(z * w) - L_SSE((1-p) w)`` for every mask row ``z``."""
    y = as_vector(y, "y")

    def sse(v):
        r = X @ v - y
        return float(r @ r)

    ref = sse((1.0 - p) * w)
    return np.array([sse(z * w) for z in masks]) - ref


def prop1_monte_carlo(X, y, lam: float, p: float, trials: int = 20000, seed: int = 0,
                      threads: int = 1) -> McResult:
    """Sample mean of the SSE deviation against its closed-form expectation.

    Draw ``j`` uses stream ``(seed, j)``. Passes when the gap is within
    max(2% relative, 3 standard errors).
    """
    if trials < 1000:
        raise InvalidArgument(f"need at least 1000 trials, got {trials}")
    X = as_matrix(X, "X")
    w = ridge_fit(X, y, lam).weights
    theory = prop1_expected_epsilon(X, y, lam, p)
    eps = sse_deviations(X, y, w, p, _draw_masks(X.shape[1], p, trials, seed, threads))
    mean = float(np.mean(eps))
    se = float(np.std(eps, ddof=1) / math.sqrt(trials))
    tol = max(0.02 * abs(theory), 3.0 * se)
    return McResult("expected-deviation", trials, mean, theory, abs(mean - theory) <= tol, seed,
                    {"d": X.shape[1], "n": X.shape[0], "p": p, "lam": lam, "std_error": se,
                     "variance": float(np.var(eps, ddof=1)), "tolerance": tol,
                     "all_zero": bool(np.all(eps == 0.0))})


# -- membership bounds for linear models ----------------------------------------------------------------


def whiten(X) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(X S, S)`` with ``S = (X^T X)^{-1/2}`` so the new design is orthonormal."""
    X = as_matrix(X, "X")
    vals, vecs = np.linalg.eigh(X.T @ X)
    if vals.min() <= 0:
        raise InvalidArgument("cannot whiten a rank-deficient design")
    S = (vecs / np.sqrt(vals)) @ vecs.T
    return X @ S, S


def prop2_bound(inputs: BoundInputs) -> Bound:
    """Ridge ellipsoid membership: ``1 - (1 + lam) rate M / eps``."""
    eps = _check_eps(inputs.epsilon)
    raw = 1.0 - (1.0 + inputs.lam) * inputs.rate * inputs.M / eps
    return Bound(max(raw, 0.0), raw)


def prop3_bound(inputs: BoundInputs) -> Bound:
    """Linear Brier model: the ridge bound with the subtracted term scaled by ``d * mean ||x||^2``."""
    eps = _check_eps(inputs.epsilon)
    raw = 1.0 - (1.0 + inputs.lam) * inputs.rate * inputs.M * inputs.d * inputs.mean_x_norm / eps
    return Bound(max(raw, 0.0), raw)


def prop2_monte_carlo(X, y, lam: float, dropout: DropoutSpec, epsilon: float, trials: int = 5000,
                      seed: Optional[int] = None, threads: int = 1) -> McResult:
    """Frequency of ``(w - w*)^T (X^T X + lam I)(w - w*) <= eps`` over dropout draws of ``w*``.

    ``X`` must already be orthonormal (see ``whiten``). Passes when the
    frequency is at least the bound minus 3 binomial standard errors.
    """
    X = as_matrix(X, "X")
    d = X.shape[1]
    G = X.T @ X
    if np.max(np.abs(G - np.eye(d))) > ORTHONORMAL_TOL:
        raise InvalidArgument("design is not orthonormal; whiten it first")
    seed = dropout.seed if seed is None else seed
    w = ridge_fit(X, y, lam).weights
    M = float(w @ w)
    inputs = BoundInputs(dropout.family, p=dropout.param if dropout.family == "bernoulli" else 0.0,
                         alpha=dropout.param if dropout.family == "gaussian" else 0.0,
                         lam=lam, M=M, epsilon=epsilon, d=d)
    bound = prop2_bound(inputs)
    root = Rng(seed)
    Z = np.stack(parallel_map(lambda j: dropout.sample_diag(d, root.derive(j)), range(trials), threads))
    delta = (Z - 1.0) * w
    q = np.einsum("ti,ij,tj->t", delta, G + lam * np.eye(d), delta)
    freq = float(np.mean(q <= epsilon))
    slack = 3.0 * _binomial_se(bound.value, trials)
    return McResult("ridge-ellipsoid", trials, freq, bound.value, freq >= bound.raw - slack, seed,
                    {"d": d, "family": dropout.family, "rate": dropout.param, "lam": lam, "M": M,
                     "epsilon": epsilon, "bound_raw": bound.raw, "slack": slack})


# -- networks ---------------------------------------------------------------------------------------------


def prop4_bound(inputs: BoundInputs) -> float:
    """``rho^{-1} M^K mean||x||^2 ((m alpha + 1)^K - 1)``."""
    rho = _check_rho(inputs.rho)
    if inputs.K < 1:
        raise InvalidArgument("need at least one layer")
    K = inputs.K
    return inputs.M**K * inputs.mean_x_norm * ((inputs.m * inputs.alpha + 1.0) ** K - 1.0) / rho


def network_bound_inputs(spec: NetworkSpec, params: ModelParams, data: Dataset, alpha: float,
                         rho: float) -> BoundInputs:
    """Bound inputs read off a trained network: M is the largest squared Frobenius norm
    and m the largest layer output width."""
    check_params(spec, params)
    M = max(float(np.sum(w * w)) for w in params.weights)
    mean_x = float(np.mean(np.sum(data.X * data.X, axis=1)))
    return BoundInputs("gaussian", alpha=alpha, M=M, K=spec.n_layers, m=max(spec.widths[1:]), rho=rho,
                       mean_x_norm=mean_x, d=spec.n_inputs)


def _network_loss(spec: NetworkSpec) -> LossKind:
    return LossKind.BRIER if spec.head == "softmax" else LossKind.MSE


def prop4_monte_carlo(spec: NetworkSpec, base: ModelParams, data: Dataset, alpha: float, rho: float,
                      trials: int = 2000, seed: int = 0, threads: int = 1) -> McResult:
    """Frequency of {loss deviation <= bound} under Gaussian dropout on a bias-free network.

    Uses the Brier loss for a softmax head and MSE for a linear head. Passes
    when the frequency is at least ``1 - rho`` minus 3 binomial standard errors.
    """
    if base.biases is not None:
        raise InvalidArgument("the network bound applies to bias-free networks")
    if data.n_classes is None and spec.head == "softmax":
        raise InvalidArgument("softmax network needs class labels")
    inputs = network_bound_inputs(spec, base, data, alpha, rho)
    bound = prop4_bound(inputs)
    loss = _network_loss(spec)
    base_loss = evaluate_loss(spec, base, data, loss)
    drop = DropoutSpec.gaussian(alpha, seed)
    root = Rng(seed)

    def deviation(j):
        return evaluate_loss(spec, apply_dropout(base, drop, root.derive(j)), data, loss) - base_loss

    dev = np.array(parallel_map(deviation, range(trials), threads))
    freq = float(np.mean(dev <= bound))
    target = 1.0 - rho
    slack = 3.0 * _binomial_se(target, trials)
    return McResult("network-bound", trials, freq, target, freq >= target - slack, seed,
                    {"alpha": alpha, "rho": rho, "bound": bound, "M": inputs.M, "K": inputs.K, "m": inputs.m,
                     "mean_x_norm": inputs.mean_x_norm, "loss": loss.value, "slack": slack,
                     "median_deviation": float(np.median(dev)), "max_deviation": float(np.max(dev))})


# -- score-variance surrogate -------------------------------------------------------------------------------


def prop5_bound(T: int, rho: float, alpha: float, d: int, w_max: float, n: int = 1) -> float:
    """Deviation bound ``s (1 + s)`` of the surrogate variance estimate with
    ``s = 6 n exp(-alpha d w_max^2 / 8) + sqrt(ln(2 n / rho) / (2 T))``.

    ``n = 1`` is the single-sample statement; larger ``n`` is the union bound
    over ``n`` samples.
    """
    rho = _check_rho(rho)
    if T < 1 or n < 1:
        raise InvalidArgument("T and n must be >= 1")
    if not alpha >= 0 or d < 1:
        raise InvalidArgument("need alpha >= 0 and d >= 1")
    expo = alpha * d * w_max * w_max / 8.0
    s = 6.0 * n * math.exp(-expo) + math.sqrt(math.log(2.0 * n / rho) / (2.0 * T))
    return s * (1.0 + s)


def surrogate_variance_estimate(spec: NetworkSpec, base: ModelParams, x, y: int, alpha: float, T: int,
                                seed: int = 0) -> tuple[float, float]:
    """``mu_hat`` = mean true-class score over ``T`` Gaussian-dropout models; ``v_hat = mu_hat (1 - mu_hat)``."""
    if T < 1:
        raise InvalidArgument("T must be >= 1")
    if spec.head != "softmax" or not 0 <= y < spec.n_outputs:
        raise InvalidArgument("surrogate needs a softmax head and a valid class")
    drop = DropoutSpec.gaussian(alpha, seed)
    root = Rng(seed)
    scores = np.array([forward(spec, apply_dropout(base, drop, root.derive(t)), x)[y] for t in range(T)])
    mu = float(np.clip(np.mean(scores), 0.0, 1.0))
    return mu, mu * (1.0 - mu)
