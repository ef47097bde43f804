"""Predictive-multiplicity metrics over a (samples x members x classes) score tensor.

Score-based: viable prediction range, score std/var, Rashomon Capacity.
Decision-based: disagreement, ambiguity, discrepancy. Decisions are argmax
with ties broken by the lowest class index.
"""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .errors import InvalidArgument
from .numerics import SIMPLEX_TOL, nearest_rank_quantile

REPORT_VERSION = 1
PER_SAMPLE_FIELDS = ("vpr", "score_std", "score_var", "capacity_bits", "effective_classes",
                     "disagreement", "disagreement_pair")
CSV_COLUMNS = ("sample_id", "vpr", "std", "var", "capacity_bits", "effective_classes", "disagreement",
               "disagreement_pair")


class ScoreTensor:
    """``scores[i, j]`` is the class-score simplex of sample ``i`` under member ``j``."""

    def __init__(self, scores, base_index: int = 0, validate: bool = True):
        scores = np.asarray(scores, dtype=np.float64)
        if scores.ndim != 3:
            raise InvalidArgument(f"score tensor must be 3-d (n, m, c), got shape {scores.shape}")
        n, m, c = scores.shape
        if m < 1 or c < 2:
            raise InvalidArgument("score tensor needs at least one member and two classes")
        if not 0 <= base_index < m:
            raise InvalidArgument(f"base index {base_index} out of range for {m} members")
        if validate:
            if not np.all(np.isfinite(scores)):
                raise InvalidArgument("scores must be finite")
            if np.any(scores < -SIMPLEX_TOL) or np.any(scores > 1 + SIMPLEX_TOL):
                raise InvalidArgument("scores must lie in [0, 1]")
            if np.any(np.abs(scores.sum(axis=2) - 1.0) > SIMPLEX_TOL):
                raise InvalidArgument("score rows must sum to 1")
        self.scores = scores
        self.base_index = int(base_index)

    @property
    def n(self) -> int:
        return self.scores.shape[0]

    @property
    def m(self) -> int:
        return self.scores.shape[1]

    @property
    def c(self) -> int:
        return self.scores.shape[2]

    def decisions(self) -> np.ndarray:
        return np.argmax(self.scores, axis=2)

    def select_members(self, idx) -> "ScoreTensor":
        idx = list(idx)
        if self.base_index not in idx:
            raise InvalidArgument("member selection must keep the base")
        return ScoreTensor(self.scores[:, idx], idx.index(self.base_index), validate=False)


def vpr(t: ScoreTensor, i: int) -> float:
    """Largest score spread across members (max over classes of the per-class range)."""
    s = t.scores[i]
    if t.c == 2:
        return float(s[:, 1].max() - s[:, 1].min())
    return float(np.max(s.max(axis=0) - s.min(axis=0)))


def tracked_scores(t: ScoreTensor, i: int) -> np.ndarray:
    """Scalar score followed per member: positive class for c=2, else the base argmax class."""
    if t.c == 2:
        return t.scores[i, :, 1]
    k = int(np.argmax(t.scores[i, t.base_index]))
    return t.scores[i, :, k]


def score_stats(t: ScoreTensor, i: int) -> tuple[float, float]:
    """Population (divide-by-m) std and variance of the tracked score."""
    x = tracked_scores(t, i)
    v = float(np.var(x - x[0]))
    return float(np.sqrt(v)), v


@dataclass
class CapacityResult:
    bits: float
    effective_classes: float
    converged: bool
    iterations: int


def _reduce_channel(P: np.ndarray) -> np.ndarray:
    """Drop rows that cannot change capacity: duplicates, and for two outputs every
    row strictly between the two extreme rows (KL is convex in its first argument)."""
    if P.shape[1] == 2:
        lo, hi = int(np.argmin(P[:, 1])), int(np.argmax(P[:, 1]))
        return P[[lo]] if P[lo, 1] == P[hi, 1] else P[[lo, hi]]
    return np.unique(P, axis=0)


POLISH_EVERY = 50


def _bounds(P: np.ndarray, logP: np.ndarray, pos: np.ndarray, r: np.ndarray) -> tuple[float, float, np.ndarray]:
    """Lower and upper capacity bounds (nats) at input law ``r``, and the divergences ``D(P_x || rP)``."""
    q = r @ P
    logq = np.log(np.where(q > 0, q, 1.0))
    D = np.sum(np.where(pos, P * (logP - logq), 0.0), axis=1)
    Dmax = D.max()
    return float(np.log(np.sum(r * np.exp(D - Dmax))) + Dmax), float(Dmax), D


def _newton_support(P: np.ndarray, S: np.ndarray, r0: np.ndarray, iters: int = 30) -> Optional[np.ndarray]:
    """Solve ``D(P_x || q) = C`` for x in ``S`` with ``sum r = 1``; returns ``r`` on ``S`` (possibly negative)."""
    PS = P[S]
    k = len(S)
    logPS = np.log(np.where(PS > 0, PS, 1.0))
    x = np.append(r0 / r0.sum(), 0.0)
    for _ in range(iters):
        rs, C = x[:k], x[k]
        q = rs @ PS
        live = q > 0
        D = np.sum(np.where(PS[:, live] > 0, PS[:, live] * (logPS[:, live] - np.log(q[live])), 0.0), axis=1)
        F = np.append(D - C, rs.sum() - 1.0)
        if np.max(np.abs(F)) < 1e-15:
            break
        J = np.zeros((k + 1, k + 1))
        J[:k, :k] = -(PS[:, live] / q[live]) @ PS[:, live].T
        J[:k, k] = -1.0
        J[k, :k] = 1.0
        try:
            x = x - np.linalg.solve(J, F)
        except np.linalg.LinAlgError:
            return None
        if not np.all(np.isfinite(x)) or np.any(x[:k] <= 0):
            return x[:k]
    return x[:k]


def _polish(P: np.ndarray, r: np.ndarray) -> Optional[np.ndarray]:
    """Active-set Newton refinement of an input law; inputs that go negative are dropped."""
    S = np.flatnonzero(r > 1e-12 * r.max())
    while len(S) > 1:
        rs = _newton_support(P, S, r[S])
        if rs is None:
            return None
        if np.all(rs > 0):
            out = np.zeros_like(r)
            out[S] = rs
            return out / out.sum()
        S = np.delete(S, int(np.argmin(np.where(np.isfinite(rs), rs, -np.inf))))
    out = np.zeros_like(r)
    out[S] = 1.0
    return out


def blahut_arimoto(P: np.ndarray, tol: float = 1e-9, max_iters: int = 10000) -> CapacityResult:
    """Capacity of the channel with transition rows ``P`` (inputs x outputs).

    Iterates from the uniform input law until the gap between the standard
    upper bound ``max_x D(P_x || q)`` and lower bound ``log sum_x r_x exp D(P_x || q)``
    falls below ``tol`` (in bits). Returns the lower bound.

    The iteration slows to a crawl when some inputs are unused at the optimum,
    so every ``POLISH_EVERY`` steps a Newton solve on the current support is
    tried; it is accepted only if the same bound gap certifies it.
    """
    P = np.asarray(P, dtype=np.float64)
    m = P.shape[0]
    if m == 1:
        return CapacityResult(0.0, 1.0, True, 0)
    r = np.full(m, 1.0 / m)
    pos = P > 0
    logP = np.where(pos, np.log(np.where(pos, P, 1.0)), 0.0)
    ln2 = np.log(2.0)
    lower = 0.0
    converged = False
    it = 0
    for it in range(1, max_iters + 1):
        lower, upper, D = _bounds(P, logP, pos, r)
        if (upper - lower) / ln2 < tol:
            converged = True
            break
        if it % POLISH_EVERY == 0:
            rp = _polish(P, r)
            if rp is not None:
                lo_p, up_p, _ = _bounds(P, logP, pos, rp)
                if (up_p - lo_p) / ln2 < tol and lo_p >= lower:
                    lower, converged = lo_p, True
                    break
        w = r * np.exp(D - D.max())
        r = w / w.sum()
    bits = max(float(lower / ln2), 0.0)
    return CapacityResult(bits, float(2.0**bits), converged, it)


def rashomon_capacity(t: ScoreTensor, i: int, tol: float = 1e-9, max_iters: int = 10000,
                      reduce: bool = True) -> CapacityResult:
    """Channel capacity of the member scores of sample ``i``, in bits and as 2**bits."""
    P = t.scores[i]
    if reduce:
        P = _reduce_channel(P)
    return blahut_arimoto(P, tol, max_iters)


def _decision_counts(t: ScoreTensor, i: int, tau: float) -> np.ndarray:
    if t.c == 2:
        k = int(np.count_nonzero(t.scores[i, :, 1] > tau))
        return np.array([t.m - k, k])
    return np.bincount(np.argmax(t.scores[i], axis=1), minlength=t.c)


def _pair_differ(t: ScoreTensor, i: int, tau: float) -> int:
    """Ordered member pairs (with replacement) whose decisions differ."""
    n = _decision_counts(t, i, tau)
    return int(t.m * t.m - int(np.sum(n * n)))


def disagreement(t: ScoreTensor, i: int, tau: float = 0.5) -> float:
    """Plug-in disagreement: ``4 q (1 - q)`` for c=2, ``1 - sum_k q_k^2`` otherwise.

    Evaluated from integer counts with a single division, so it is correctly rounded.
    """
    scale = 2 if t.c == 2 else 1
    return scale * _pair_differ(t, i, tau) / (t.m * t.m)


def disagreement_pair(t: ScoreTensor, i: int, tau: float = 0.5) -> float:
    """Unscaled probability that two independently drawn members decide differently."""
    return _pair_differ(t, i, tau) / (t.m * t.m)


def _flips(t: ScoreTensor) -> np.ndarray:
    d = t.decisions()
    return d != d[:, [t.base_index]]


def ambiguity(t: ScoreTensor) -> float:
    """Fraction of samples whose decision some member flips relative to the base."""
    return float(np.mean(np.any(_flips(t), axis=1)))


def discrepancy(t: ScoreTensor) -> float:
    """Largest fraction of decisions any single member flips relative to the base."""
    return float(np.max(np.mean(_flips(t), axis=0)))


@dataclass(frozen=True)
class MetricsConfig:
    tau: float = 0.5
    capacity_tol: float = 1e-9
    capacity_max_iters: int = 10000
    quantiles: tuple[float, ...] = (0.5, 0.9)


@dataclass
class MetricsReport:
    per_sample: dict[str, np.ndarray]
    ambiguity: float
    discrepancy: float
    quantiles: dict[str, dict[str, float]]
    n_samples: int
    n_members: int
    n_classes: int
    capacity_nonconverged: int = 0
    metadata: dict = field(default_factory=dict)

    def quantile(self, metric: str, q: float) -> float:
        return self.quantiles[metric][_qkey(q)]

    def to_dict(self) -> dict:
        return {
            "version": REPORT_VERSION,
            "n_samples": self.n_samples,
            "n_members": self.n_members,
            "n_classes": self.n_classes,
            "dataset": {"ambiguity": self.ambiguity, "discrepancy": self.discrepancy},
            "quantiles": self.quantiles,
            "flags": {"capacity_nonconverged": self.capacity_nonconverged},
            "per_sample": {k: [float(x) for x in v] for k, v in self.per_sample.items()},
            "metadata": self.metadata,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        ps = self.per_sample
        for i in range(self.n_samples):
            w.writerow([i] + [repr(float(ps[f][i])) for f in PER_SAMPLE_FIELDS])
        return buf.getvalue()


def _qkey(q: float) -> str:
    return f"q{int(round(q * 100))}"


def report(t: ScoreTensor, cfg: Optional[MetricsConfig] = None, metadata: Optional[dict] = None) -> MetricsReport:
    """All per-sample metrics, the dataset metrics, and per-sample quantiles."""
    cfg = cfg or MetricsConfig()
    cols = {f: np.zeros(t.n) for f in PER_SAMPLE_FIELDS}
    nonconverged = 0
    for i in range(t.n):
        cols["vpr"][i] = vpr(t, i)
        cols["score_std"][i], cols["score_var"][i] = score_stats(t, i)
        cap = rashomon_capacity(t, i, cfg.capacity_tol, cfg.capacity_max_iters)
        nonconverged += not cap.converged
        cols["capacity_bits"][i] = cap.bits
        cols["effective_classes"][i] = cap.effective_classes
        cols["disagreement"][i] = disagreement(t, i, cfg.tau)
        cols["disagreement_pair"][i] = disagreement_pair(t, i, cfg.tau)
    quantiles = {}
    for f in PER_SAMPLE_FIELDS:
        qs = {_qkey(q): nearest_rank_quantile(cols[f], q) for q in cfg.quantiles}
        qs["mean"] = float(np.mean(cols[f]))
        quantiles[f] = qs
    meta = {"tau": cfg.tau, "capacity_tol": cfg.capacity_tol, **(metadata or {})}
    return MetricsReport(cols, ambiguity(t), discrepancy(t), quantiles, t.n, t.m, t.c, nonconverged, meta)
