"""Dropout ensembles, multiplicity-aware model selection, and the effect of the
Rashomon filter on score-variance estimates."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Optional, Sequence

import numpy as np

from .errors import InvalidArgument
from .losses import LossKind
from .metrics import PER_SAMPLE_FIELDS, MetricsConfig, ScoreTensor, report, score_stats
from .models import DropoutSpec, ModelParams, NetworkSpec, check_params, forward
from .numerics import nearest_rank_quantile, parallel_map
from .rashomon import Member, dropout_sampler
from .training import Dataset

CE = LossKind.CROSS_ENTROPY


@dataclass
class EnsembleModel:
    spec: NetworkSpec
    members: list[ModelParams]

    def __post_init__(self):
        if not self.members:
            raise InvalidArgument("an ensemble needs at least one member")
        for params in self.members:
            check_params(self.spec, params)


def ensemble_predict(e: EnsembleModel, x) -> np.ndarray:
    """Mean of the member score vectors.

    The result is clipped to the per-coordinate range of the members; the
    exact mean lies there, so this only removes rounding past the hull.
    """
    outs = np.stack([forward(e.spec, params, x) for params in e.members])
    return np.clip(outs.mean(axis=0), outs.min(axis=0), outs.max(axis=0))


def ensemble_loss(e: EnsembleModel, data: Dataset, loss_kind: LossKind = CE) -> float:
    """Loss of the averaged scores (cross-entropy or Brier)."""
    loss_kind = LossKind(loss_kind)
    s = ensemble_predict(e, data.X)
    if loss_kind is LossKind.CROSS_ENTROPY:
        return float(-np.mean(np.log(np.maximum(s[np.arange(data.n), data.y], 1e-300))))
    if loss_kind is LossKind.BRIER:
        onehot = np.eye(e.spec.n_outputs)[data.y]
        return float(np.mean(np.sum((s - onehot) ** 2, axis=1)))
    raise InvalidArgument("ensemble loss is defined for classification losses")


def accepted_pool(spec: NetworkSpec, base: ModelParams, dropout: DropoutSpec, need: int, data: Dataset,
                  loss_kind: LossKind, epsilon: float, threads: int = 1,
                  max_draws: Optional[int] = None) -> tuple[list[Member], int]:
    """Draw dropout models in batches until ``need`` pass the loss constraint.

    Returns the accepted members in draw order and the number of draws used.
    Stops early (with fewer members) once ``max_draws`` is exhausted.
    """
    max_draws = max_draws or 50 * need
    pool: list[Member] = []
    drawn = 0
    while len(pool) < need and drawn < max_draws:
        batch = min(max(need - len(pool), 16) * 2, max_draws - drawn)
        s = dropout_sampler(spec, base, dropout, batch, data, loss_kind, epsilon, threads=threads, start=drawn)
        pool.extend(mem for mem in s.members if mem.provenance != "base")
        drawn += batch
    return pool[:need], drawn


@dataclass
class SweepRow:
    size: int
    n_ensembles: int
    mean: dict[str, float]
    median: dict[str, float]
    ambiguity: float
    discrepancy: float
    mean_ensemble_loss: float
    partial: bool

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class EnsembleSweep:
    rows: list[SweepRow]
    ensemble_tensors: dict[int, ScoreTensor] = field(default_factory=dict, repr=False)
    pool_tensors: dict[int, ScoreTensor] = field(default_factory=dict, repr=False)
    acceptance_rate: float = 1.0

    def to_dict(self) -> dict:
        return {"rows": [r.to_dict() for r in self.rows], "acceptance_rate": self.acceptance_rate}


SWEEP_COLUMNS = ("size", "n_ensembles", "ambiguity", "discrepancy", "mean_ensemble_loss", "partial") + tuple(
    f"{stat}_{f}" for stat in ("mean", "median") for f in PER_SAMPLE_FIELDS)


def ensemble_multiplicity_sweep(spec: NetworkSpec, base: ModelParams, dropout: DropoutSpec,
                                sizes: Sequence[int], per_size: int, data: Dataset, epsilon: float,
                                eval_X=None, loss_kind: LossKind = CE, threads: int = 1,
                                metrics_cfg: Optional[MetricsConfig] = None) -> EnsembleSweep:
    """Multiplicity among ``per_size`` independent ``k``-member dropout ensembles, for each ``k``.

    Members are in-Rashomon dropout models; ensembles at one size never share
    members. The member set of each size's tensor is ``[base] + ensembles``.
    Per-sample metrics are summarized by mean and median.
    """
    sizes = [int(k) for k in sizes]
    if not sizes or min(sizes) < 1 or per_size < 1:
        raise InvalidArgument("ensemble sizes and ensembles-per-size must be >= 1")
    X = data.X if eval_X is None else np.asarray(eval_X, dtype=np.float64)
    need = sum(sizes) * per_size
    pool, drawn = accepted_pool(spec, base, dropout, need, data, loss_kind, epsilon, threads)
    base_scores = forward(spec, base, X)
    rows, etensors, ptensors = [], {}, {}
    offset = 0
    for k in sizes:
        n_full = min(per_size, (len(pool) - offset) // k) if len(pool) > offset else 0
        chunks = [pool[offset + e * k: offset + (e + 1) * k] for e in range(n_full)]
        offset += k * per_size
        ensembles = [EnsembleModel(spec, [mem.params for mem in c]) for c in chunks]
        scores = parallel_map(lambda e: ensemble_predict(e, X), ensembles, threads)
        t = ScoreTensor(np.stack([base_scores] + scores, axis=1), 0)
        used = [mem.params for c in chunks for mem in c]
        ptensors[k] = ScoreTensor(np.stack([base_scores] + [forward(spec, p, X) for p in used], axis=1), 0)
        etensors[k] = t
        rep = report(t, metrics_cfg)
        losses = [ensemble_loss(e, data, loss_kind) for e in ensembles] if loss_kind.needs_softmax else []
        rows.append(SweepRow(
            size=k, n_ensembles=n_full,
            mean={f: float(np.mean(rep.per_sample[f])) for f in PER_SAMPLE_FIELDS},
            median={f: float(np.median(rep.per_sample[f])) for f in PER_SAMPLE_FIELDS},
            ambiguity=rep.ambiguity, discrepancy=rep.discrepancy,
            mean_ensemble_loss=float(np.mean(losses)) if losses else math.nan,
            partial=n_full < per_size))
    return EnsembleSweep(rows, etensors, ptensors, len(pool) / drawn if drawn else 0.0)


@dataclass
class SelectionReport:
    candidates: list[dict]
    rankings: dict[str, list]
    key: tuple[str, float]
    recommended: Any
    excluded: list[dict]

    def to_dict(self) -> dict:
        return {"candidates": self.candidates, "rankings": self.rankings, "key": list(self.key),
                "recommended": self.recommended, "excluded": self.excluded}


def _qkey(q: float) -> str:
    return f"q{int(round(q * 100))}"


def select_model(candidates: Sequence[tuple[ModelParams, Any]], spec: NetworkSpec, dropout: DropoutSpec, m: int,
                 data: Dataset, epsilon: float, eval_X=None, loss_kind: LossKind = CE,
                 key: tuple[str, float] = ("vpr", 0.9), threads: int = 1,
                 metrics_cfg: Optional[MetricsConfig] = None) -> SelectionReport:
    """Estimate multiplicity around each candidate by dropout and rank them.

    Every candidate gets the same dropout streams. The default ranking key is
    the 90% quantile of per-sample VPR, then ambiguity, then candidate id.
    Candidates with no accepted dropout model are excluded.
    """
    if len(candidates) < 2:
        raise InvalidArgument("model selection needs at least two candidates")
    metric, q = key
    if metric not in PER_SAMPLE_FIELDS:
        raise InvalidArgument(f"unknown ranking metric {metric!r}")
    cfg = metrics_cfg or MetricsConfig()
    if q not in cfg.quantiles:
        cfg = MetricsConfig(cfg.tau, cfg.capacity_tol, cfg.capacity_max_iters, tuple(cfg.quantiles) + (q,))
    X = data.X if eval_X is None else np.asarray(eval_X, dtype=np.float64)

    def evaluate(cand):
        params, cid = cand
        s = dropout_sampler(spec, params, dropout, m, data, loss_kind, epsilon, threads=1)
        if s.m == 1:
            return cid, None, {"id": cid, "diagnostic": "no dropout model passed the loss constraint"}
        rep = report(s.score_tensor(X), cfg)
        return cid, {"id": cid, "base_loss": s.base_loss, "acceptance_rate": s.acceptance_rate,
                     "n_members": s.m, "quantiles": rep.quantiles, "ambiguity": rep.ambiguity,
                     "discrepancy": rep.discrepancy}, None

    results = parallel_map(evaluate, list(candidates), threads)
    summaries = [r for _, r, _ in results if r is not None]
    excluded = [x for _, _, x in results if x is not None]
    rankings: dict[str, list] = {}
    for f in PER_SAMPLE_FIELDS:
        rankings[f] = [s["id"] for s in sorted(summaries, key=lambda s: (s["quantiles"][f][_qkey(q)], s["id"]))]
    for f in ("ambiguity", "discrepancy"):
        rankings[f] = [s["id"] for s in sorted(summaries, key=lambda s: (s[f], s["id"]))]
    primary = sorted(summaries, key=lambda s: (s["quantiles"][metric][_qkey(q)], s["ambiguity"], s["id"]))
    rankings["primary"] = [s["id"] for s in primary]
    return SelectionReport(summaries, rankings, (metric, q), primary[0]["id"] if primary else None, excluded)


@dataclass
class VarianceComparison:
    unfiltered: float
    filtered: float
    acceptance_rate: float
    n_unfiltered: int
    n_filtered: int
    quantile: float
    empty_filtered: bool

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def filtered_vs_unfiltered_variance(spec: NetworkSpec, base: ModelParams, dropout: DropoutSpec, m: int,
                                    data: Dataset, epsilon: float, quantile: float = 0.8, eval_X=None,
                                    loss_kind: LossKind = CE, threads: int = 1) -> VarianceComparison:
    """Quantile of per-sample score variance over one dropout pool, with and without the loss filter."""
    if m < 2:
        raise InvalidArgument("need at least two dropout draws")
    X = data.X if eval_X is None else np.asarray(eval_X, dtype=np.float64)
    pool = dropout_sampler(spec, base, dropout, m, data, loss_kind, epsilon, filter=False, threads=threads)
    kept = pool.filter(epsilon)
    ids = {id(mem) for mem in kept.members}
    assert ids <= {id(mem) for mem in pool.members}

    def q_var(rset):
        t = rset.score_tensor(X)
        return nearest_rank_quantile([score_stats(t, i)[1] for i in range(t.n)], quantile)

    return VarianceComparison(q_var(pool), q_var(kept), kept.acceptance_rate, pool.m, kept.m, quantile,
                              kept.m == 1)
