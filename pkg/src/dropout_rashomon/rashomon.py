"""Empirical Rashomon sets built by dropout, re-training, or adversarial weight perturbation.

A model belongs to the set when its loss on the evaluation data is at most
``base_loss + epsilon``. ``epsilon = inf`` admits everything.
"""
from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .errors import IncompatibleSets, InvalidArgument
from .losses import LossKind
from .metrics import ScoreTensor
from .models import (
    DropoutSpec,
    ModelParams,
    NetworkSpec,
    apply_dropout,
    forward,
    load_model,
    save_model,
    score_gradient,
)
from .numerics import Rng, parallel_map
from .training import Dataset, TrainConfig, evaluate_loss, retrain_sampler

log = logging.getLogger(__name__)

FILTER_TOL = 1e-12
MANIFEST_VERSION = 1
PROVENANCES = ("base", "dropout", "retrain", "awp")


def check_epsilon(epsilon: float) -> float:
    epsilon = float(epsilon)
    if math.isnan(epsilon) or epsilon < 0:
        raise InvalidArgument(f"Rashomon parameter must be >= 0 (or +inf), got {epsilon}")
    return epsilon


def in_rashomon(loss: float, base_loss: float, epsilon: float) -> bool:
    if math.isinf(epsilon):
        return True
    return bool(loss <= base_loss + epsilon)


@dataclass
class Member:
    params: ModelParams
    loss: float
    provenance: str
    meta: dict = field(default_factory=dict)


@dataclass
class EmpiricalRashomonSet:
    spec: NetworkSpec
    base: ModelParams
    epsilon: float
    base_loss: float
    members: list[Member]
    loss_kind: LossKind
    data_id: str
    filtered: bool = True
    acceptance_rate: Optional[float] = None
    n_drawn: int = 0
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.loss_kind = LossKind(self.loss_kind)
        self.epsilon = check_epsilon(self.epsilon)
        self.check()

    @property
    def m(self) -> int:
        return len(self.members)

    @property
    def base_index(self) -> int:
        for j, mem in enumerate(self.members):
            if mem.provenance == "base":
                return j
        raise InvalidArgument("set has no base member")

    @property
    def losses(self) -> np.ndarray:
        return np.array([mem.loss for mem in self.members])

    def check(self) -> None:
        """Assert the set invariants; raises ``AssertionError`` on violation."""
        assert self.members, "empirical Rashomon set is empty"
        assert sum(mem.provenance == "base" for mem in self.members) == 1, "exactly one base member required"
        for mem in self.members:
            assert mem.provenance in PROVENANCES, mem.provenance
        if self.filtered and not math.isinf(self.epsilon):
            bound = self.base_loss + self.epsilon + FILTER_TOL
            for mem in self.members:
                assert mem.loss <= bound, f"member loss {mem.loss} exceeds {bound}"

    def filter(self, epsilon: Optional[float] = None) -> "EmpiricalRashomonSet":
        """Subset of members satisfying the loss constraint (same member objects)."""
        eps = self.epsilon if epsilon is None else check_epsilon(epsilon)
        kept = [mem for mem in self.members
                if mem.provenance == "base" or in_rashomon(mem.loss, self.base_loss, eps)]
        drawn = sum(mem.provenance != "base" for mem in self.members)
        accepted = sum(mem.provenance != "base" for mem in kept)
        return EmpiricalRashomonSet(self.spec, self.base, eps, self.base_loss, kept, self.loss_kind,
                                    self.data_id, True, accepted / drawn if drawn else 1.0,
                                    drawn, dict(self.info))

    def score_tensor(self, X) -> ScoreTensor:
        scores = np.stack([forward(self.spec, mem.params, X) for mem in self.members], axis=1)
        return ScoreTensor(scores, self.base_index)

    def summary(self) -> dict:
        return {
            "epsilon": _json_float(self.epsilon),
            "base_loss": self.base_loss,
            "loss_kind": self.loss_kind.value,
            "data_id": self.data_id,
            "filtered": self.filtered,
            "acceptance_rate": self.acceptance_rate,
            "n_drawn": self.n_drawn,
            "n_members": self.m,
            "info": self.info,
        }


def _json_float(x: float):
    return "inf" if math.isinf(x) else x


def _base_member(base: ModelParams, base_loss: float) -> Member:
    return Member(base, base_loss, "base", {})


def dropout_sampler(spec: NetworkSpec, base: ModelParams, dropout: DropoutSpec, m: int, data: Dataset,
                    loss_kind: LossKind, epsilon: float, filter: bool = True, threads: int = 1,
                    start: int = 0) -> EmpiricalRashomonSet:
    """Draw ``m`` dropout models around ``base``; draw ``j`` uses stream ``(dropout.seed, start + j)``.

    With ``filter`` on, only draws inside the loss constraint are kept. The
    base model is always a member.
    """
    if m < 1 or start < 0:
        raise InvalidArgument(f"need at least one dropout draw and start >= 0, got m={m}, start={start}")
    epsilon = check_epsilon(epsilon)
    base_loss = evaluate_loss(spec, base, data, loss_kind)
    root = Rng(dropout.seed)

    def draw(j):
        params = apply_dropout(base, dropout, root.derive(j))
        return Member(params, evaluate_loss(spec, params, data, loss_kind), "dropout", {"draw": j})

    draws = parallel_map(draw, range(start, start + m), threads)
    accepted = [d for d in draws if in_rashomon(d.loss, base_loss, epsilon)]
    kept = accepted if filter else draws
    return EmpiricalRashomonSet(
        spec, base, epsilon, base_loss, [_base_member(base, base_loss)] + kept, loss_kind, data.name,
        filtered=filter, acceptance_rate=len(accepted) / m, n_drawn=m,
        info={"sampler": "dropout", "dropout": dropout.to_dict()})


def retrain_to_rashomon(spec: NetworkSpec, data: Dataset, cfg_template: TrainConfig, seeds: Sequence[int],
                        epochs_grid: Sequence[int], base: ModelParams, epsilon: float,
                        loss_kind: LossKind, threads: int = 1) -> EmpiricalRashomonSet:
    """Re-train from fresh seeds and keep the models inside the loss constraint.

    Members come back sorted by loss; the base goes first among equal losses.
    """
    epsilon = check_epsilon(epsilon)
    base_loss = evaluate_loss(spec, base, data, loss_kind)
    entries = retrain_sampler(spec, data, cfg_template, seeds, epochs_grid, threads)
    trained = [e for e in entries if e.ok]
    skipped = [{"seed": e.seed, "epochs": e.epochs, "diagnostic": e.diagnostic} for e in entries if not e.ok]
    candidates = []
    for e in trained:
        loss = evaluate_loss(spec, e.params, data, loss_kind)
        if in_rashomon(loss, base_loss, epsilon):
            candidates.append(Member(e.params, loss, "retrain", {"seed": e.seed, "epochs": e.epochs}))
    order = [_base_member(base, base_loss)] + candidates
    ranked = sorted(enumerate(order), key=lambda t: (t[1].loss, t[1].provenance != "base", t[0]))
    members = [mem for _, mem in ranked]
    return EmpiricalRashomonSet(
        spec, base, epsilon, base_loss, members, loss_kind, data.name, filtered=True,
        acceptance_rate=len(candidates) / len(trained) if trained else 0.0, n_drawn=len(trained),
        info={"sampler": "retrain", "seeds": [int(s) for s in seeds],
              "epochs_grid": [int(e) for e in epochs_grid], "skipped": skipped})


@dataclass(frozen=True)
class AwpConfig:
    epsilon: float
    step_size: float = 0.001
    max_steps: int = 100
    check_every: int = 1
    max_backtracks: int = 30

    def __post_init__(self):
        check_epsilon(self.epsilon)
        if self.max_steps < 1:
            raise InvalidArgument("AWP needs max_steps >= 1")
        if not self.step_size > 0:
            raise InvalidArgument("AWP step size must be positive")
        if self.check_every < 1:
            raise InvalidArgument("check_every must be >= 1")


@dataclass
class AwpResult:
    rashomon: EmpiricalRashomonSet
    targets: np.ndarray
    scores: np.ndarray          # (n_targets, c, c): scores[t, k] is p_k for target t
    base_scores: np.ndarray     # (n_targets, c)
    truncated: np.ndarray       # (n_targets, c) bool: max_steps reached
    steps: np.ndarray           # (n_targets, c) accepted ascent steps

    def score_tensor(self) -> ScoreTensor:
        """Per-target tensor whose members are ``[base, p_0, ..., p_{c-1}]``.

        Member ``j >= 1`` is a different model for each sample, so only the
        per-sample metrics are meaningful on this tensor.
        """
        stacked = np.concatenate([self.base_scores[:, None, :], self.scores], axis=1)
        return ScoreTensor(stacked, 0)


def _axpy(params: ModelParams, g: ModelParams, step: float) -> ModelParams:
    weights = [w + step * gw for w, gw in zip(params.weights, g.weights)]
    biases = None
    if params.biases is not None:
        biases = [b + step * gb for b, gb in zip(params.biases, g.biases)]
    return ModelParams(weights, biases)


def _ascend(spec, base, x, k, data, loss_kind, base_loss, cfg: AwpConfig, record_iterates: bool):
    """Gradient ascent on output ``k`` at ``x`` while the loss constraint holds.

    Returns the last verified in-set iterate, its loss, accepted step count,
    a truncation flag and the verified intermediate iterates.
    """
    start_score = float(forward(spec, base, x)[k])
    if cfg.epsilon == 0.0:
        return base, base_loss, 0, False, []
    theta, theta_loss = base, base_loss
    verified, verified_loss, verified_steps = base, base_loss, 0
    current = start_score
    visited = []
    for step in range(1, cfg.max_steps + 1):
        _, g = score_gradient(spec, theta, x, k)
        lr = cfg.step_size
        for _ in range(cfg.max_backtracks):
            cand = _axpy(theta, g, lr)
            cand_score = float(forward(spec, cand, x)[k])
            if cand_score >= current:
                break
            lr *= 0.5
        else:
            return verified, verified_loss, verified_steps, False, visited
        if step % cfg.check_every == 0 or step == cfg.max_steps:
            loss = evaluate_loss(spec, cand, data, loss_kind)
            if not in_rashomon(loss, base_loss, cfg.epsilon):
                return verified, verified_loss, verified_steps, False, visited
            verified, verified_loss, verified_steps = cand, loss, step
            if record_iterates:
                visited.append((cand, loss, step))
        assert cand_score >= start_score
        theta, current = cand, cand_score
    return verified, verified_loss, verified_steps, True, visited


def awp_sampler(spec: NetworkSpec, base: ModelParams, data: Dataset, loss_kind: LossKind, awp: AwpConfig,
                targets: Sequence[int], points=None, record_iterates: bool = False,
                threads: int = 1) -> AwpResult:
    """Per-target, per-class adversarial weight perturbation inside the Rashomon set.

    ``targets`` index into ``points`` (defaults to ``data.X``); the loss
    constraint is always checked on ``data``.
    """
    targets = np.asarray(targets, dtype=np.int64)
    if targets.size == 0:
        raise InvalidArgument("AWP needs at least one target sample")
    if spec.head != "softmax":
        raise InvalidArgument("AWP perturbs class scores and needs a softmax head")
    points = data.X if points is None else np.asarray(points, dtype=np.float64)
    c = spec.n_outputs
    base_loss = evaluate_loss(spec, base, data, loss_kind)
    tasks = [(t, k) for t in range(targets.size) for k in range(c)]

    def run(task):
        t, k = task
        return _ascend(spec, base, points[targets[t]], k, data, loss_kind, base_loss, awp, record_iterates)

    results = parallel_map(run, tasks, threads)
    scores = np.zeros((targets.size, c, c))
    truncated = np.zeros((targets.size, c), dtype=bool)
    steps = np.zeros((targets.size, c), dtype=np.int64)
    members = [_base_member(base, base_loss)]
    for (t, k), (params, loss, n_steps, trunc, visited) in zip(tasks, results):
        scores[t, k] = forward(spec, params, points[targets[t]])
        truncated[t, k] = trunc
        steps[t, k] = n_steps
        meta = {"target": int(targets[t]), "class": k, "steps": n_steps, "truncated": bool(trunc)}
        if record_iterates:
            for p, l, s in visited[:-1]:
                members.append(Member(p, l, "awp", dict(meta, steps=s, terminal=False)))
        if n_steps > 0:
            members.append(Member(params, loss, "awp", dict(meta, terminal=True)))
    base_scores = np.stack([forward(spec, base, points[i]) for i in targets])
    rset = EmpiricalRashomonSet(
        spec, base, awp.epsilon, base_loss, members, loss_kind, data.name, filtered=True,
        info={"sampler": "awp", "step_size": awp.step_size, "max_steps": awp.max_steps,
              "check_every": awp.check_every, "record_iterates": record_iterates})
    return AwpResult(rset, targets, scores, base_scores, truncated, steps)


def merge(sets: Sequence[EmpiricalRashomonSet]) -> EmpiricalRashomonSet:
    """Union of members from sets that share base loss, epsilon, loss and data."""
    if not sets:
        raise InvalidArgument("nothing to merge")
    first = sets[0]
    for s in sets[1:]:
        same = (s.epsilon == first.epsilon and s.loss_kind == first.loss_kind and s.data_id == first.data_id
                and s.base_loss == first.base_loss and s.spec == first.spec)
        if not same:
            raise IncompatibleSets("sets differ in epsilon, loss kind, evaluation data, base loss or architecture")
    members = list(first.members)
    for s in sets[1:]:
        members.extend(mem for mem in s.members if mem.provenance != "base")
    drawn = sum(s.n_drawn for s in sets)
    return EmpiricalRashomonSet(
        first.spec, first.base, first.epsilon, first.base_loss, members, first.loss_kind, first.data_id,
        filtered=all(s.filtered for s in sets), acceptance_rate=None if len(sets) > 1 else first.acceptance_rate,
        n_drawn=drawn, info={"sampler": "merge", "parts": [s.info.get("sampler") for s in sets]}
        if len(sets) > 1 else dict(first.info))


def save_set(directory, rset: EmpiricalRashomonSet) -> Path:
    """Write each member as ``models/member_XXXXX.npz`` plus ``manifest.json``."""
    directory = Path(directory)
    (directory / "models").mkdir(parents=True, exist_ok=True)
    entries = []
    for j, mem in enumerate(rset.members):
        name = f"models/member_{j:05d}.npz"
        save_model(directory / name, rset.spec, mem.params)
        entries.append({"file": name, "loss": mem.loss, "provenance": mem.provenance, "meta": mem.meta})
    manifest = {"version": MANIFEST_VERSION, "spec": rset.spec.to_dict(), **rset.summary(), "members": entries}
    (directory / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return directory


def load_set(directory) -> EmpiricalRashomonSet:
    directory = Path(directory)
    manifest = json.loads((directory / "manifest.json").read_text())
    if manifest.get("version") != MANIFEST_VERSION:
        raise InvalidArgument(f"unsupported manifest version {manifest.get('version')}")
    members = []
    spec = NetworkSpec.from_dict(manifest["spec"])
    for e in manifest["members"]:
        _, params = load_model(directory / e["file"])
        members.append(Member(params, e["loss"], e["provenance"], e["meta"]))
    base = next(mem.params for mem in members if mem.provenance == "base")
    eps = math.inf if manifest["epsilon"] == "inf" else manifest["epsilon"]
    return EmpiricalRashomonSet(spec, base, eps, manifest["base_loss"], members, manifest["loss_kind"],
                                manifest["data_id"], manifest["filtered"], manifest["acceptance_rate"],
                                manifest["n_drawn"], manifest["info"])
