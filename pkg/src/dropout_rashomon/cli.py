"""Command-line entry point: data ingestion, configuration, experiment runs and reports.

Every command writes into ``--out``: a ``manifest.json`` plus its reports.
Reports carry the config hash and master seed. Wall-clock numbers live
under ``timing`` keys, and ``canonical_json`` drops those keys, so reruns
with the same config and seed compare byte for byte.
"""
from __future__ import annotations

import argparse
import copy
import csv
import hashlib
import io
import json
import logging
import math
import os
import sys
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

import numpy as np

from . import __version__
from .applications import (
    SWEEP_COLUMNS,
    ensemble_multiplicity_sweep,
    filtered_vs_unfiltered_variance,
    select_model,
)
from .errors import ConfigError, DatasetError, TrainingDiverged
from .losses import LossKind
from .metrics import PER_SAMPLE_FIELDS, MetricsConfig, MetricsReport, report
from .models import DropoutSpec, ModelParams, NetworkSpec, load_model, ridge_fit, save_model
from .numerics import derive_seed
from .rashomon import AwpConfig, awp_sampler, dropout_sampler, load_set, retrain_to_rashomon, save_set
from .synth import gaussian_blobs, gaussian_regression, orthonormal_design, train_test_split
from .theory import prop1_monte_carlo, prop2_monte_carlo, prop4_monte_carlo
from .training import Dataset, TrainConfig, accuracy, evaluate_loss, train_from_seed

log = logging.getLogger("dropout_rashomon")

EXIT_OK, EXIT_FAIL, EXIT_CONFIG = 0, 1, 2
VOLATILE_KEYS = frozenset({"timing", "runtime"})
MISSING_CELLS = frozenset({"", "?", "na", "nan", "null", "none"})

DEFAULTS: dict = {
    "seed": 0,
    "data": {
        "path": None,
        "label": "label",
        "scaling": "min-max",
        "test_fraction": 0.3,
        "split_seed": 0,
        "synthetic": {"n": 300, "d": 10, "n_classes": 2, "separation": 2.0, "seed": 0},
    },
    "model": {"hidden": [200], "activation": "relu", "use_bias": False},
    "train": {"epochs": 100, "learning_rate": 0.05, "batch_size": 100, "l2_penalty": 0.0},
    "rashomon": {"loss": "cross-entropy", "epsilon": 0.05, "split": "train", "filter": True},
    "metrics": {"tau": 0.5, "quantiles": [0.5, 0.9], "capacity_tol": 1e-9, "capacity_max_iters": 10000,
                "eval_split": "test", "family": "gaussian", "param": 0.1, "m": 100},
    "sweep": {"family": "gaussian", "grid": [0.0, 0.05, 0.1, 0.2], "m": 100},
    "retrain": {"n_seeds": 20, "epochs_grid": [20, 40, 60, 80, 100]},
    "awp": {"step_size": 0.001, "max_steps": 100, "check_every": 1, "n_targets": 20},
    "ensemble": {"family": "gaussian", "param": 0.1, "sizes": [1, 5, 25], "per_size": 20},
    "select": {"n_candidates": 3, "family": "gaussian", "param": 0.1, "m": 100},
    "theory": {"quick": True},
}

COMMANDS = ("train", "sweep", "retrain", "awp", "metrics", "ensemble", "select", "verify-theory", "gen-synth",
            "pipeline")


# -- JSON helpers ---------------------------------------------------------------------------------------------


def plain(obj):
    """Convert numpy values, tuples and non-finite floats into JSON-safe values."""
    if isinstance(obj, dict):
        return {str(k): plain(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [plain(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return [plain(v) for v in obj.tolist()]
    if isinstance(obj, (bool, np.bool_)):
        return bool(obj)
    if isinstance(obj, (int, np.integer)):
        return int(obj)
    if isinstance(obj, (float, np.floating)):
        x = float(obj)
        if math.isnan(x):
            return "nan"
        if math.isinf(x):
            return "inf" if x > 0 else "-inf"
        return x
    return obj


def _strip_volatile(obj):
    if isinstance(obj, dict):
        return {k: _strip_volatile(v) for k, v in obj.items() if k not in VOLATILE_KEYS}
    if isinstance(obj, list):
        return [_strip_volatile(v) for v in obj]
    return obj


def canonical_json(obj) -> str:
    """Sorted-key JSON without timing and runtime entries.

    Floats use the shortest repr that round-trips exactly.
    """
    return json.dumps(_strip_volatile(plain(obj)), sort_keys=True, indent=1, allow_nan=False) + "\n"


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(plain(obj), sort_keys=True, indent=1, allow_nan=False) + "\n")


def config_hash(cfg: dict) -> str:
    return hashlib.sha256(canonical_json(cfg).encode()).hexdigest()


# -- configuration --------------------------------------------------------------------------------------------


def _merge(base: dict, override: dict, prefix: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        path = f"{prefix}{k}"
        if k not in base:
            raise ConfigError(path, "unknown field")
        if isinstance(base[k], dict) and base[k] and not isinstance(v, dict):
            raise ConfigError(path, "expected an object")
        out[k] = _merge(base[k], v, path + ".") if isinstance(base[k], dict) and base[k] else v
    return out


def _check(cond: bool, fieldname: str, message: str) -> None:
    if not cond:
        raise ConfigError(fieldname, message)


def _num(cfg: dict, path: str, lo: float = -math.inf, hi: float = math.inf, integer: bool = False,
         allow_inf: bool = False, lo_open: bool = False):
    v = cfg
    for part in path.split("."):
        v = v[part]
    if allow_inf and v == "inf":
        return math.inf
    ok_type = isinstance(v, int) if integer else isinstance(v, (int, float))
    _check(ok_type and not isinstance(v, bool), path, f"expected {'an integer' if integer else 'a number'}, got {v!r}")
    _check(not math.isnan(v) and (v > lo if lo_open else v >= lo) and v <= hi, path,
           f"value {v!r} outside [{lo}, {hi}]")
    return v


def _choice(cfg: dict, path: str, options) -> str:
    v = cfg
    for part in path.split("."):
        v = v[part]
    _check(v in options, path, f"expected one of {sorted(options)}, got {v!r}")
    return v


def _int_list(cfg: dict, path: str, lo: int = 1) -> list[int]:
    v = cfg
    for part in path.split("."):
        v = v[part]
    _check(isinstance(v, list) and len(v) > 0, path, "expected a non-empty list")
    for i, x in enumerate(v):
        _check(isinstance(x, int) and not isinstance(x, bool) and x >= lo, f"{path}[{i}]",
               f"expected an integer >= {lo}, got {x!r}")
    return v


def _float_list(cfg: dict, path: str, lo: float = 0.0, hi: float = math.inf) -> list[float]:
    v = cfg
    for part in path.split("."):
        v = v[part]
    _check(isinstance(v, list) and len(v) > 0, path, "expected a non-empty list")
    for i, x in enumerate(v):
        _check(isinstance(x, (int, float)) and not isinstance(x, bool) and lo <= x <= hi, f"{path}[{i}]",
               f"expected a number in [{lo}, {hi}], got {x!r}")
    return v


def _family_param(cfg: dict, prefix: str) -> None:
    fam = _choice(cfg, f"{prefix}.family", {"bernoulli", "gaussian"})
    _num(cfg, f"{prefix}.param", 0.0, 1.0 if fam == "bernoulli" else math.inf)


def validate_config(cfg: dict) -> dict:
    """Check every field against the module preconditions; raises ``ConfigError`` with the field path."""
    _num(cfg, "seed", 0, 2**64 - 1, integer=True)
    if cfg["data"]["path"] is not None:
        _check(isinstance(cfg["data"]["path"], str), "data.path", "expected a path string")
        _check(Path(cfg["data"]["path"]).is_file(), "data.path", f"file not found: {cfg['data']['path']}")
    _check(isinstance(cfg["data"]["label"], str), "data.label", "expected a column name")
    _choice(cfg, "data.scaling", {"none", "min-max"})
    _num(cfg, "data.test_fraction", 0.0, 1.0, lo_open=True)
    _num(cfg, "data.split_seed", 0, 2**64 - 1, integer=True)
    _num(cfg, "data.synthetic.n", 2, integer=True)
    _num(cfg, "data.synthetic.d", 1, integer=True)
    _num(cfg, "data.synthetic.n_classes", 2, integer=True)
    _num(cfg, "data.synthetic.separation", 0.0)
    _num(cfg, "data.synthetic.seed", 0, 2**64 - 1, integer=True)
    _int_list(cfg, "model.hidden", 1) if cfg["model"]["hidden"] else None
    _check(isinstance(cfg["model"]["hidden"], list), "model.hidden", "expected a list of widths")
    _choice(cfg, "model.activation", {"relu", "tanh"})
    _check(isinstance(cfg["model"]["use_bias"], bool), "model.use_bias", "expected true or false")
    _num(cfg, "train.epochs", 1, integer=True)
    _num(cfg, "train.learning_rate", 0.0)
    _num(cfg, "train.batch_size", 1, integer=True)
    _num(cfg, "train.l2_penalty", 0.0)
    _choice(cfg, "rashomon.loss", {"cross-entropy", "brier"})
    _num(cfg, "rashomon.epsilon", 0.0, allow_inf=True)
    _choice(cfg, "rashomon.split", {"train", "test"})
    _check(isinstance(cfg["rashomon"]["filter"], bool), "rashomon.filter", "expected true or false")
    _num(cfg, "metrics.tau", 0.0, 1.0)
    _float_list(cfg, "metrics.quantiles", 0.0, 1.0)
    _num(cfg, "metrics.capacity_tol", 0.0, lo_open=True)
    _num(cfg, "metrics.capacity_max_iters", 1, integer=True)
    _choice(cfg, "metrics.eval_split", {"train", "test"})
    _family_param(cfg, "metrics")
    _num(cfg, "metrics.m", 1, integer=True)
    fam = _choice(cfg, "sweep.family", {"bernoulli", "gaussian"})
    _float_list(cfg, "sweep.grid", 0.0, 1.0 if fam == "bernoulli" else math.inf)
    _num(cfg, "sweep.m", 1, integer=True)
    _num(cfg, "retrain.n_seeds", 1, integer=True)
    _int_list(cfg, "retrain.epochs_grid", 1)
    _num(cfg, "awp.step_size", 0.0, lo_open=True)
    _num(cfg, "awp.max_steps", 1, integer=True)
    _num(cfg, "awp.check_every", 1, integer=True)
    _num(cfg, "awp.n_targets", 1, integer=True)
    _family_param(cfg, "ensemble")
    _int_list(cfg, "ensemble.sizes", 1)
    _num(cfg, "ensemble.per_size", 1, integer=True)
    _num(cfg, "select.n_candidates", 2, integer=True)
    _family_param(cfg, "select")
    _num(cfg, "select.m", 1, integer=True)
    _check(isinstance(cfg["theory"]["quick"], bool), "theory.quick", "expected true or false")
    return cfg


def load_config(path: Optional[str] = None, overrides: Optional[dict] = None) -> dict:
    cfg = copy.deepcopy(DEFAULTS)
    if path is not None:
        try:
            user = json.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError("--config", f"file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise ConfigError("--config", f"invalid JSON: {exc}") from None
        _check(isinstance(user, dict), "--config", "top level must be an object")
        cfg = _merge(cfg, user)
    if overrides:
        cfg = _merge(cfg, overrides)
    return validate_config(cfg)


# -- data -----------------------------------------------------------------------------------------------------


def minmax_fit(X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    lo = X.min(axis=0)
    return lo, X.max(axis=0) - lo


def minmax_apply(X: np.ndarray, lo: np.ndarray, span: np.ndarray) -> np.ndarray:
    """Scale with fitted statistics; constant columns map to 0."""
    safe = np.where(span > 0, span, 1.0)
    return np.where(span > 0, (X - lo) / safe, 0.0)


def ingest_csv(path, label: str, scaling: str = "none", fit_rows=None) -> tuple[Dataset, dict]:
    """Read a headered UTF-8 CSV with integer labels in column ``label``.

    Rows with a missing cell are dropped and counted. ``min-max`` scaling uses
    the statistics of ``fit_rows`` (all rows by default).
    """
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DatasetError(f"{path}: empty file")
    header = [h.strip() for h in rows[0]]
    if label not in header:
        raise ConfigError("data.label", f"column {label!r} not in header of {path}")
    li = header.index(label)
    feats = [j for j in range(len(header)) if j != li]
    X, y, dropped = [], [], 0
    for r, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        cells = [c.strip() for c in row]
        if len(cells) != len(header) or any(c.lower() in MISSING_CELLS for c in cells):
            dropped += 1
            continue
        vals = []
        for j in feats:
            try:
                v = float(cells[j])
            except ValueError:
                v = math.nan
            if not math.isfinite(v):
                raise DatasetError(f"{path}: row {r}, column {header[j]!r}: non-numeric value {cells[j]!r}")
            vals.append(v)
        try:
            lab = int(cells[li])
        except ValueError:
            raise DatasetError(f"{path}: row {r}: label {cells[li]!r} is not an integer") from None
        if lab < 0:
            raise DatasetError(f"{path}: row {r}: label {lab} is negative")
        X.append(vals)
        y.append(lab)
    if not X:
        raise DatasetError(f"{path}: no complete rows")
    X = np.array(X, dtype=np.float64).reshape(len(X), len(feats))
    if scaling == "min-max":
        fit = X if fit_rows is None else X[np.asarray(fit_rows)]
        X = minmax_apply(X, *minmax_fit(fit))
    elif scaling != "none":
        raise ConfigError("data.scaling", f"unknown scaling {scaling!r}")
    y = np.array(y, dtype=np.int64)
    info = {"dropped_rows": dropped, "columns": [header[j] for j in feats], "scaling": scaling}
    return Dataset(X, y, int(y.max()) + 1, name=path.stem), info


def load_data(cfg: dict) -> tuple[Dataset, Dataset, dict]:
    """Train/test split of the configured dataset, scaled with training statistics."""
    dc = cfg["data"]
    if dc["path"] is None:
        s = dc["synthetic"]
        full = gaussian_blobs(s["n"], s["d"], s["n_classes"], s["separation"], s["seed"])
        info = {"source": "synthetic", **s, "dropped_rows": 0}
    else:
        full, info = ingest_csv(dc["path"], dc["label"], "none")
        info = {"source": dc["path"], **info}
    train, test = train_test_split(full, dc["test_fraction"], dc["split_seed"])
    if dc["scaling"] == "min-max":
        lo, span = minmax_fit(train.X)
        train = Dataset(minmax_apply(train.X, lo, span), train.y, train.n_classes, train.name)
        test = Dataset(minmax_apply(test.X, lo, span), test.y, test.n_classes, test.name)
    info.update({"n_train": train.n, "n_test": test.n, "scaling": dc["scaling"],
                 "test_fraction": dc["test_fraction"], "split_seed": dc["split_seed"]})
    return train, test, info


def write_synthetic_csv(path: Path, data: Dataset) -> None:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow([f"x{j}" for j in range(data.d)] + ["label"])
    for x, lab in zip(data.X, data.y):
        w.writerow([repr(float(v)) for v in x] + [int(lab)])
    path.write_text(buf.getvalue())


# -- experiment context ---------------------------------------------------------------------------------------


@dataclass
class Context:
    cfg: dict
    out: Path
    threads: int
    command: str
    seeds: dict = field(default_factory=dict)
    timing: dict = field(default_factory=dict)
    files: list = field(default_factory=list)
    _data: Optional[tuple] = None

    @property
    def seed(self) -> int:
        return int(self.cfg["seed"])

    @property
    def hash(self) -> str:
        return config_hash(self.cfg)

    def provenance(self) -> dict:
        return {"config_hash": self.hash, "seed": self.seed, "version": __version__, "command": self.command}

    def data(self) -> tuple[Dataset, Dataset, dict]:
        if self._data is None:
            self._data = load_data(self.cfg)
        return self._data

    def rashomon_data(self) -> Dataset:
        train, test, _ = self.data()
        return train if self.cfg["rashomon"]["split"] == "train" else test

    def eval_data(self) -> Dataset:
        train, test, _ = self.data()
        return test if self.cfg["metrics"]["eval_split"] == "test" else train

    def spec(self) -> NetworkSpec:
        train, _, _ = self.data()
        m = self.cfg["model"]
        return NetworkSpec((train.d, *m["hidden"], train.n_classes), m["activation"], "softmax", m["use_bias"])

    def train_config(self, seed: int) -> TrainConfig:
        t = self.cfg["train"]
        return TrainConfig(t["epochs"], t["learning_rate"], t["batch_size"], seed, LossKind.CROSS_ENTROPY,
                           t["l2_penalty"])

    @property
    def loss(self) -> LossKind:
        return LossKind(self.cfg["rashomon"]["loss"])

    @property
    def epsilon(self) -> float:
        e = self.cfg["rashomon"]["epsilon"]
        return math.inf if e == "inf" else float(e)

    def metrics_config(self) -> MetricsConfig:
        m = self.cfg["metrics"]
        return MetricsConfig(m["tau"], m["capacity_tol"], m["capacity_max_iters"], tuple(m["quantiles"]))

    def emit_json(self, name: str, obj: dict) -> Path:
        path = self.out / name
        write_json(path, {**obj, "provenance": self.provenance()})
        self.files.append(name)
        return path

    def emit_csv(self, name: str, text: str) -> Path:
        path = self.out / name
        path.write_text(f"# config_hash={self.hash} seed={self.seed}\n" + text)
        self.files.append(name)
        return path

    def write_manifest(self, status: str = "ok") -> None:
        train_info = self._data[2] if self._data is not None else None
        write_json(self.out / "manifest.json", {
            **self.provenance(), "status": status, "config": self.cfg, "seeds": self.seeds,
            "data": train_info, "files": sorted(set(self.files)), "timing": self.timing,
            "runtime": {"threads": self.threads}})


def _dropout(family: str, param: float, seed: int) -> DropoutSpec:
    return DropoutSpec.bernoulli(param, seed) if family == "bernoulli" else DropoutSpec.gaussian(param, seed)


def _base_path(ctx: Context, model: Optional[str]) -> Path:
    return Path(model) if model else ctx.out / "models" / "base.npz"


def load_base(ctx: Context, model: Optional[str]) -> tuple[NetworkSpec, ModelParams]:
    path = _base_path(ctx, model)
    if not path.is_file():
        raise ConfigError("--model", f"no trained base model at {path}; run `train` first")
    spec, params = load_model(path)
    if spec != ctx.spec():
        raise ConfigError("--model", "saved model architecture does not match the configured data and model")
    return spec, params


# -- commands -------------------------------------------------------------------------------------------------


def cmd_train(ctx: Context, args) -> int:
    train, test, _ = ctx.data()
    spec = ctx.spec()
    seed = derive_seed(ctx.seed, 1)
    ctx.seeds["train"] = seed
    t0 = time.perf_counter()
    params = train_from_seed(spec, train, ctx.train_config(seed))
    ctx.timing["train_seconds"] = time.perf_counter() - t0
    (ctx.out / "models").mkdir(parents=True, exist_ok=True)
    save_model(ctx.out / "models" / "base.npz", spec, params)
    ctx.files.append("models/base.npz")
    ctx.emit_json("train.json", {
        "spec": spec.to_dict(),
        "train_loss": evaluate_loss(spec, params, train, LossKind.CROSS_ENTROPY),
        "test_loss": evaluate_loss(spec, params, test, LossKind.CROSS_ENTROPY),
        "train_accuracy": accuracy(spec, params, train), "test_accuracy": accuracy(spec, params, test)})
    return EXIT_OK


@dataclass
class SweepPoint:
    param: float
    mean_loss_deviation: float
    loss_deviation_std: float
    accuracy_deviation: float
    acceptance_rate: float
    n_members: int
    ambiguity: float
    discrepancy: float
    quantiles: dict
    seconds_per_model: float

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["timing"] = {"seconds_per_model": d.pop("seconds_per_model")}
        return d


@dataclass
class SweepResult:
    family: str
    epsilon: float
    m: int
    filtered: bool
    points: list[SweepPoint]

    def to_dict(self) -> dict:
        return {"family": self.family, "epsilon": self.epsilon, "m": self.m, "filtered": self.filtered,
                "points": [p.to_dict() for p in self.points]}

    def to_csv(self) -> str:
        qcols = [(f, q) for f in PER_SAMPLE_FIELDS for q in sorted(self.points[0].quantiles[f])] if self.points else []
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["param", "mean_loss_deviation", "loss_deviation_std", "accuracy_deviation", "acceptance_rate",
                    "n_members", "ambiguity", "discrepancy"] + [f"{q}_{f}" for f, q in qcols]
                   + ["seconds_per_model"])
        for p in self.points:
            w.writerow([repr(float(p.param)), repr(p.mean_loss_deviation), repr(p.loss_deviation_std),
                        repr(p.accuracy_deviation), repr(p.acceptance_rate), p.n_members, repr(p.ambiguity),
                        repr(p.discrepancy)] + [repr(p.quantiles[f][q]) for f, q in qcols]
                       + [repr(p.seconds_per_model)])
        return buf.getvalue()


def run_dropout_sweep(spec: NetworkSpec, base: ModelParams, data: Dataset, eval_data: Dataset, family: str,
                      grid, m: int, epsilon: float, loss_kind: LossKind, seed: int,
                      metrics_cfg: Optional[MetricsConfig] = None, threads: int = 1,
                      filter: bool = True) -> tuple[SweepResult, list[MetricsReport]]:
    """Dropout Rashomon sets over a parameter grid, with loss/accuracy deviations and metrics.

    Loss and accuracy deviations are averaged over all ``m`` draws; metrics
    use the (optionally filtered) set. Per-model wall-clock covers weight
    materialization and loss evaluation only.
    """
    base_loss = evaluate_loss(spec, base, data, loss_kind)
    base_acc = accuracy(spec, base, eval_data)
    points, reports = [], []
    for i, param in enumerate(sorted(float(g) for g in grid)):
        drop = _dropout(family, param, derive_seed(seed, i))
        t0 = time.perf_counter()
        pool = dropout_sampler(spec, base, drop, m, data, loss_kind, math.inf, filter=False, threads=threads)
        per_model = (time.perf_counter() - t0) / m
        drawn = pool.members[1:]
        dev = np.array([mem.loss - base_loss for mem in drawn])
        acc_dev = float(np.mean([base_acc - accuracy(spec, mem.params, eval_data) for mem in drawn]))
        rset = pool.filter(epsilon) if filter else pool
        rep = report(rset.score_tensor(eval_data.X), metrics_cfg,
                     {"family": family, "param": param, "epsilon": epsilon, "dropout_seed": drop.seed,
                      "sampler": "dropout"})
        reports.append(rep)
        points.append(SweepPoint(param, float(dev.mean()), float(dev.std()), acc_dev,
                                 float(np.mean(dev <= epsilon)) if not math.isinf(epsilon) else 1.0, rset.m,
                                 rep.ambiguity, rep.discrepancy, rep.quantiles, per_model))
    return SweepResult(family, epsilon, m, filter, points), reports


def cmd_sweep(ctx: Context, args) -> int:
    spec, base = load_base(ctx, args.model)
    sc = ctx.cfg["sweep"]
    seed = derive_seed(ctx.seed, 2)
    ctx.seeds["sweep"] = seed
    result, reports = run_dropout_sweep(spec, base, ctx.rashomon_data(), ctx.eval_data(), sc["family"], sc["grid"],
                                        sc["m"], ctx.epsilon, ctx.loss, seed, ctx.metrics_config(), ctx.threads,
                                        ctx.cfg["rashomon"]["filter"])
    ctx.timing["sweep_seconds_per_model"] = [p.seconds_per_model for p in result.points]
    ctx.emit_json("sweep.json", result.to_dict())
    ctx.emit_csv("sweep.csv", result.to_csv())
    ctx.emit_json("metrics.json", {"points": [r.to_dict() for r in reports]})
    return EXIT_OK


def cmd_retrain(ctx: Context, args) -> int:
    spec, base = load_base(ctx, args.model)
    rc = ctx.cfg["retrain"]
    seeds = [derive_seed(ctx.seed, 3, j) for j in range(rc["n_seeds"])]
    ctx.seeds["retrain"] = seeds
    t0 = time.perf_counter()
    rset = retrain_to_rashomon(spec, ctx.rashomon_data(), ctx.train_config(0), seeds, rc["epochs_grid"], base,
                               ctx.epsilon, ctx.loss, ctx.threads)
    n_models = len(seeds) * len(rc["epochs_grid"])
    ctx.timing["retrain_seconds_per_model"] = (time.perf_counter() - t0) / n_models
    rset.check()
    rep = report(rset.score_tensor(ctx.eval_data().X), ctx.metrics_config(), {"sampler": "retrain"})
    ctx.emit_json("retrain.json", {"set": rset.summary(), "losses": rset.losses})
    ctx.emit_json("metrics.json", rep.to_dict())
    ctx.emit_csv("metrics.csv", rep.to_csv())
    return EXIT_OK


def cmd_awp(ctx: Context, args) -> int:
    spec, base = load_base(ctx, args.model)
    ac = ctx.cfg["awp"]
    eval_data = ctx.eval_data()
    targets = np.arange(min(ac["n_targets"], eval_data.n))
    eps = ctx.epsilon
    t0 = time.perf_counter()
    res = awp_sampler(spec, base, ctx.rashomon_data(), ctx.loss,
                      AwpConfig(eps, ac["step_size"], ac["max_steps"], ac["check_every"]), targets,
                      points=eval_data.X, threads=ctx.threads)
    ctx.timing["awp_seconds"] = time.perf_counter() - t0
    res.rashomon.check()
    t = res.score_tensor()
    rep = report(t, ctx.metrics_config(), {"sampler": "awp", "note": "per-sample metrics only"})
    ctx.emit_json("awp.json", {"targets": targets, "scores": res.scores, "base_scores": res.base_scores,
                               "truncated": res.truncated, "steps": res.steps, "set": res.rashomon.summary()})
    ctx.emit_json("metrics.json", rep.to_dict())
    ctx.emit_csv("metrics.csv", rep.to_csv())
    return EXIT_OK


def cmd_metrics(ctx: Context, args) -> int:
    if args.set:
        rset = load_set(args.set)
        source = {"set": str(args.set)}
    else:
        spec, base = load_base(ctx, args.model)
        mc = ctx.cfg["metrics"]
        seed = derive_seed(ctx.seed, 7)
        ctx.seeds["metrics"] = seed
        rset = dropout_sampler(spec, base, _dropout(mc["family"], mc["param"], seed), mc["m"], ctx.rashomon_data(),
                               ctx.loss, ctx.epsilon, ctx.cfg["rashomon"]["filter"], ctx.threads)
        save_set(ctx.out / "set", rset)
        ctx.files.append("set/manifest.json")
        source = {"family": mc["family"], "param": mc["param"], "m": mc["m"], "dropout_seed": seed}
    rset.check()
    rep = report(rset.score_tensor(ctx.eval_data().X), ctx.metrics_config(),
                 {"epsilon": rset.epsilon, "acceptance_rate": rset.acceptance_rate, **source})
    ctx.emit_json("metrics.json", rep.to_dict())
    ctx.emit_csv("metrics.csv", rep.to_csv())
    return EXIT_OK


def cmd_ensemble(ctx: Context, args) -> int:
    spec, base = load_base(ctx, args.model)
    ec = ctx.cfg["ensemble"]
    seed = derive_seed(ctx.seed, 4)
    ctx.seeds["ensemble"] = seed
    sw = ensemble_multiplicity_sweep(spec, base, _dropout(ec["family"], ec["param"], seed), ec["sizes"],
                                     ec["per_size"], ctx.rashomon_data(), ctx.epsilon, ctx.eval_data().X, ctx.loss,
                                     ctx.threads, ctx.metrics_config())
    for k, t in sw.ensemble_tensors.items():
        pool = sw.pool_tensors[k]
        hull_ok = bool(np.all(np.ptp(t.scores, axis=1) <= np.ptp(pool.scores, axis=1)))
        assert hull_ok, f"ensemble score range exceeds member range at size {k}"
    ctx.emit_json("ensemble.json", sw.to_dict())
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SWEEP_COLUMNS)
    for r in sw.rows:
        w.writerow([r.size, r.n_ensembles, repr(r.ambiguity), repr(r.discrepancy), repr(r.mean_ensemble_loss),
                    r.partial] + [repr(getattr(r, stat)[f]) for stat in ("mean", "median") for f in PER_SAMPLE_FIELDS])
    ctx.emit_csv("ensemble.csv", buf.getvalue())
    return EXIT_OK


def cmd_select(ctx: Context, args) -> int:
    sc = ctx.cfg["select"]
    train, _, _ = ctx.data()
    spec = ctx.spec()
    seeds = [derive_seed(ctx.seed, 5, j) for j in range(sc["n_candidates"])]
    ctx.seeds["select_candidates"] = seeds
    cands = []
    for j, s in enumerate(seeds):
        try:
            cands.append((train_from_seed(spec, train, ctx.train_config(s)), j))
        except TrainingDiverged as exc:
            log.warning("candidate %d diverged: %s", j, exc)
    drop_seed = derive_seed(ctx.seed, 6)
    ctx.seeds["select_dropout"] = drop_seed
    rep = select_model(cands, spec, _dropout(sc["family"], sc["param"], drop_seed), sc["m"], ctx.rashomon_data(),
                       ctx.epsilon, ctx.eval_data().X, ctx.loss, threads=ctx.threads,
                       metrics_cfg=ctx.metrics_config())
    ctx.emit_json("selection.json", rep.to_dict())
    return EXIT_OK


def theory_suite(seed: int, quick: bool, threads: int = 1) -> list:
    """Monte Carlo checks of the expected deviation, ridge membership and network bounds."""
    results = []
    trials1 = 2000 if quick else 20000
    dims = (10, 50) if quick else (10, 50, 100, 200)
    for p in ((0.1,) if quick else (0.05, 0.1, 0.2)):
        for d in dims:
            data, _ = gaussian_regression(500, d, seed=derive_seed(seed, 10, d))
            results.append(prop1_monte_carlo(data.X, data.y, 0.0, p, trials1, derive_seed(seed, 11, d), threads))
    X = orthonormal_design(300, 50, seed=derive_seed(seed, 12))
    y = np.random.default_rng(derive_seed(seed, 13)).standard_normal(300)
    M = float(np.sum(ridge_fit(X, y, 0.0).weights ** 2))
    for p in ((0.02,) if quick else (0.01, 0.02, 0.05)):
        for target in (0.5, 0.8):
            eps = p * M / (1.0 - target)
            results.append(prop2_monte_carlo(X, y, 0.0, DropoutSpec.bernoulli(p, derive_seed(seed, 14)), eps,
                                             1000 if quick else 5000, threads=threads))
    blobs = gaussian_blobs(100, 10, 2, 2.0, seed=derive_seed(seed, 15))
    spec = NetworkSpec((10, 8, 2))
    base = train_from_seed(spec, blobs, TrainConfig(50, 0.1, 20, derive_seed(seed, 16)))
    for alpha in ((0.01,) if quick else (0.005, 0.01, 0.02)):
        results.append(prop4_monte_carlo(spec, base, blobs, alpha, 0.1, 500 if quick else 2000,
                                         derive_seed(seed, 17), threads))
    return results


def cmd_verify_theory(ctx: Context, args) -> int:
    t0 = time.perf_counter()
    results = theory_suite(ctx.seed, ctx.cfg["theory"]["quick"], ctx.threads)
    ctx.timing["theory_seconds"] = time.perf_counter() - t0
    ctx.emit_json("theory.json", {"results": [r.to_dict() for r in results]})
    print(f"{'check':<20}{'trials':>8}{'statistic':>14}{'theory':>14}  result")
    for r in results:
        print(f"{r.name:<20}{r.trials:>8}{r.statistic:>14.4g}{r.theory:>14.4g}  {'pass' if r.passed else 'FAIL'}")
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAIL


def cmd_gen_synth(ctx: Context, args) -> int:
    s = ctx.cfg["data"]["synthetic"]
    data = gaussian_blobs(s["n"], s["d"], s["n_classes"], s["separation"], s["seed"])
    write_synthetic_csv(ctx.out / "data.csv", data)
    ctx.files.append("data.csv")
    return EXIT_OK


def cmd_pipeline(ctx: Context, args) -> int:
    """Train, then sweep, metrics, ensemble, select and theory checks, with one canonical report."""
    steps = [("train", cmd_train), ("sweep", cmd_sweep), ("metrics", cmd_metrics), ("ensemble", cmd_ensemble),
             ("select", cmd_select), ("theory", cmd_verify_theory)]
    args.model, args.set = None, None
    combined = {}
    for name, fn in steps:
        t0 = time.perf_counter()
        before = len(ctx.files)
        status = fn(ctx, args)
        ctx.timing[f"{name}_seconds"] = time.perf_counter() - t0
        for f in ctx.files[before:]:
            if f.endswith(".json") and "/" not in f:
                combined[f"{name}/{f}"] = json.loads((ctx.out / f).read_text())
        for f in list(ctx.files[before:]):
            if "/" not in f and not f.startswith(name):
                new = f"{name}_{f}"
                (ctx.out / f).rename(ctx.out / new)
                ctx.files[ctx.files.index(f)] = new
    variance = filtered_vs_unfiltered_variance(
        *load_base(ctx, None), _dropout(ctx.cfg["metrics"]["family"], ctx.cfg["metrics"]["param"],
                                        derive_seed(ctx.seed, 8)),
        ctx.cfg["metrics"]["m"], ctx.rashomon_data(), ctx.epsilon, 0.8, ctx.eval_data().X, ctx.loss, ctx.threads)
    combined["variance"] = variance.to_dict()
    ctx.emit_json("variance.json", variance.to_dict())
    (ctx.out / "canonical.json").write_text(canonical_json({**combined, "provenance": ctx.provenance()}))
    ctx.files.append("canonical.json")
    return status


HANDLERS = {"train": cmd_train, "sweep": cmd_sweep, "retrain": cmd_retrain, "awp": cmd_awp, "metrics": cmd_metrics,
            "ensemble": cmd_ensemble, "select": cmd_select, "verify-theory": cmd_verify_theory,
            "gen-synth": cmd_gen_synth, "pipeline": cmd_pipeline}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dropout-rashomon",
                                     description="Rashomon-set exploration with dropout and multiplicity metrics.")
    parser.add_argument("--version", action="version", version=__version__)
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run configuration")
    common.add_argument("--seed", type=int, help="master seed (u64)")
    common.add_argument("--threads", type=int, default=None, help="worker threads (default: CPU count)")
    common.add_argument("--out", default="out", help="output directory")
    common.add_argument("--data", help="CSV dataset (default: bundled synthetic blobs)")
    common.add_argument("--label", help="label column of the CSV")
    common.add_argument("--epsilon", help="Rashomon parameter (number or 'inf')")
    common.add_argument("--model", help="trained base model (default: <out>/models/base.npz)")
    common.add_argument("--set", help="saved Rashomon set directory (metrics command)")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=(HANDLERS[name].__doc__ or name).strip().splitlines()[0]
                       if HANDLERS[name].__doc__ else name)
    return parser


def _overrides(args) -> dict:
    o: dict = {}
    if args.seed is not None:
        o["seed"] = args.seed
    data = {}
    if args.data is not None:
        data["path"] = args.data
    if args.label is not None:
        data["label"] = args.label
    if data:
        o["data"] = data
    if args.epsilon is not None:
        try:
            eps = "inf" if args.epsilon == "inf" else float(args.epsilon)
        except ValueError:
            raise ConfigError("--epsilon", f"expected a number or 'inf', got {args.epsilon!r}") from None
        o["rashomon"] = {"epsilon": eps}
    return o


def _error_json(kind: str, exc: BaseException, **extra) -> str:
    return json.dumps({"error": kind, "type": type(exc).__name__, "message": str(exc), **extra}, sort_keys=True)


def main(argv: Optional[list] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    out = Path(args.out)
    try:
        cfg = load_config(args.config, _overrides(args))
        threads = args.threads if args.threads is not None else (os.cpu_count() or 1)
        if threads < 1:
            raise ConfigError("--threads", "must be >= 1")
    except ConfigError as exc:
        print(_error_json("config", exc, field=exc.field), file=sys.stderr)
        return EXIT_CONFIG
    out.mkdir(parents=True, exist_ok=True)
    ctx = Context(cfg, out, threads, args.command)
    t0 = time.perf_counter()
    try:
        status = HANDLERS[args.command](ctx, args)
    except ConfigError as exc:
        print(_error_json("config", exc, field=exc.field), file=sys.stderr)
        return EXIT_CONFIG
    except AssertionError as exc:
        print(_error_json("invariant", exc), file=sys.stderr)
        ctx.write_manifest("invariant-failed")
        return EXIT_FAIL
    except Exception as exc:  # noqa: BLE001 - reported as structured JSON
        print(_error_json("runtime", exc), file=sys.stderr)
        ctx.write_manifest("error")
        return EXIT_FAIL
    ctx.timing["total_seconds"] = time.perf_counter() - t0
    ctx.write_manifest("ok" if status == EXIT_OK else "failed")
    return status


if __name__ == "__main__":
    sys.exit(main())
