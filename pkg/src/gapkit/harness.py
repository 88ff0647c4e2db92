"""Benchmark harness: config parsing, replicated runs and paired comparison.

Configs are plain key/value text files with [section] headers (JSON is also
accepted); every replicate derives its randomness from the config seed plus
the replicate index, so a run is reproducible byte-for-byte from its emitted
manifest.
"""
from __future__ import annotations

import configparser
import csv
import io
import json
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import binomtest

from . import __version__
from .completion import hard_impute, soft_impute
from .core import IncompleteMatrix, SeedSpec, format_float, read_matrix_csv, rmse_missing
from .imputation import ImputerKind, ImputerSpec, run_imputer
from .mechanisms import MechanismKind, MechanismSpec, gen_mask

RESULT_HEADER = ("replicate", "metric", "value")


class ConfigError(ValueError):
    """Invalid or inconsistent experiment configuration."""


@dataclass
class ExperimentConfig:
    dataset: dict
    mechanism: dict
    method: dict
    metrics: tuple = ("rmse",)
    replicates: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.replicates < 1:
            raise ConfigError("replicates must be >= 1")
        self.metrics = tuple(self.metrics)
        path = self.dataset.get("path")
        if path is not None and not os.path.exists(path):
            raise ConfigError(f"dataset file not found: {path}")

    def to_dict(self) -> dict:
        return {
            "dataset": dict(self.dataset),
            "mechanism": dict(self.mechanism),
            "method": dict(self.method),
            "metrics": list(self.metrics),
            "replicates": self.replicates,
            "seed": self.seed,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        try:
            return cls(
                dataset=dict(d["dataset"]),
                mechanism=dict(d.get("mechanism", {"kind": "none"})),
                method=dict(d["method"]),
                metrics=tuple(d.get("metrics", ("rmse",))),
                replicates=int(d.get("replicates", 1)),
                seed=int(d.get("seed", 0)),
            )
        except KeyError as exc:
            raise ConfigError(f"missing config section: {exc}") from exc


def _coerce(value: str):
    try:
        return json.loads(value)
    except (json.JSONDecodeError, ValueError):
        return value


def load_config(path) -> ExperimentConfig:
    """Read a config from sectioned key/value text or JSON."""
    with open(path, "r", encoding="utf-8") as fh:
        text = fh.read()
    if text.lstrip().startswith("{"):
        return ExperimentConfig.from_dict(json.loads(text))
    parser = configparser.ConfigParser()
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(f"cannot parse config {path}: {exc}") from exc
    d: dict = {}
    for section in parser.sections():
        d[section] = {k: _coerce(v) for k, v in parser.items(section)}
    run = d.pop("run", {})
    metrics = run.get("metrics", "rmse")
    if isinstance(metrics, str):
        metrics = tuple(m.strip() for m in metrics.split(",") if m.strip())
    return ExperimentConfig(
        dataset=d.get("dataset", {}),
        mechanism=d.get("mechanism", {"kind": "none"}),
        method=d.get("method", {}),
        metrics=metrics,
        replicates=int(run.get("replicates", 1)),
        seed=int(run.get("seed", 0)),
    )


# ---------------------------------------------------------------------------
# Dataset generators and method dispatch.
# ---------------------------------------------------------------------------


def _make_dataset(spec: dict, seed: SeedSpec):
    kind = spec.get("kind", "gaussian")
    rng = seed.rng()
    if kind == "gaussian":
        p = int(spec.get("p", 5))
        n = int(spec.get("n", 200))
        rho = float(spec.get("rho", 0.5))
        sigma = rho ** np.abs(np.subtract.outer(np.arange(p), np.arange(p)))
        L = np.linalg.cholesky(sigma)
        return L @ rng.standard_normal((p, n))
    if kind == "lowrank":
        p = int(spec.get("p", 50))
        n = int(spec.get("n", 50))
        r = int(spec.get("rank", 2))
        noise = float(spec.get("noise", 0.0))
        X = rng.standard_normal((p, r)) @ rng.standard_normal((r, n))
        if noise > 0:
            X = X + noise * rng.standard_normal((p, n))
        return X
    if kind == "csv":
        return read_matrix_csv(spec["path"]).values
    raise ConfigError(f"unknown dataset kind {kind!r}")


def _make_mechanism(spec: dict) -> MechanismSpec | None:
    kind = spec.get("kind", "none")
    if kind == "none":
        return None
    try:
        mk = MechanismKind(kind)
    except ValueError as exc:
        raise ConfigError(f"unknown mechanism kind {kind!r}") from exc
    return MechanismSpec(
        mk,
        rate=float(spec.get("rate", 0.2)),
        driver_row=int(spec.get("driver_row", 0)),
        phi0=float(spec.get("phi0", 0.0)),
        phi1=float(spec.get("phi1", 1.0)),
    )


def _locf_fill(X: IncompleteMatrix):
    """Row-wise last observation carried forward (leading gaps filled backward)."""
    out = X.values.copy()
    for i in range(X.p):
        obs = np.flatnonzero(X.mask[i] == 1)
        if len(obs) == 0:
            raise ValueError(f"fully missing row {i}")
        idx = np.searchsorted(obs, np.arange(X.n), side="right") - 1
        idx = np.clip(idx, 0, len(obs) - 1)
        out[i] = X.values[i, obs[idx]]
        out[i, X.mask[i] == 1] = X.values[i, X.mask[i] == 1]
    return out


def _linear_fill(X: IncompleteMatrix):
    """Row-wise linear interpolation over the column index (flat at the ends)."""
    out = X.values.copy()
    for i in range(X.p):
        obs = np.flatnonzero(X.mask[i] == 1)
        if len(obs) == 0:
            raise ValueError(f"fully missing row {i}")
        holes = np.flatnonzero(X.mask[i] == 0)
        out[i, holes] = np.interp(holes, obs, X.values[i, obs])
    return out


def _run_method(spec: dict, X: IncompleteMatrix, seed: SeedSpec):
    module = spec.get("module", "impute")
    if module == "impute":
        name = spec.get("method", "mean")
        # trivial time-series comparators live only here in the harness
        if name == "locf":
            return _locf_fill(X)
        if name == "linear":
            return _linear_fill(X)
        try:
            kind = ImputerKind(name)
        except ValueError as exc:
            raise ConfigError(f"unknown imputation method {name!r}") from exc
        imp = ImputerSpec(
            kind,
            k=int(spec.get("k", 5)),
            add_noise=bool(spec.get("add_noise", False)),
            ridge_penalty=float(spec.get("ridge_penalty", 1e-3)),
            max_sweeps=int(spec.get("max_sweeps", 50)),
            tol=float(spec.get("tol", 1e-6)),
        )
        return run_imputer(X, imp, seed)
    if module == "complete":
        mode = spec.get("mode", "hard")
        if mode == "hard":
            return hard_impute(
                X,
                int(spec.get("rank", 2)),
                tol=float(spec.get("tol", 1e-6)),
                max_iter=int(spec.get("max_iter", 500)),
            ).X
        if mode == "soft":
            return soft_impute(
                X,
                float(spec.get("lam", 1.0)),
                tol=float(spec.get("tol", 1e-6)),
                max_iter=int(spec.get("max_iter", 500)),
            ).X
        raise ConfigError(f"unknown completion mode {mode!r}")
    raise ConfigError(f"unknown method module {module!r}")


def _mae_missing(Xhat, Xtrue, mask):
    hole = np.asarray(mask) == 0
    if not hole.any():
        raise ValueError("empty evaluation set: no masked entries")
    return float(np.mean(np.abs(np.asarray(Xhat)[hole] - np.asarray(Xtrue)[hole])))


_METRICS = {"rmse": rmse_missing, "mae": _mae_missing}


@dataclass
class ExperimentResult:
    rows: list = field(default_factory=list)  # (replicate, metric, value)
    notes: list = field(default_factory=list)  # metric-level reports
    failures: list = field(default_factory=list)  # replicate-level errors
    n_replicates: int = 0
    manifest: dict = field(default_factory=dict)

    @property
    def all_failed(self) -> bool:
        failed = {r for r, _ in self.failures}
        return self.n_replicates > 0 and len(failed) == self.n_replicates

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(RESULT_HEADER)
        for rep, metric, value in sorted(self.rows, key=lambda r: (r[0], r[1])):
            writer.writerow([rep, metric, format_float(value)])
        for rep, message in sorted(self.notes, key=lambda r: (r[0], r[1])):
            writer.writerow([rep, "note", message])
        for rep, message in sorted(self.failures, key=lambda r: (r[0], r[1])):
            writer.writerow([rep, "error", message])
        return buf.getvalue()

    def manifest_json(self) -> str:
        return json.dumps(self.manifest, sort_keys=True, indent=2) + "\n"


def _one_replicate(config: ExperimentConfig, rep: int):
    base = SeedSpec(config.seed, rep * 16)
    Xtrue = _make_dataset(config.dataset, base)
    mech = _make_mechanism(config.mechanism)
    if mech is None:
        mask = np.ones(Xtrue.shape, dtype=np.int8)
    else:
        mask = gen_mask(Xtrue.shape, mech, X=Xtrue, seed=base.substream(1))
    X = IncompleteMatrix(Xtrue, mask)
    Xhat = _run_method(config.method, X, base.substream(2))
    rows = []
    notes = []
    for metric in config.metrics:
        if metric not in _METRICS:
            raise ConfigError(f"unknown metric {metric!r}")
        try:
            rows.append((rep, metric, _METRICS[metric](Xhat, Xtrue, mask)))
        except ValueError as exc:
            notes.append((rep, f"{metric}: {exc}"))
    return rows, notes


def run_experiment(config: ExperimentConfig) -> ExperimentResult:
    """Run every replicate, collecting one row per (replicate, metric).

    Replicate errors are recorded and the run continues; metric evaluations
    that fail (for example an empty evaluation set) are reported as notes
    without failing the replicate. GAPKIT_THREADS > 1 runs replicates in a
    thread pool; results are sorted before emission either way.
    """
    result = ExperimentResult(n_replicates=config.replicates)
    result.manifest = {
        "config": config.to_dict(),
        "gapkit_version": __version__,
        "result_header": list(RESULT_HEADER),
    }
    threads = int(os.environ.get("GAPKIT_THREADS", "1") or "1")
    reps = range(config.replicates)
    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            outcomes = list(pool.map(lambda r: _safe_replicate(config, r), reps))
    else:
        outcomes = [_safe_replicate(config, r) for r in reps]
    for rows, notes, failures in outcomes:
        result.rows.extend(rows)
        result.notes.extend(notes)
        result.failures.extend(failures)
    return result


def _safe_replicate(config, rep):
    try:
        rows, notes = _one_replicate(config, rep)
        return rows, notes, []
    except ConfigError:
        raise
    except Exception as exc:  # per-replicate failure is recorded, not fatal
        return [], [], [(rep, f"replicate failed: {exc}")]


def run_from_manifest(manifest: dict) -> ExperimentResult:
    return run_experiment(ExperimentConfig.from_dict(manifest["config"]))


# ---------------------------------------------------------------------------
# Paired comparison across method configs.
# ---------------------------------------------------------------------------


@dataclass
class ComparisonRow:
    label: str
    metric: str
    median: float
    p_value: float
    wins: int
    n_pairs: int


def compare_methods(configs: list[ExperimentConfig]) -> list[ComparisonRow]:
    """Aligned-seed comparison of >= 2 methods on one dataset and mechanism.

    All configs must share dataset, mechanism, seed and replicate count; the
    first config is the baseline. Each later method gets a two-sided sign
    test on the paired per-replicate metric differences against the baseline
    (p = 1 when nothing differs, as in a self-comparison).
    """
    if len(configs) < 2:
        raise ConfigError("compare_methods needs at least two configs")
    head = configs[0]
    for other in configs[1:]:
        if other.dataset != head.dataset or other.mechanism != head.mechanism:
            raise ConfigError("configs must share dataset and mechanism")
        if other.seed != head.seed or other.replicates != head.replicates:
            raise ConfigError("configs must share seed and replicate count")
    results = [run_experiment(c) for c in configs]
    tables = []
    for res in results:
        table: dict = {}
        for rep, metric, value in res.rows:
            table[(rep, metric)] = value
        tables.append(table)
    out = []
    for idx, (cfg, table) in enumerate(zip(configs, tables)):
        label = cfg.method.get("label") or _method_label(cfg.method, idx)
        for metric in head.metrics:
            vals = [table[k] for k in sorted(table) if k[1] == metric]
            if not vals:
                continue
            paired = [
                (tables[0].get((rep, metric)), table.get((rep, metric)))
                for rep in range(head.replicates)
            ]
            diffs = [b - a for a, b in paired if a is not None and b is not None]
            nonzero = [d for d in diffs if d != 0.0]
            wins = sum(1 for d in nonzero if d < 0)  # lower metric wins
            p = binomtest(wins, len(nonzero), 0.5).pvalue if nonzero else 1.0
            out.append(
                ComparisonRow(label, metric, float(np.median(vals)), float(p), wins, len(nonzero))
            )
    return out


def _method_label(method: dict, idx: int) -> str:
    module = method.get("module", "impute")
    name = method.get("method") or method.get("mode") or ""
    return f"{idx}:{module}:{name}"


def comparison_csv(rows: list[ComparisonRow]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["label", "metric", "median", "p_value", "wins", "n_pairs"])
    for r in sorted(rows, key=lambda r: (r.label, r.metric)):
        writer.writerow(
            [r.label, r.metric, format_float(r.median), format_float(r.p_value), r.wins, r.n_pairs]
        )
    return buf.getvalue()
