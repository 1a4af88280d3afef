"""Metrics and the experiment harness.

Metrics work on arrays of predictions against ground truth.  The harness
expands an experiment matrix into *cells* (one trained model evaluated on
one held-out series), trains and evaluates each cell, caches every result
on disk keyed by a hash of its configuration, and writes CSV tables plus a
JSON bundle.

Matrix files are TOML::

    [experiment]
    seed = 0
    min_gap = 20

    [[tables]]
    name = "gi_training_size"
    env = "gi"
    N = [10, 15, 20]
    test_offsets = [-0.1, 0.0, 0.1]
    modes = ["evolving"]
    methods = ["eggp", "gpr"]

See ``data/paper_tables.toml`` for every supported key.
"""

from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import os
import tempfile
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import gp
from .errors import EggpError, InvalidInputError
from .kernels import default_mask
from .model import (
    FittedEggp,
    fit_from_series,
    model_from_json,
    model_to_json,
    predict_series,
    transition_targets,
)
from .simulators import (
    EIS_CONNECTIVITY,
    GI_CONNECTIVITY,
    GiConfig,
    eis_config_for,
    simulate_eis,
    simulate_gi,
)

log = logging.getLogger(__name__)

CSV_HEADER = ("env", "N", "offset", "M", "mode", "method", "target", "rmse", "mape", "nll", "seed")
TARGET_NAMES = ("dx", "dy", "dz")
MAPE_FLOOR = 1e-8
VAR_FLOOR = 1e-12
CACHE_VERSION = 1


# ---------------------------------------------------------------------------
# metrics


def _pair(pred, truth):
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise InvalidInputError(f"shape mismatch: {pred.shape} vs {truth.shape}")
    if pred.size == 0:
        raise InvalidInputError("empty input")
    return pred, truth


def rmse(pred, truth) -> float:
    """Root of the mean squared error over all entries."""
    pred, truth = _pair(pred, truth)
    return float(np.sqrt(np.mean((pred - truth) ** 2)))


def mape(pred, truth, floor: Optional[float] = MAPE_FLOOR) -> float:
    """Mean of ``|pred - truth| / max(|truth|, floor)``.

    ``floor=None`` divides by ``|truth|`` unguarded, which gives ``inf`` (or
    ``nan`` for exact hits) on zero-valued truth entries.
    """
    pred, truth = _pair(pred, truth)
    denom = np.abs(truth) if floor is None else np.maximum(np.abs(truth), floor)
    with np.errstate(divide="ignore", invalid="ignore"):
        return float(np.mean(np.abs(pred - truth) / denom))


def nll(mean, var, truth) -> float:
    """Mean Gaussian negative log density; variances are floored at 1e-12."""
    mean, truth = _pair(mean, truth)
    var = np.asarray(var, dtype=np.float64)
    if var.shape != mean.shape:
        raise InvalidInputError(f"shape mismatch: variance {var.shape} vs mean {mean.shape}")
    if np.any(var < 0):
        raise InvalidInputError("negative predictive variance")
    var = np.maximum(var, VAR_FLOOR)
    return float(np.mean(0.5 * np.log(2.0 * np.pi * var) + (truth - mean) ** 2 / (2.0 * var)))


@dataclass
class MetricReport:
    """Metrics of one model on one test series, overall and per target."""

    env: str
    N: int
    offset: Optional[float]
    M: int
    mode: str
    method: str
    seed: int
    rmse: float = math.nan
    mape: float = math.nan
    mape_raw: float = math.nan
    nll: float = math.nan
    count: int = 0
    per_target: dict = field(default_factory=dict)
    status: str = "ok"
    error: Optional[str] = None
    table: str = ""
    cell: str = ""
    flags: list = field(default_factory=list)

    def __post_init__(self):
        if self.status == "ok":
            if not (self.rmse >= 0 and self.mape >= 0):
                raise InvalidInputError("rmse and mape must be non-negative")
            # non-finite values are legal but must be visible
            self.flags = sorted(
                name for name in ("rmse", "mape", "mape_raw", "nll") if not math.isfinite(getattr(self, name))
            )

    def rows(self) -> list[list]:
        """CSV rows: one per target plus an ``all`` row."""
        base = [self.env, self.N, _fmt_opt(self.offset), self.M, self.mode, self.method]
        out = []
        for name, m in self.per_target.items():
            out.append(base + [name, _fmt(m["rmse"]), _fmt(m["mape"]), _fmt(m["nll"]), self.seed])
        out.append(base + ["all", _fmt(self.rmse), _fmt(self.mape), _fmt(self.nll), self.seed])
        return out

    def to_json(self) -> dict:
        return asdict(self)

    @classmethod
    def from_json(cls, d: dict) -> "MetricReport":
        return cls(**d)


def _fmt(x) -> str:
    # repr is the shortest string that round-trips a float64 exactly
    return repr(float(x))


def _fmt_opt(x) -> str:
    return "" if x is None else _fmt(x)


def metric_block(mean, var, truth) -> dict:
    return {
        "rmse": rmse(mean, truth),
        "mape": mape(mean, truth),
        "mape_raw": mape(mean, truth, floor=None),
        "nll": nll(mean, var, truth),
        "count": int(np.asarray(truth).size),
    }


def evaluate(model: FittedEggp, series, targets: Sequence[int], include_noise: bool = True) -> dict:
    """One-step-ahead metrics of ``model`` on ``series``.

    Every snapshot but the last is a query; the truth is the next
    displacement.  Predictions always start from ground-truth states.
    """
    truth = transition_targets(series)[..., list(targets)]
    neighbors = series[0].neighbors if model.mode == "fixed" else None
    mean, var = predict_series(model, series[:-1], include_noise=include_noise, neighbors=neighbors)
    mean, var = mean[..., list(targets)], var[..., list(targets)]
    overall = metric_block(mean, var, truth)
    overall["per_target"] = {
        TARGET_NAMES[t]: {k: v for k, v in metric_block(mean[..., j], var[..., j], truth[..., j]).items()}
        for j, t in enumerate(targets)
    }
    return overall


# ---------------------------------------------------------------------------
# experiment matrix


@dataclass(frozen=True)
class TrainSpec:
    """Everything that determines a trained model."""

    env: str
    N: int
    mode: str
    method: str
    seed: int
    min_gap: int
    iterations: int
    learning_rate: float
    train_offset: float = 0.0
    train_M: int = 44
    train_seeds: tuple = (0,)
    steps: Optional[int] = None

    def key(self) -> str:
        return config_hash({**asdict(self), "v": CACHE_VERSION})


@dataclass(frozen=True)
class HeldOutSpec:
    offset: Optional[float]
    M: int
    seed: int


@dataclass(frozen=True)
class Cell:
    table: str
    train: TrainSpec
    test: HeldOutSpec

    def key(self) -> str:
        return config_hash({"train": asdict(self.train), "test": asdict(self.test), "v": CACHE_VERSION})


def config_hash(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()[:20]


_TABLE_KEYS = {
    "name", "env", "N", "modes", "methods", "train_offset", "test_offsets", "train_M",
    "train_seeds", "test_M", "test_seeds", "steps",
}
_EXPERIMENT_KEYS = {"seed", "min_gap", "iterations", "learning_rate"}


def expand_matrix(matrix: dict) -> list[Cell]:
    """Turn a parsed matrix into cells, in a deterministic order."""
    exp = dict(matrix.get("experiment", {}))
    unknown = set(exp) - _EXPERIMENT_KEYS
    if unknown:
        raise InvalidInputError(f"unknown [experiment] keys: {sorted(unknown)}")
    seed = int(exp.get("seed", 0))
    min_gap = int(exp.get("min_gap", 20))
    iterations = int(exp.get("iterations", gp.AdamConfig().iterations))
    lr = float(exp.get("learning_rate", gp.AdamConfig().learning_rate))
    tables = matrix.get("tables", [])
    if not tables:
        raise InvalidInputError("experiment matrix has no tables")
    cells = []
    names = set()
    for t in tables:
        unknown = set(t) - _TABLE_KEYS
        if unknown:
            raise InvalidInputError(f"table {t.get('name')!r}: unknown keys {sorted(unknown)}")
        name = t.get("name")
        if not name or name in names:
            raise InvalidInputError(f"every table needs a unique name, got {name!r}")
        names.add(name)
        env = t.get("env")
        if env not in ("gi", "eis"):
            raise InvalidInputError(f"table {name!r}: env must be 'gi' or 'eis'")
        ns = [int(n) for n in _as_list(t.get("N", []))]
        modes = _as_list(t.get("modes", ["evolving"]))
        methods = _as_list(t.get("methods", ["eggp", "gpr"]))
        if not ns or not modes or not methods:
            raise InvalidInputError(f"table {name!r}: N, modes and methods must be non-empty")
        for m in modes:
            if m not in ("evolving", "fixed"):
                raise InvalidInputError(f"table {name!r}: unknown mode {m!r}")
        for m in methods:
            if m not in ("eggp", "gpr"):
                raise InvalidInputError(f"table {name!r}: unknown method {m!r}")
        steps = t.get("steps")
        if env == "gi":
            tests = [HeldOutSpec(float(o), 31, seed) for o in _as_list(t.get("test_offsets", [0.0]))]
            train_kw = {"train_offset": float(t.get("train_offset", 0.0)), "train_M": 31, "train_seeds": (seed,)}
        else:
            test_m = [int(m) for m in _as_list(t.get("test_M", [44]))]
            test_seeds = [int(s) for s in _as_list(t.get("test_seeds", [100 + i for i in range(len(test_m))]))]
            if len(test_seeds) != len(test_m):
                raise InvalidInputError(f"table {name!r}: test_seeds must align with test_M")
            tests = [HeldOutSpec(None, m, s) for m, s in zip(test_m, test_seeds)]
            train_kw = {
                "train_M": int(t.get("train_M", 44)),
                "train_seeds": tuple(int(s) for s in _as_list(t.get("train_seeds", [seed]))),
            }
        if not tests:
            raise InvalidInputError(f"table {name!r} has no test sets")
        for n in ns:
            for mode in modes:
                for method in methods:
                    spec = TrainSpec(
                        env, n, mode, method, seed, min_gap, iterations, lr,
                        steps=None if steps is None else int(steps), **train_kw,
                    )
                    cells += [Cell(name, spec, test) for test in tests]
    return cells


def _as_list(x):
    return list(x) if isinstance(x, (list, tuple)) else [x]


def load_matrix(path) -> dict:
    try:
        import tomllib
    except ModuleNotFoundError:  # Python < 3.11
        import tomli as tomllib
    with open(path, "rb") as fh:
        return tomllib.load(fh)


def bundled_matrix_path() -> Path:
    return Path(__file__).with_name("data") / "paper_tables.toml"


# ---------------------------------------------------------------------------
# data and training for cells


def _gi_series(offset: float, steps: Optional[int]):
    kw = {"rope_offset": offset}
    if steps is not None:
        kw["steps"] = steps
    return simulate_gi(GiConfig(**kw)).series()


def _eis_series(m: int, seed: int, steps: Optional[int]):
    kw = {} if steps is None else {"steps": steps}
    return simulate_eis(eis_config_for(m, seed, **kw)).series()


def training_series(spec: TrainSpec):
    if spec.env == "gi":
        return [_gi_series(spec.train_offset, spec.steps)]
    return [_eis_series(spec.train_M, s, spec.steps) for s in spec.train_seeds]


def held_out_series(spec: TrainSpec, test: HeldOutSpec):
    if spec.env == "gi":
        return _gi_series(test.offset, spec.steps)
    return _eis_series(test.M, test.seed, spec.steps)


def eval_targets(env: str) -> list[int]:
    """Velocity components scored for ``env``.

    Both environments are scored on (dx, dy); the GI layout's third
    coordinate is identically zero and carries no signal.
    """
    return [0, 1]


def train_model(spec: TrainSpec) -> FittedEggp:
    series = training_series(spec)
    return fit_from_series(
        series,
        spec.N,
        spec.min_gap,
        kind=spec.method,
        mask=default_mask(spec.env, series[0][0].attribute_dim),
        mode=spec.mode,
        adam=gp.AdamConfig(spec.learning_rate, spec.iterations),
        connectivity=GI_CONNECTIVITY if spec.env == "gi" else EIS_CONNECTIVITY,
    )


# ---------------------------------------------------------------------------
# on-disk cache


def atomic_write(path, data) -> None:
    """Write ``data`` (str or bytes) to ``path`` via a temp file and rename."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        data = data.encode("utf-8")
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


class ResultCache:
    """Cell results and trained models stored as JSON files under ``root``."""

    def __init__(self, root):
        self.root = Path(root)

    def _cell_path(self, cell: Cell) -> Path:
        return self.root / "cells" / f"{cell.key()}.json"

    def _model_path(self, spec: TrainSpec) -> Path:
        return self.root / "models" / f"{spec.key()}.json"

    def get_cell(self, cell: Cell) -> Optional[MetricReport]:
        p = self._cell_path(cell)
        if not p.exists():
            return None
        rep = MetricReport.from_json(json.loads(p.read_text(encoding="utf-8")))
        rep.table = cell.table
        return rep

    def put_cell(self, cell: Cell, report: MetricReport) -> None:
        atomic_write(self._cell_path(cell), json.dumps(report.to_json(), sort_keys=True) + "\n")

    def get_model(self, spec: TrainSpec) -> Optional[FittedEggp]:
        p = self._model_path(spec)
        if not p.exists():
            return None
        return model_from_json(json.loads(p.read_text(encoding="utf-8")))

    def put_model(self, spec: TrainSpec, model: FittedEggp) -> None:
        atomic_write(self._model_path(spec), json.dumps(model_to_json(model), separators=(",", ":")) + "\n")


def _report_for(cell: Cell, metrics: Optional[dict], error: Optional[str]) -> MetricReport:
    t, s = cell.test, cell.train
    head = dict(env=s.env, N=s.N, offset=t.offset, M=t.M, mode=s.mode, method=s.method, seed=s.seed,
                table=cell.table, cell=cell.key())
    if error is not None:
        return MetricReport(**head, status="failed", error=error)
    return MetricReport(
        **head, rmse=metrics["rmse"], mape=metrics["mape"], mape_raw=metrics["mape_raw"],
        nll=metrics["nll"], count=metrics["count"], per_target=metrics["per_target"],
    )


def _run_unit(spec: TrainSpec, cells: list[Cell], cache_root: Optional[str]) -> list[MetricReport]:
    """Train (or load) one model and evaluate it on the given cells."""
    cache = ResultCache(cache_root) if cache_root else None
    model = cache.get_model(spec) if cache else None
    if model is None:
        try:
            model = train_model(spec)
        except (EggpError, np.linalg.LinAlgError) as exc:
            log.warning("training failed for %s: %s", spec, exc)
            reports = [_report_for(c, None, f"training failed: {exc}") for c in cells]
            if cache:
                for c, r in zip(cells, reports):
                    cache.put_cell(c, r)
            return reports
        if cache:
            cache.put_model(spec, model)
    reports = []
    for cell in cells:
        try:
            metrics = evaluate(model, held_out_series(spec, cell.test), eval_targets(spec.env))
            rep = _report_for(cell, metrics, None)
        except (EggpError, np.linalg.LinAlgError, ValueError) as exc:
            log.warning("evaluation failed for cell %s: %s", cell.key(), exc)
            rep = _report_for(cell, None, f"evaluation failed: {exc}")
        if cache:
            cache.put_cell(cell, rep)
        reports.append(rep)
    return reports


@dataclass
class ExperimentResult:
    reports: list[MetricReport]
    computed: int
    reused: int
    files: list[Path] = field(default_factory=list)

    def table(self, name: str) -> list[MetricReport]:
        return [r for r in self.reports if r.table == name]


def run_experiment(
    matrix: dict,
    out_dir=None,
    cache_dir=None,
    jobs: int = 1,
    svg: bool = False,
) -> ExperimentResult:
    """Run every cell of ``matrix``; reuse cached cells; write tables.

    Cells sharing a trained model are grouped so each model is fitted once.
    ``cache_dir`` defaults to ``out_dir/cache``.
    """
    cells = expand_matrix(matrix)
    if cache_dir is None and out_dir is not None:
        cache_dir = Path(out_dir) / "cache"
    cache = ResultCache(cache_dir) if cache_dir is not None else None

    done: dict[str, MetricReport] = {}
    todo: dict[TrainSpec, list[Cell]] = {}
    seen = set()
    for cell in cells:
        k = cell.key()
        if k in seen:
            continue
        seen.add(k)
        hit = cache.get_cell(cell) if cache else None
        if hit is not None:
            done[k] = hit
        else:
            todo.setdefault(cell.train, []).append(cell)
    reused = len(done)
    units = list(todo.items())
    root = str(cache_dir) if cache_dir is not None else None
    if jobs > 1 and len(units) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(_run_unit, spec, cs, root) for spec, cs in units]
            results = [f.result() for f in futures]
    else:
        results = [_run_unit(spec, cs, root) for spec, cs in units]
    computed = 0
    for (spec, cs), reps in zip(units, results):
        for c, r in zip(cs, reps):
            done[c.key()] = r
            computed += 1

    reports = []
    for cell in cells:
        r = done[cell.key()]
        # a cell may be listed in several tables; report it under each
        r = MetricReport.from_json({**r.to_json(), "table": cell.table, "cell": cell.key()})
        reports.append(r)
    result = ExperimentResult(reports, computed, reused)
    if out_dir is not None:
        result.files = write_outputs(result, matrix, out_dir, svg=svg)
    return result


# ---------------------------------------------------------------------------
# outputs


def table_csv(reports: Sequence[MetricReport]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in reports:
        w.writerows(r.rows())
    return buf.getvalue()


def summarize(reports: Sequence[MetricReport], by=("N", "mode", "method")) -> list[dict]:
    """Average ``all``-target metrics over test sets within each group."""
    groups: dict[tuple, list[MetricReport]] = {}
    for r in reports:
        if r.status == "ok":
            groups.setdefault(tuple(getattr(r, k) for k in by), []).append(r)
    out = []
    for key in groups:
        rs = groups[key]
        out.append(
            {
                **dict(zip(by, key)),
                "rmse": float(np.mean([r.rmse for r in rs])),
                "mape": float(np.mean([r.mape for r in rs])),
                "nll": float(np.mean([r.nll for r in rs])),
                "test_sets": len(rs),
            }
        )
    return out


def write_outputs(result: ExperimentResult, matrix: dict, out_dir, svg: bool = False) -> list[Path]:
    out_dir = Path(out_dir)
    files = []
    names = list(dict.fromkeys(r.table for r in result.reports))
    for name in names:
        path = out_dir / f"{name}.csv"
        atomic_write(path, table_csv(result.table(name)))
        files.append(path)
        if svg:
            plot = rmse_svg(result.table(name), name)
            if plot is not None:
                p = out_dir / f"{name}.svg"
                atomic_write(p, plot)
                files.append(p)
    bundle = {
        "matrix": matrix,
        "tables": {
            name: {
                "reports": [r.to_json() for r in result.table(name)],
                "summary": summarize(result.table(name)),
            }
            for name in names
        },
        "failed_cells": sorted({r.cell for r in result.reports if r.status != "ok"}),
    }
    path = out_dir / "report.json"
    atomic_write(path, json.dumps(bundle, indent=1, sort_keys=True, default=_json_default) + "\n")
    files.append(path)
    return files


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(f"cannot serialize {type(o).__name__}")


def rmse_svg(reports: Sequence[MetricReport], title: str, width: int = 480, height: int = 320) -> Optional[str]:
    """RMSE-vs-offset line plot, one line per (N, mode, method); ``None`` for tables without offsets."""
    pts = [r for r in reports if r.offset is not None and r.status == "ok"]
    if not pts:
        return None
    series: dict[str, list[tuple[float, float]]] = {}
    for r in pts:
        series.setdefault(f"{r.method} {r.mode} N={r.N}", []).append((r.offset, r.rmse))
    xs = [x for s in series.values() for x, _ in s]
    ys = [y for s in series.values() for _, y in s]
    x0, x1 = min(xs), max(xs)
    y0, y1 = 0.0, max(ys) * 1.05 or 1.0
    left, right, top, bottom = 60, 140, 30, 40
    pw, ph = width - left - right, height - top - bottom

    def sx(x):
        return left + (pw * (x - x0) / (x1 - x0) if x1 > x0 else pw / 2)

    def sy(y):
        return top + ph * (1 - (y - y0) / (y1 - y0))

    colors = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f"]
    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">',
        f'<text x="{width / 2:.1f}" y="18" text-anchor="middle">{title}: RMSE vs offset</text>',
        f'<line x1="{left}" y1="{top + ph}" x2="{left + pw}" y2="{top + ph}" stroke="black"/>',
        f'<line x1="{left}" y1="{top}" x2="{left}" y2="{top + ph}" stroke="black"/>',
        f'<text x="{left}" y="{top + ph + 15}" text-anchor="middle">{x0:g}</text>',
        f'<text x="{left + pw}" y="{top + ph + 15}" text-anchor="middle">{x1:g}</text>',
        f'<text x="{left - 4}" y="{top + 4}" text-anchor="end">{y1:.3g}</text>',
        f'<text x="{left - 4}" y="{top + ph}" text-anchor="end">0</text>',
    ]
    for i, (label, s) in enumerate(sorted(series.items())):
        s = sorted(s)
        c = colors[i % len(colors)]
        path = " ".join(f"{sx(x):.1f},{sy(y):.1f}" for x, y in s)
        parts.append(f'<polyline fill="none" stroke="{c}" stroke-width="1.5" points="{path}"/>')
        parts.append(f'<text x="{left + pw + 8}" y="{top + 12 + 14 * i}" fill="{c}">{label}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
