"""Command-line entry point: ``eggp simulate|train|eval|experiment``.

Every command writes a manifest next to its outputs listing the resolved
flags, the echoed config, and a sha256 for each input and output file.
Exit codes: 0 ok, 2 config error, 3 training error, 4 data/model
mismatch, 5 numerical failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import os
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from . import __version__, gp
from .errors import InvalidInputError, NumericalError, RolloutError, TrainingError
from .eval import (
    TARGET_NAMES,
    _fmt,
    atomic_write,
    bundled_matrix_path,
    eval_targets,
    evaluate,
    load_matrix,
    run_experiment,
)
from .graph import ConnectivityConfig, read_series
from .kernels import default_mask
from .model import fit_from_series, load_model, model_to_json, rollout
from .simulators import EIS_CONNECTIVITY, GI_CONNECTIVITY, box_distances, simulate

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_TRAINING = 3
EXIT_MISMATCH = 4
EXIT_NUMERICAL = 5


class CliError(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


# ---------------------------------------------------------------------------
# helpers


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _file_entries(paths) -> list[dict]:
    return [{"path": str(p), "sha256": sha256_file(p)} for p in paths]


def write_manifest(path, command: str, args: dict, inputs, outputs, config_path=None, config=None, seed=None) -> Path:
    """Write a run manifest; no timestamps, so reruns give identical bytes."""
    manifest = {
        "command": command,
        "tool_version": __version__,
        "config_path": None if config_path is None else str(config_path),
        "config": config,
        "seed": seed,
        "args": args,
        "inputs": _file_entries(inputs),
        "outputs": _file_entries(outputs),
    }
    path = Path(path)
    atomic_write(path, json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


def _sidecar(path, suffix: str) -> Path:
    # same naming as Simulation.write: gi.jsonl -> gi.meta.json
    return Path(path).with_suffix(suffix)


def resolve_seed(flag: Optional[int]) -> Optional[int]:
    if flag is not None:
        return flag
    env = os.environ.get("EGGP_SEED")
    if env is None or env == "":
        return None
    try:
        return int(env)
    except ValueError:
        raise CliError(EXIT_CONFIG, f"EGGP_SEED must be an integer, got {env!r}") from None


def _load_toml(path) -> dict:
    try:
        return load_matrix(path)
    except FileNotFoundError:
        raise CliError(EXIT_CONFIG, f"config file not found: {path}") from None
    except OSError as exc:
        raise CliError(EXIT_CONFIG, f"cannot read config {path}: {exc}") from None
    except ValueError as exc:  # TOMLDecodeError subclasses ValueError
        raise CliError(EXIT_CONFIG, f"malformed config {path}: {exc}") from None


def _read_meta(data_path) -> dict:
    meta = _sidecar(data_path, ".meta.json")
    if not meta.exists():
        return {}
    return json.loads(meta.read_text(encoding="utf-8"))


def _read_data(path):
    try:
        series = read_series(path)
    except FileNotFoundError:
        raise CliError(EXIT_CONFIG, f"data file not found: {path}") from None
    except (InvalidInputError, ValueError, KeyError) as exc:
        raise CliError(EXIT_CONFIG, f"cannot parse graph series {path}: {exc}") from None
    return series, _read_meta(path)


def _env_of(meta: dict, attribute_dim: int, override: Optional[str]) -> str:
    if override:
        return override
    if meta.get("env") in ("gi", "eis"):
        return meta["env"]
    guess = {7: "gi", 8: "eis"}.get(attribute_dim)
    if guess is None:
        raise CliError(EXIT_CONFIG, "cannot infer the environment; pass --env or keep the .meta.json file")
    return guess


def _connectivity(meta: dict, env: str) -> ConnectivityConfig:
    if meta.get("connectivity"):
        return ConnectivityConfig(**meta["connectivity"])
    return GI_CONNECTIVITY if env == "gi" else EIS_CONNECTIVITY


def _csv(rows, header) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


# ---------------------------------------------------------------------------
# simulate


def cmd_simulate(args) -> int:
    config = {}
    if args.config is not None:
        config = _load_toml(args.config)
        if isinstance(config.get(args.env), dict):
            config = config[args.env]
    overrides = dict(config)
    seed = resolve_seed(args.seed)
    if args.env == "eis":
        if seed is not None:
            overrides["seed"] = seed
        if args.nodes is not None:
            if args.nodes % overrides.get("particles_per_block", 11):
                raise CliError(EXIT_CONFIG, "--nodes must be a multiple of particles_per_block")
            overrides["n_blocks"] = args.nodes // overrides.get("particles_per_block", 11)
    else:
        if args.nodes is not None:
            overrides["n_rope_nodes"] = args.nodes - overrides.get("n_ball_nodes", 1)
        if args.offset is not None:
            overrides["rope_offset"] = args.offset
    if args.env == "eis" and args.offset is not None:
        raise CliError(EXIT_CONFIG, "--offset applies to the gi environment only")
    if args.steps is not None:
        overrides["steps"] = args.steps
    try:
        sim = simulate(args.env, overrides)
    except TypeError as exc:
        raise CliError(EXIT_CONFIG, f"bad config key: {exc}") from None
    except InvalidInputError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from None
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    for g in sim.series():
        buf.write(json.dumps(g.to_json(), separators=(",", ":")))
        buf.write("\n")
    atomic_write(out, buf.getvalue())
    meta = _sidecar(out, ".meta.json")
    atomic_write(meta, json.dumps(sim.metadata(), indent=2, sort_keys=True) + "\n")
    inputs = [args.config] if args.config is not None else []
    manifest = write_manifest(
        _sidecar(out, ".manifest.json"), "simulate",
        {"env": args.env, "offset": args.offset, "steps": args.steps, "nodes": args.nodes, "out": str(out)},
        inputs, [out, meta], args.config, config, seed,
    )
    print(f"wrote {out} ({len(sim.positions) - 1} snapshots, M={sim.positions.shape[1]}), {manifest}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# train

_TARGETS = {"auto": None, "dx": 0, "dy": 1, "dz": 2}


def cmd_train(args) -> int:
    loaded = [_read_data(p) for p in args.data]
    series_list = [s for s, _ in loaded]
    dims = {s[0].attribute_dim for s in series_list}
    coords = {s[0].positions.shape[1] for s in series_list}
    if len(dims) > 1 or len(coords) > 1:
        raise CliError(EXIT_MISMATCH, "training files disagree on attribute layout")
    envs = {_env_of(m, s[0].attribute_dim, args.env) for s, m in loaded}
    if len(envs) > 1:
        raise CliError(EXIT_MISMATCH, f"training files come from different environments: {sorted(envs)}")
    env = envs.pop()
    target = _TARGETS[args.target]
    if target is not None and target >= coords.pop():
        raise CliError(EXIT_CONFIG, f"--target {args.target} is not present in the data")
    try:
        adam = gp.AdamConfig(args.learning_rate, args.iterations)
        mask = default_mask(env, dims.pop())
    except InvalidInputError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from None
    out = Path(args.out)
    try:
        model = fit_from_series(
            series_list, args.n_points, args.min_gap, kind=args.method, mask=mask, mode=args.mode,
            adam=adam, connectivity=_connectivity(loaded[0][1], env), target_dim=target,
        )
    except TrainingError as exc:
        trace_path = _sidecar(out, ".failed-trace.csv")
        trace_path.parent.mkdir(parents=True, exist_ok=True)
        gp.write_trace_csv(trace_path, exc.trace)
        raise CliError(EXIT_TRAINING, f"training failed: {exc}; loss trace written to {trace_path}") from None
    except InvalidInputError as exc:
        raise CliError(EXIT_CONFIG, str(exc)) from None

    out.parent.mkdir(parents=True, exist_ok=True)
    atomic_write(out, json.dumps(model_to_json(model), separators=(",", ":")) + "\n")
    loss = _sidecar(out, ".loss.csv")
    rows = [(gi, it, _fmt(v)) for gi, g in enumerate(model.groups) for it, v in enumerate(g.trace)]
    atomic_write(loss, _csv(rows, ("group", "iteration", "loss")))
    flags = {
        "data": [str(p) for p in args.data], "method": args.method, "n_points": args.n_points,
        "min_gap": args.min_gap, "target": args.target, "mode": args.mode, "env": env,
        "iterations": args.iterations, "learning_rate": args.learning_rate, "out": str(out),
    }
    manifest = write_manifest(
        _sidecar(out, ".manifest.json"), "train", flags, args.data, [out, loss], seed=resolve_seed(args.seed)
    )
    n_train = sum(len(g.train) for g in model.groups)
    print(f"wrote {out} ({len(model.groups)} output groups, {n_train} training sub-trees), {manifest}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# eval


def _attr_fn(meta: dict):
    kind = meta.get("attr_kind", {})
    if kind.get("kind") == "box":
        bounds = tuple(kind["bounds"])
        return lambda pos, prev: box_distances(pos, bounds)
    return None


def _check_compatible(model, series) -> None:
    g = series[0]
    if g.attribute_dim != model.attribute_dim:
        raise CliError(
            EXIT_MISMATCH, f"data has {g.attribute_dim} attributes per vertex, model expects {model.attribute_dim}"
        )
    if g.positions.shape[1] != model.num_outputs:
        raise CliError(EXIT_MISMATCH, f"data has {g.positions.shape[1]} coordinates, model predicts {model.num_outputs}")


def _one_step_rows(metrics: dict, names) -> list:
    rows = []
    for name in names:
        m = metrics["per_target"][name]
        rows.append((name, _fmt(m["rmse"]), _fmt(m["mape"]), _fmt(m["nll"]), m["count"]))
    rows.append(("all", _fmt(metrics["rmse"]), _fmt(metrics["mape"]), _fmt(metrics["nll"]), metrics["count"]))
    return rows


def _rollout_rows(model, series, steps: int, meta: dict, env: str) -> list:
    pred, variances = rollout(model, series[0], steps, _attr_fn(meta), _connectivity(meta, env))
    rows = []
    for k, (g, var) in enumerate(zip(pred, variances), start=1):
        if k < len(series):
            truth = series[k]
            pos_rmse = _fmt(float(np.sqrt(np.mean((g.positions - truth.positions) ** 2))))
            vel_rmse = _fmt(float(np.sqrt(np.mean((g.velocities - truth.velocities) ** 2))))
        else:
            pos_rmse = vel_rmse = ""
        rows.append((k, pos_rmse, vel_rmse, _fmt(float(np.mean(var))), len(g.edges)))
    return rows


def cmd_eval(args) -> int:
    try:
        model = load_model(args.model)
    except FileNotFoundError:
        raise CliError(EXIT_CONFIG, f"model file not found: {args.model}") from None
    except (InvalidInputError, ValueError, KeyError) as exc:
        raise CliError(EXIT_CONFIG, f"cannot load model {args.model}: {exc}") from None
    series, meta = _read_data(args.data)
    _check_compatible(model, series)
    env = _env_of(meta, series[0].attribute_dim, args.env)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = {
        "model": str(args.model), "data": str(args.data), "env": env, "kind": model.kind, "mode": model.mode,
        "num_vertices": series[0].num_vertices, "num_snapshots": len(series),
    }
    try:
        if args.rollout is None:
            if len(series) < 2:
                raise CliError(EXIT_CONFIG, "one-step evaluation needs at least two snapshots")
            targets = [t for t in eval_targets(env) if t < model.num_outputs]
            metrics = evaluate(model, series, targets)
            table = out / "metrics.csv"
            atomic_write(table, _csv(_one_step_rows(metrics, [TARGET_NAMES[t] for t in targets]),
                                     ("target", "rmse", "mape", "nll", "count")))
            report.update(evaluation="one-step", metrics=metrics)
        else:
            if args.rollout < 1:
                raise CliError(EXIT_CONFIG, "--rollout needs a positive step count")
            rows = _rollout_rows(model, series, args.rollout, meta, env)
            table = out / "rollout.csv"
            atomic_write(table, _csv(rows, ("step", "position_rmse", "velocity_rmse", "mean_variance", "num_edges")))
            report.update(evaluation="rollout", steps=args.rollout)
    except InvalidInputError as exc:
        raise CliError(EXIT_MISMATCH, str(exc)) from None
    except (NumericalError, RolloutError) as exc:
        raise CliError(EXIT_NUMERICAL, str(exc)) from None
    rep = out / "report.json"
    atomic_write(rep, json.dumps(report, indent=1, sort_keys=True, default=float) + "\n")
    manifest = write_manifest(
        out / "manifest.json", "eval",
        {"model": str(args.model), "data": str(args.data), "rollout": args.rollout, "out": str(out)},
        [args.model, args.data], [table, rep], seed=resolve_seed(args.seed),
    )
    print(f"wrote {table}, {rep}, {manifest}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# experiment


def cmd_experiment(args) -> int:
    path = Path(args.matrix) if args.matrix else bundled_matrix_path()
    matrix = _load_toml(path)
    seed = resolve_seed(args.seed)
    if seed is not None:
        matrix.setdefault("experiment", {})["seed"] = seed
    out = Path(args.out)
    try:
        result = run_experiment(matrix, out, args.cache, jobs=args.jobs, svg=args.svg)
    except InvalidInputError as exc:
        raise CliError(EXIT_CONFIG, f"bad experiment matrix: {exc}") from None
    manifest = write_manifest(
        out / "manifest.json", "experiment",
        {"matrix": str(path), "out": str(out), "cache": args.cache, "jobs": args.jobs, "svg": args.svg},
        [path], result.files, path, matrix, seed,
    )
    failed = sorted({r.cell for r in result.reports if r.status != "ok"})
    print(f"{result.computed} cells computed, {result.reused} reused; wrote {len(result.files)} files, {manifest}")
    if failed:
        print(f"eggp: {len(failed)} cell(s) failed; see report.json", file=sys.stderr)
        return EXIT_TRAINING
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="eggp", description="Evolving-graph Gaussian process toolkit.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("simulate", help="generate a graph series")
    s.add_argument("env", choices=("gi", "eis"))
    s.add_argument("--config", help="TOML file of simulator settings")
    s.add_argument("--seed", type=int, help="random seed (falls back to EGGP_SEED)")
    s.add_argument("--offset", type=float, help="horizontal rope offset (gi)")
    s.add_argument("--steps", type=int)
    s.add_argument("--nodes", type=int, help="number of vertices M")
    s.add_argument("--out", required=True, help="output .jsonl path")
    s.set_defaults(func=cmd_simulate)

    t = sub.add_parser("train", help="fit an e-GGP or GPR model")
    t.add_argument("--data", action="append", required=True, help="graph series file (repeatable)")
    t.add_argument("--method", choices=("eggp", "gpr"), default="eggp")
    t.add_argument("--n-points", type=int, default=15, help="training points per node")
    t.add_argument("--min-gap", type=int, default=20)
    t.add_argument("--target", choices=tuple(_TARGETS), default="auto",
                   help="component ranking the selection; auto ranks each component by its own")
    t.add_argument("--mode", choices=("evolving", "fixed"), default="evolving")
    t.add_argument("--iterations", type=int, default=gp.AdamConfig().iterations)
    t.add_argument("--learning-rate", type=float, default=gp.AdamConfig().learning_rate)
    t.add_argument("--env", choices=("gi", "eis"), help="override the environment recorded in .meta.json")
    t.add_argument("--seed", type=int)
    t.add_argument("--out", required=True, help="output model .json path")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a model on a graph series")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    how = e.add_mutually_exclusive_group()
    how.add_argument("--one-step", action="store_true", help="one-step-ahead metrics (default)")
    how.add_argument("--rollout", type=int, metavar="STEPS", help="autoregressive rollout length")
    e.add_argument("--env", choices=("gi", "eis"))
    e.add_argument("--seed", type=int)
    e.add_argument("--out", required=True, help="output directory")
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("experiment", help="run an experiment matrix")
    x.add_argument("--matrix", help="TOML matrix (default: bundled tables)")
    x.add_argument("--out", required=True, help="output directory")
    x.add_argument("--cache", help="cache directory (default: OUT/cache)")
    x.add_argument("--jobs", type=int, default=1)
    x.add_argument("--svg", action="store_true", help="also write RMSE-vs-offset plots")
    x.add_argument("--seed", type=int)
    x.set_defaults(func=cmd_experiment)
    return p


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"eggp: error: {exc}", file=sys.stderr)
        return exc.code
    except TrainingError as exc:
        print(f"eggp: training error: {exc}", file=sys.stderr)
        return EXIT_TRAINING
    except (NumericalError, RolloutError) as exc:
        print(f"eggp: numerical error: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except InvalidInputError as exc:
        print(f"eggp: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
