"""Training-set construction, fitting, prediction and rollout.

A fitted model holds one or more *output groups*.  Each group is an exact GP
over a subset of the velocity components, with its own kernel parameters,
noise, standardization and training sub-trees.  The default is one group per
velocity component (each trained on the points selected for that
component); ``shared=True`` fits a single group for all components.

``kind="gpr"`` drops the neighbourhood term, giving the vector-input GP
baseline on the full attribute vector.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import gp
from .errors import InvalidInputError, RolloutError, TrainingError
from .graph import (
    ConnectivityConfig,
    GraphSnapshot,
    SubTree,
    VertexState,
    neighbors_from_edges,
    snapshot_from_arrays,
)
from .kernels import (
    Standardizer,
    SubTreeBatch,
    SubTreeKernelParams,
    gram,
    gram_and_grads,
    gram_diag,
)

log = logging.getLogger(__name__)

MODES = ("evolving", "fixed")
KINDS = ("eggp", "gpr")
LOG_NOISE_INIT = float(np.log(1e-2))
# roots per cross-Gram block at prediction time
_PREDICT_BLOCK = 2048


@dataclass(frozen=True)
class SelectionConfig:
    points_per_node: int
    min_gap: int = 20
    target_dim: int = 0

    def __post_init__(self):
        if self.points_per_node < 1:
            raise InvalidInputError("points_per_node must be >= 1")
        if self.min_gap < 1:
            raise InvalidInputError("min_gap must be >= 1")
        if self.target_dim < 0:
            raise InvalidInputError("target_dim must be >= 0")


@dataclass(frozen=True)
class TransitionDataset:
    """Sub-trees (raw, unmasked attributes) with their velocity targets."""

    subtrees: SubTreeBatch
    targets: np.ndarray
    provenance: tuple[tuple[int, int, int], ...] = ()

    def __post_init__(self):
        y = np.asarray(self.targets, dtype=np.float64)
        if y.ndim == 1:
            y = y[:, None]
        if y.shape[0] != len(self.subtrees):
            raise InvalidInputError(f"{len(self.subtrees)} sub-trees but {y.shape[0]} targets")
        if not np.all(np.isfinite(y)):
            raise InvalidInputError("targets contain non-finite entries")
        object.__setattr__(self, "targets", y)
        object.__setattr__(self, "provenance", tuple(tuple(int(v) for v in p) for p in self.provenance))

    def __len__(self) -> int:
        return len(self.subtrees)

    @property
    def attribute_dim(self) -> int:
        return self.subtrees.roots.shape[1]

    @property
    def inputs(self) -> list[SubTree]:
        """Sub-trees as ``SubTree`` objects (built on demand)."""
        p = self.targets.shape[1]
        starts = np.concatenate([[0], np.cumsum(self.subtrees.counts)])

        def vert(f):
            return VertexState(f[:p], f[p : 2 * p], f[2 * p :])

        return [
            SubTree(vert(r), tuple(vert(f) for f in self.subtrees.leaves[starts[i] : starts[i + 1]]))
            for i, r in enumerate(self.subtrees.roots)
        ]

    @classmethod
    def concat(cls, parts: Sequence["TransitionDataset"]) -> "TransitionDataset":
        return cls(
            SubTreeBatch.concat([p.subtrees for p in parts]),
            np.vstack([p.targets for p in parts]),
            sum((p.provenance for p in parts), ()),
        )


def _check_series(series: Sequence[GraphSnapshot]) -> None:
    if len(series) < 2:
        raise InvalidInputError("a training series needs at least two snapshots")
    m, d = series[0].num_vertices, series[0].attribute_dim
    for g in series:
        if g.num_vertices != m or g.attribute_dim != d:
            raise InvalidInputError("training series must keep node count and attribute layout fixed")


def transition_targets(series: Sequence[GraphSnapshot]) -> np.ndarray:
    """``x_{t+1} - x_t`` for every snapshot but the last, shape ``(T-1, M, P)``."""
    _check_series(series)
    pos = np.array([g.positions for g in series])
    return np.diff(pos, axis=0)


def greedy_select(scores, times, n: int, min_gap: int) -> list[int]:
    """Pick ``n`` indices by descending score with a minimum time separation.

    Ties go to the earlier time.  When no remaining candidate satisfies the
    separation, the gap is reduced by one and the scan continues, keeping
    the points already chosen.
    """
    scores = np.asarray(scores, dtype=np.float64)
    times = np.asarray(times, dtype=np.int64)
    if n > scores.size:
        raise InvalidInputError(f"requested {n} points but only {scores.size} timepoints exist")
    order = np.lexsort((times, -scores))
    chosen: list[int] = []
    gap = min_gap
    while True:
        for idx in order:
            if len(chosen) == n:
                return chosen
            if idx in chosen:
                continue
            if all(abs(int(times[idx]) - int(times[c])) >= gap for c in chosen):
                chosen.append(int(idx))
        if len(chosen) == n:
            return chosen
        gap -= 1


def select_training_points(
    series: Sequence[GraphSnapshot],
    cfg: SelectionConfig,
    mode: str = "evolving",
    trajectory_id: int = 0,
) -> TransitionDataset:
    """Per-node selection of high-acceleration timepoints.

    For each node, ``|x_{t+1} - 2 x_t + x_{t-1}|`` on ``cfg.target_dim`` ranks
    the usable snapshots (all but the last).  In ``fixed`` mode the sub-trees
    use the first snapshot's adjacency with current attributes.
    """
    if mode not in MODES:
        raise InvalidInputError(f"mode must be one of {MODES}")
    _check_series(series)
    if len(series) < cfg.min_gap + 2:
        raise InvalidInputError(
            f"series has {len(series)} snapshots; need at least min_gap + 2 = {cfg.min_gap + 2}"
        )
    p = series[0].positions.shape[1]
    if cfg.target_dim >= p:
        raise InvalidInputError(f"target_dim {cfg.target_dim} out of range for {p} coordinates")
    targets = transition_targets(series)  # (T-1, M, P)
    prev = np.array([g.velocities for g in series[:-1]])
    accel = np.abs(targets[..., cfg.target_dim] - prev[..., cfg.target_dim])  # (T-1, M)
    times = np.array([g.time_index for g in series[:-1]])
    fixed_nbrs = series[0].neighbors if mode == "fixed" else None

    per_snapshot: dict[int, list[int]] = {}
    for node in range(series[0].num_vertices):
        for k in greedy_select(accel[:, node], times, cfg.points_per_node, cfg.min_gap):
            per_snapshot.setdefault(k, []).append(node)

    batches, ys, prov = [], [], []
    for k in sorted(per_snapshot):
        nodes = sorted(per_snapshot[k])
        g = series[k]
        batches.append(
            SubTreeBatch.from_snapshot(g, np.ones(g.attribute_dim, bool), nodes=nodes, neighbors=fixed_nbrs)
        )
        ys.append(targets[k, nodes])
        prov += [(trajectory_id, g.time_index, n) for n in nodes]
    return TransitionDataset(SubTreeBatch.concat(batches), np.vstack(ys), tuple(prov))


def full_dataset(series: Sequence[GraphSnapshot], mode: str = "evolving", trajectory_id: int = 0) -> TransitionDataset:
    """Every (snapshot, node) transition of a series, for evaluation."""
    targets = transition_targets(series)
    fixed_nbrs = series[0].neighbors if mode == "fixed" else None
    batches, ys, prov = [], [], []
    for k, g in enumerate(series[:-1]):
        batches.append(SubTreeBatch.from_snapshot(g, np.ones(g.attribute_dim, bool), neighbors=fixed_nbrs))
        ys.append(targets[k])
        prov += [(trajectory_id, g.time_index, n) for n in range(g.num_vertices)]
    return TransitionDataset(SubTreeBatch.concat(batches), np.vstack(ys), tuple(prov))


# ---------------------------------------------------------------------------
# fitted model


@dataclass(frozen=True)
class OutputGroup:
    outputs: tuple[int, ...]
    params: SubTreeKernelParams
    log_noise: float
    standardizer: Standardizer
    y_mean: np.ndarray
    y_std: np.ndarray
    train: SubTreeBatch
    alpha: np.ndarray
    factor: gp.Factor = field(repr=False)
    trace: tuple[float, ...] = ()

    @property
    def noise(self) -> float:
        return float(np.exp(self.log_noise))


@dataclass(frozen=True)
class FittedEggp:
    kind: str
    groups: tuple[OutputGroup, ...]
    num_outputs: int
    attribute_dim: int
    mode: str = "evolving"
    connectivity: Optional[ConnectivityConfig] = None
    fixed_edges: Optional[tuple[tuple[int, int], ...]] = None
    fixed_num_vertices: Optional[int] = None

    @property
    def mask(self) -> np.ndarray:
        return self.groups[0].params.attr_mask

    def fixed_neighbors(self):
        if self.fixed_edges is None:
            return None
        return neighbors_from_edges(self.fixed_edges, self.fixed_num_vertices)


def _standardize_targets(y: np.ndarray):
    mean = y.mean(axis=0)
    std = y.std(axis=0)
    std = np.where(std > 1e-12, std, 1.0)
    return (y - mean) / std, mean, std


def _train_gram(batch: SubTreeBatch, params: SubTreeKernelParams) -> np.ndarray:
    k = gram(batch, batch, params)
    return 0.5 * (k + k.T)


def _finalize_group(outputs, params, log_noise, standardizer, y_mean, y_std, train, ystd, trace) -> OutputGroup:
    factor = gp.cholesky_jittered(_train_gram(train, params), log_noise)
    alpha = gp.solve(factor, ystd)
    return OutputGroup(
        tuple(int(o) for o in outputs), params, float(log_noise), standardizer,
        np.asarray(y_mean, dtype=np.float64), np.asarray(y_std, dtype=np.float64),
        train, alpha, factor, tuple(trace),
    )


def fit_group(
    dataset: TransitionDataset,
    outputs: Sequence[int],
    mask,
    kind: str = "eggp",
    adam: gp.AdamConfig = gp.AdamConfig(),
    init: Optional[SubTreeKernelParams] = None,
    log_noise: float = LOG_NOISE_INIT,
) -> OutputGroup:
    """Fit one output group by Adam on the negative log marginal likelihood."""
    if kind not in KINDS:
        raise InvalidInputError(f"kind must be one of {KINDS}")
    if len(dataset) < 1:
        raise InvalidInputError("cannot fit an empty dataset")
    mask = np.asarray(mask, dtype=bool)
    if mask.size != dataset.attribute_dim:
        raise InvalidInputError(f"mask length {mask.size} != attribute dimension {dataset.attribute_dim}")
    outputs = list(outputs)
    raw = dataset.subtrees
    mapped_roots = raw.roots[:, mask]
    standardizer = Standardizer.fit(mapped_roots)
    train = SubTreeBatch(standardizer(mapped_roots), standardizer(raw.leaves[:, mask]), raw.counts)
    if kind == "gpr":
        # the baseline never looks at neighbours
        train = SubTreeBatch(train.roots, np.zeros((0, train.roots.shape[1])), np.zeros(len(train), int))
    ystd, y_mean, y_std = _standardize_targets(dataset.targets[:, outputs])

    params0 = init if init is not None else SubTreeKernelParams.init(mask, with_leaf=(kind == "eggp"))
    if (params0.leaf is None) != (kind == "gpr"):
        raise InvalidInputError("initial parameters do not match the model kind")

    def objective(theta):
        params = params0.with_vector(theta[:-1])
        k, dk = gram_and_grads(train, params)
        problem = gp.GpProblem(k, ystd, theta[-1])
        return gp.neg_mll_and_grad(problem, dk)

    theta0 = np.append(params0.to_vector(), log_noise)
    if not np.any(ystd):
        # constant targets (e.g. an unused third coordinate): nothing to learn
        loss = float(objective(theta0)[0])
        return _finalize_group(outputs, params0, log_noise, standardizer, y_mean, y_std, train, ystd, [loss])
    result = gp.adam_optimize(objective, theta0, adam)
    params = params0.with_vector(result.params[:-1])
    log.info("fitted group %s: neg mll %.6g -> %.6g", outputs, result.trace[0], result.trace[-1])
    return _finalize_group(outputs, params, result.params[-1], standardizer, y_mean, y_std, train, ystd, result.trace)


def fit(
    dataset,
    mask=None,
    kind: str = "eggp",
    adam: gp.AdamConfig = gp.AdamConfig(),
    mode: str = "evolving",
    connectivity: Optional[ConnectivityConfig] = None,
    groups: Optional[Sequence[Sequence[int]]] = None,
    fixed_reference: Optional[GraphSnapshot] = None,
) -> FittedEggp:
    """Fit a model.

    ``dataset`` is one ``TransitionDataset`` shared by all groups, or a list
    with one dataset per group.  ``groups`` defaults to one group per output
    component.  ``fixed_reference`` supplies the adjacency stored for
    ``fixed`` mode.
    """
    if mode not in MODES:
        raise InvalidInputError(f"mode must be one of {MODES}")
    datasets = list(dataset) if isinstance(dataset, (list, tuple)) else None
    first = datasets[0] if datasets else dataset
    f = first.targets.shape[1]
    d = first.attribute_dim
    if groups is None:
        groups = [[j] for j in range(f)]
    if datasets is None:
        datasets = [dataset] * len(groups)
    if len(datasets) != len(groups):
        raise InvalidInputError(f"{len(datasets)} datasets for {len(groups)} output groups")
    if sorted(o for g in groups for o in g) != list(range(f)):
        raise InvalidInputError(f"output groups {groups} must partition range({f})")
    if mask is None or kind == "gpr":
        mask = np.ones(d, dtype=bool)
    fitted = tuple(fit_group(ds, g, mask, kind, adam) for ds, g in zip(datasets, groups))
    fixed_edges = fixed_m = None
    if fixed_reference is not None:
        fixed_edges, fixed_m = fixed_reference.edges, fixed_reference.num_vertices
    return FittedEggp(kind, fitted, f, d, mode, connectivity, fixed_edges, fixed_m)


def fit_gpr_baseline(dataset, adam: gp.AdamConfig = gp.AdamConfig(), **kwargs) -> FittedEggp:
    """Vector-input GP regression on the full attribute vector."""
    return fit(dataset, mask=None, kind="gpr", adam=adam, **kwargs)


def fit_from_series(
    series_list: Sequence[Sequence[GraphSnapshot]],
    points_per_node: int,
    min_gap: int = 20,
    kind: str = "eggp",
    mask=None,
    mode: str = "evolving",
    adam: gp.AdamConfig = gp.AdamConfig(),
    shared: bool = False,
    connectivity: Optional[ConnectivityConfig] = None,
    target_dim: Optional[int] = None,
) -> FittedEggp:
    """Select training points from one or more series and fit.

    By default each velocity component gets its own selection (ranked by
    that component's acceleration) and its own group.  ``target_dim`` ranks
    every group's points by one component instead.  ``shared=True`` fits a
    single group for all components.
    """
    if not series_list:
        raise InvalidInputError("no training series given")
    p = series_list[0][0].positions.shape[1]
    if target_dim is not None and not 0 <= target_dim < p:
        raise InvalidInputError(f"target_dim {target_dim} out of range for {p} coordinates")
    n_groups = 1 if shared else p
    if target_dim is not None:
        dims = [target_dim] * n_groups
    else:
        dims = [0] if shared else list(range(p))
    cache: dict[int, TransitionDataset] = {}
    datasets = []
    for dim in dims:
        if dim not in cache:
            cfg = SelectionConfig(points_per_node, min_gap, dim)
            parts = [select_training_points(s, cfg, mode, i) for i, s in enumerate(series_list)]
            cache[dim] = TransitionDataset.concat(parts)
        datasets.append(cache[dim])
    groups = [list(range(p))] if shared else [[j] for j in range(p)]
    return fit(
        datasets, mask=mask, kind=kind, adam=adam, mode=mode, connectivity=connectivity,
        groups=groups, fixed_reference=series_list[0][0] if mode == "fixed" else None,
    )


# ---------------------------------------------------------------------------
# prediction


def _query_batch(model: FittedEggp, group: OutputGroup, g: GraphSnapshot, neighbors) -> SubTreeBatch:
    batch = SubTreeBatch.from_snapshot(g, group.params.attr_mask, group.standardizer, neighbors=neighbors)
    if model.kind == "gpr":
        batch = SubTreeBatch(batch.roots, np.zeros((0, batch.roots.shape[1])), np.zeros(len(batch), int))
    return batch


def _group_posterior(group: OutputGroup, batch: SubTreeBatch, include_noise: bool):
    means, variances = [], []
    for s in range(0, len(batch), _PREDICT_BLOCK):
        part = batch.take(np.arange(s, min(len(batch), s + _PREDICT_BLOCK))) if len(batch) > _PREDICT_BLOCK else batch
        ks = gram(part, group.train, group.params)
        kss = gram_diag(part, group.params)
        post = gp.posterior_from_factor(group.factor, group.alpha, ks, kss)
        means.append(post.mean)
        variances.append(post.variance + (group.noise if include_noise else 0.0))
    mean = np.vstack(means) * group.y_std + group.y_mean
    var = np.vstack(variances) * group.y_std**2
    return mean, var


def _resolve_neighbors(model: FittedEggp, g: GraphSnapshot, neighbors):
    if g.attribute_dim != model.attribute_dim:
        raise InvalidInputError(
            f"snapshot attribute dimension {g.attribute_dim} != model's {model.attribute_dim}"
        )
    if neighbors is not None:
        return neighbors
    if model.mode == "fixed" and model.kind == "eggp":
        ref = model.fixed_neighbors()
        if ref is None or len(ref) != g.num_vertices:
            raise InvalidInputError(
                "fixed-mode prediction needs a reference adjacency with matching vertex count"
            )
        return ref
    return None


def predict_step(
    model: FittedEggp,
    g: GraphSnapshot,
    include_noise: bool = False,
    neighbors=None,
) -> tuple[np.ndarray, np.ndarray]:
    """Posterior velocity mean and variance, each of shape ``(M, F)``.

    In evolving mode the snapshot's own edges define the sub-trees.  In fixed
    mode ``neighbors`` (or, if omitted, the adjacency stored at fit time)
    defines them.  ``include_noise`` adds the learned observation noise.
    """
    neighbors = _resolve_neighbors(model, g, neighbors)
    mean = np.zeros((g.num_vertices, model.num_outputs))
    var = np.zeros_like(mean)
    for group in model.groups:
        batch = _query_batch(model, group, g, neighbors)
        m, v = _group_posterior(group, batch, include_noise)
        mean[:, group.outputs] = m
        var[:, group.outputs] = v
    return mean, var


def predict_series(
    model: FittedEggp,
    series: Sequence[GraphSnapshot],
    include_noise: bool = False,
    neighbors=None,
) -> tuple[np.ndarray, np.ndarray]:
    """``predict_step`` over many snapshots at once; returns ``(T, M, F)`` arrays."""
    if not series:
        raise InvalidInputError("empty series")
    m = series[0].num_vertices
    if any(g.num_vertices != m for g in series):
        return tuple(np.array(a) for a in zip(*(predict_step(model, g, include_noise, neighbors) for g in series)))
    nbrs = [_resolve_neighbors(model, g, neighbors) for g in series]
    mean = np.zeros((len(series), m, model.num_outputs))
    var = np.zeros_like(mean)
    for group in model.groups:
        batch = SubTreeBatch.concat([_query_batch(model, group, g, nb) for g, nb in zip(series, nbrs)])
        mu, v = _group_posterior(group, batch, include_noise)
        mean[:, :, group.outputs] = mu.reshape(len(series), m, -1)
        var[:, :, group.outputs] = v.reshape(len(series), m, -1)
    return mean, var


def rollout(
    model: FittedEggp,
    g0: GraphSnapshot,
    steps: int,
    attr_fn: Optional[Callable[[np.ndarray, np.ndarray], np.ndarray]] = None,
    connectivity: Optional[ConnectivityConfig] = None,
) -> tuple[list[GraphSnapshot], list[np.ndarray]]:
    """Autoregressive prediction ``x_{t+1} = x_t + f(sub-tree)``.

    Returns the ``steps`` predicted snapshots and the per-step predictive
    variances.  Evolving mode rebuilds edges from the predicted positions
    (``connectivity`` defaults to the model's); fixed mode keeps ``g0``'s
    edges.  ``attr_fn(positions, previous_attrs)`` recomputes position-derived
    attributes; by default attributes are carried over unchanged.
    """
    if steps < 1:
        raise InvalidInputError("steps must be >= 1")
    if model.num_outputs != g0.positions.shape[1]:
        raise InvalidInputError("rollout needs one predicted velocity component per coordinate")
    cfg = connectivity or model.connectivity
    if model.mode == "evolving" and cfg is None:
        raise InvalidInputError("evolving-mode rollout needs a connectivity config")
    fixed_nbrs = g0.neighbors if model.mode == "fixed" else None
    g = g0
    out, variances = [], []
    for step in range(1, steps + 1):
        mean, var = predict_step(model, g, neighbors=fixed_nbrs)
        pos = g.positions + mean
        if not (np.all(np.isfinite(pos)) and np.all(np.isfinite(mean))):
            raise RolloutError(f"non-finite position at rollout step {step}", step)
        attrs = attr_fn(pos, g.attrs) if attr_fn is not None else g.attrs
        t = g.time_index + 1
        if model.mode == "evolving":
            g = snapshot_from_arrays(t, pos, mean, attrs, cfg, g.mandatory_edges)
        else:
            g = GraphSnapshot(t, pos, mean, attrs, g0.edges, g0.mandatory_edges)
        out.append(g)
        variances.append(var)
    return out, variances


# ---------------------------------------------------------------------------
# persistence


def model_to_json(model: FittedEggp) -> dict:
    return {
        "format": "eggp-model/1",
        "kind": model.kind,
        "mode": model.mode,
        "num_outputs": model.num_outputs,
        "attribute_dim": model.attribute_dim,
        "connectivity": model.connectivity.to_dict() if model.connectivity else None,
        "fixed_edges": [list(e) for e in model.fixed_edges] if model.fixed_edges is not None else None,
        "fixed_num_vertices": model.fixed_num_vertices,
        "groups": [
            {
                "outputs": list(g.outputs),
                "kernel": g.params.to_json(g.standardizer),
                "log_noise": g.log_noise,
                "target_mean": g.y_mean.tolist(),
                "target_std": g.y_std.tolist(),
                "train": g.train.to_json(),
                "alpha": g.alpha.tolist(),
                "trace": list(g.trace),
            }
            for g in model.groups
        ],
    }


def model_from_json(d: dict) -> FittedEggp:
    if d.get("format") != "eggp-model/1":
        raise InvalidInputError("not an eggp model file")
    groups = []
    for gd in d["groups"]:
        params = SubTreeKernelParams.from_json(gd["kernel"])
        train = SubTreeBatch.from_json(gd["train"])
        factor = gp.cholesky_jittered(_train_gram(train, params), gd["log_noise"])
        groups.append(
            OutputGroup(
                tuple(gd["outputs"]), params, float(gd["log_noise"]),
                Standardizer.from_json(gd["kernel"]["standardization"]),
                np.array(gd["target_mean"], dtype=np.float64), np.array(gd["target_std"], dtype=np.float64),
                train, np.array(gd["alpha"], dtype=np.float64).reshape(len(train), -1), factor,
                tuple(gd.get("trace", ())),
            )
        )
    conn = ConnectivityConfig(**d["connectivity"]) if d.get("connectivity") else None
    fixed = tuple(tuple(e) for e in d["fixed_edges"]) if d.get("fixed_edges") is not None else None
    return FittedEggp(
        d["kind"], tuple(groups), d["num_outputs"], d["attribute_dim"], d["mode"], conn, fixed,
        d.get("fixed_num_vertices"),
    )


def save_model(model: FittedEggp, path) -> None:
    Path(path).write_text(json.dumps(model_to_json(model), separators=(",", ":")) + "\n", encoding="utf-8")


def load_model(path) -> FittedEggp:
    return model_from_json(json.loads(Path(path).read_text(encoding="utf-8")))


__all__ = [
    "FittedEggp", "OutputGroup", "SelectionConfig", "TransitionDataset", "TrainingError",
    "fit", "fit_from_series", "fit_gpr_baseline", "fit_group", "full_dataset", "greedy_select",
    "load_model", "model_from_json", "model_to_json", "predict_series", "predict_step", "rollout",
    "save_model", "select_training_points", "transition_targets",
]
