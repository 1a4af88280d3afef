"""Attributed vertices, graph snapshots, sub-trees and the nodes-to-edges rule.

A snapshot stores its vertex attributes as three aligned arrays (positions,
previous-step velocities, static attributes); ``VertexState`` objects are
materialized on demand.  Edges are undirected pairs ``(i, j)`` with ``i < j``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.spatial import cKDTree

from .errors import InvalidInputError

Edge = tuple[int, int]


def _frozen(a, ndim: int, name: str) -> np.ndarray:
    arr = np.array(a, dtype=np.float64)
    if arr.ndim != ndim:
        raise InvalidInputError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise InvalidInputError(f"{name} contains non-finite entries")
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class VertexState:
    """One attributed node at one timepoint."""

    position: np.ndarray
    prev_velocity: np.ndarray
    static_attrs: np.ndarray = field(default_factory=lambda: np.zeros(0))

    def __post_init__(self):
        pos = _frozen(self.position, 1, "position")
        vel = _frozen(self.prev_velocity, 1, "prev_velocity")
        attrs = _frozen(self.static_attrs, 1, "static_attrs")
        if pos.size < 1:
            raise InvalidInputError("position must have at least one coordinate")
        if vel.shape != pos.shape:
            raise InvalidInputError("prev_velocity must match position length")
        object.__setattr__(self, "position", pos)
        object.__setattr__(self, "prev_velocity", vel)
        object.__setattr__(self, "static_attrs", attrs)

    @property
    def dim(self) -> int:
        return 2 * self.position.size + self.static_attrs.size

    @property
    def features(self) -> np.ndarray:
        """Concatenated ``(position, prev_velocity, static_attrs)``."""
        return np.concatenate([self.position, self.prev_velocity, self.static_attrs])


@dataclass(frozen=True)
class ConnectivityConfig:
    r_nn: float
    k_nn: int

    def __post_init__(self):
        if not (np.isfinite(self.r_nn) and self.r_nn > 0):
            raise InvalidInputError(f"r_nn must be finite and positive, got {self.r_nn}")
        if int(self.k_nn) != self.k_nn or self.k_nn < 1:
            raise InvalidInputError(f"k_nn must be an integer >= 1, got {self.k_nn}")
        object.__setattr__(self, "r_nn", float(self.r_nn))
        object.__setattr__(self, "k_nn", int(self.k_nn))

    def to_dict(self) -> dict:
        return {"r_nn": self.r_nn, "k_nn": self.k_nn}


def _normalize_edges(edges: Iterable[Sequence[int]], m: int) -> tuple[Edge, ...]:
    out = set()
    for e in edges:
        i, j = int(e[0]), int(e[1])
        if i == j:
            raise InvalidInputError(f"self-loop ({i}, {j}) is not allowed")
        if not (0 <= i < m and 0 <= j < m):
            raise InvalidInputError(f"edge ({i}, {j}) out of range for {m} vertices")
        out.add((min(i, j), max(i, j)))
    return tuple(sorted(out))


@dataclass(frozen=True)
class GraphSnapshot:
    """Vertices and induced edges at one timepoint."""

    time_index: int
    positions: np.ndarray
    velocities: np.ndarray
    attrs: np.ndarray
    edges: tuple[Edge, ...] = ()
    mandatory_edges: tuple[Edge, ...] = ()

    def __post_init__(self):
        pos = _frozen(self.positions, 2, "positions")
        vel = _frozen(self.velocities, 2, "velocities")
        attrs = np.asarray(self.attrs, dtype=np.float64)
        if attrs.size == 0:
            attrs = np.zeros((pos.shape[0], 0))
        attrs = _frozen(attrs, 2, "attrs")
        m = pos.shape[0]
        if m < 1:
            raise InvalidInputError("a snapshot needs at least one vertex")
        if vel.shape != pos.shape or attrs.shape[0] != m:
            raise InvalidInputError(
                f"inconsistent vertex arrays: positions {pos.shape}, "
                f"velocities {vel.shape}, attrs {attrs.shape}"
            )
        if int(self.time_index) < 0:
            raise InvalidInputError("time_index must be >= 0")
        mandatory = _normalize_edges(self.mandatory_edges, m)
        edges = tuple(sorted(set(_normalize_edges(self.edges, m)) | set(mandatory)))
        object.__setattr__(self, "time_index", int(self.time_index))
        object.__setattr__(self, "positions", pos)
        object.__setattr__(self, "velocities", vel)
        object.__setattr__(self, "attrs", attrs)
        object.__setattr__(self, "edges", edges)
        object.__setattr__(self, "mandatory_edges", mandatory)

    @property
    def num_vertices(self) -> int:
        return self.positions.shape[0]

    @property
    def attribute_dim(self) -> int:
        return 2 * self.positions.shape[1] + self.attrs.shape[1]

    @property
    def vertices(self) -> list[VertexState]:
        return [
            VertexState(self.positions[i], self.velocities[i], self.attrs[i])
            for i in range(self.num_vertices)
        ]

    @cached_property
    def features(self) -> np.ndarray:
        """Per-vertex feature matrix, shape ``(M, D)``."""
        f = np.hstack([self.positions, self.velocities, self.attrs])
        f.setflags(write=False)
        return f

    @cached_property
    def neighbors(self) -> tuple[np.ndarray, ...]:
        return neighbors_from_edges(self.edges, self.num_vertices)

    def adjacency(self) -> np.ndarray:
        a = np.zeros((self.num_vertices, self.num_vertices), dtype=bool)
        for i, j in self.edges:
            a[i, j] = a[j, i] = True
        return a

    def to_json(self) -> dict:
        return {
            "t": self.time_index,
            "vertices": [
                {
                    "pos": self.positions[i].tolist(),
                    "vel": self.velocities[i].tolist(),
                    "attrs": self.attrs[i].tolist(),
                }
                for i in range(self.num_vertices)
            ],
            "edges": [list(e) for e in self.edges],
            "mandatory_edges": [list(e) for e in self.mandatory_edges],
        }

    @classmethod
    def from_json(cls, d: dict) -> "GraphSnapshot":
        verts = d["vertices"]
        if not verts:
            raise InvalidInputError("snapshot has no vertices")
        attrs = np.array([v.get("attrs", []) for v in verts], dtype=np.float64)
        return cls(
            time_index=d["t"],
            positions=[v["pos"] for v in verts],
            velocities=[v["vel"] for v in verts],
            attrs=attrs.reshape(len(verts), -1),
            edges=[tuple(e) for e in d.get("edges", [])],
            mandatory_edges=[tuple(e) for e in d.get("mandatory_edges", [])],
        )


@dataclass(frozen=True)
class SubTree:
    """A root vertex with its 1-hop neighbours."""

    root: VertexState
    leaves: tuple[VertexState, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "leaves", tuple(self.leaves))


def neighbors_from_edges(edges: Iterable[Edge], m: int) -> tuple[np.ndarray, ...]:
    nbrs: list[list[int]] = [[] for _ in range(m)]
    for i, j in edges:
        nbrs[i].append(j)
        nbrs[j].append(i)
    return tuple(np.array(sorted(n), dtype=np.intp) for n in nbrs)


def select_neighbors(
    positions: np.ndarray,
    cfg: ConnectivityConfig,
    mandatory_edges: Iterable[Edge] = (),
) -> list[list[int]]:
    """Per-vertex neighbour choices before symmetrization.

    Vertex ``i`` picks up to ``k_nn`` other vertices within ``r_nn`` (L2 over
    positions), nearest first, ties by ascending index.  Vertices already
    joined to ``i`` by a mandatory edge are not candidates.
    """
    pos = np.asarray(positions, dtype=np.float64)
    m = pos.shape[0]
    excluded: list[set[int]] = [set() for _ in range(m)]
    for i, j in mandatory_edges:
        excluded[i].add(j)
        excluded[j].add(i)
    tree = cKDTree(pos)
    # small inflation so boundary points are not lost; exact check below
    candidates = tree.query_ball_point(pos, cfg.r_nn * (1 + 1e-9) + 1e-300)
    chosen = []
    for i in range(m):
        cand = [j for j in candidates[i] if j != i and j not in excluded[i]]
        if not cand:
            chosen.append([])
            continue
        cand = np.array(cand, dtype=np.intp)
        d = np.sqrt(np.sum((pos[cand] - pos[i]) ** 2, axis=1))
        keep = d <= cfg.r_nn
        cand, d = cand[keep], d[keep]
        order = np.lexsort((cand, d))
        chosen.append(cand[order[: cfg.k_nn]].tolist())
    return chosen


def _edges_from_positions(pos, cfg, mandatory) -> list[Edge]:
    chosen = select_neighbors(pos, cfg, mandatory)
    return [(i, j) for i, js in enumerate(chosen) for j in js]


def build_graph(
    vertices: Sequence[VertexState],
    cfg: ConnectivityConfig,
    mandatory_edges: Iterable[Edge] = (),
    time_index: int = 0,
) -> GraphSnapshot:
    """Build a snapshot whose edges follow the radius / max-neighbour rule.

    The edge set is the union of every vertex's selection (an edge exists if
    either endpoint chose the other) plus ``mandatory_edges``.
    """
    if len(vertices) == 0:
        raise InvalidInputError("build_graph needs at least one vertex")
    pos = np.array([v.position for v in vertices], dtype=np.float64)
    vel = np.array([v.prev_velocity for v in vertices], dtype=np.float64)
    attrs = np.array([v.static_attrs for v in vertices], dtype=np.float64).reshape(len(vertices), -1)
    return snapshot_from_arrays(time_index, pos, vel, attrs, cfg, mandatory_edges)


def snapshot_from_arrays(
    time_index: int,
    positions: np.ndarray,
    velocities: np.ndarray,
    attrs: np.ndarray,
    cfg: ConnectivityConfig,
    mandatory_edges: Iterable[Edge] = (),
) -> GraphSnapshot:
    positions = np.asarray(positions, dtype=np.float64)
    if positions.ndim != 2 or positions.shape[0] < 1:
        raise InvalidInputError("positions must be a non-empty (M, P) array")
    if not np.all(np.isfinite(positions)):
        raise InvalidInputError("positions contain non-finite entries")
    mandatory = _normalize_edges(mandatory_edges, positions.shape[0])
    edges = _edges_from_positions(positions, cfg, mandatory)
    return GraphSnapshot(time_index, positions, velocities, attrs, edges, mandatory)


def rebuild(g: GraphSnapshot, cfg: ConnectivityConfig) -> GraphSnapshot:
    """Recompute ``g``'s edges from its own vertex positions."""
    return snapshot_from_arrays(
        g.time_index, g.positions, g.velocities, g.attrs, cfg, g.mandatory_edges
    )


def extract_subtree(g: GraphSnapshot, node_index: int) -> SubTree:
    if not (0 <= node_index < g.num_vertices):
        raise InvalidInputError(f"node index {node_index} out of range for {g.num_vertices} vertices")
    verts = g.vertices
    return SubTree(verts[node_index], tuple(verts[j] for j in g.neighbors[node_index]))


def graph_series_from_positions(
    positions,
    static_attrs,
    cfg: ConnectivityConfig,
    mandatory_edges: Iterable[Edge] = (),
) -> list[GraphSnapshot]:
    """Turn a trajectory ``[N+1][M][P]`` into snapshots ``t = 1..N``.

    ``static_attrs`` is ``[M][S]`` (constant) or ``[N+1][M][S]`` (per step).
    Snapshot ``t`` carries ``prev_velocity = x_t - x_{t-1}``.
    """
    pos = np.asarray(positions, dtype=np.float64)
    if pos.ndim != 3:
        raise InvalidInputError(f"positions must have shape [N+1][M][P], got {pos.shape}")
    if pos.shape[0] < 2:
        raise InvalidInputError("need at least two timepoints (N >= 1)")
    attrs = np.asarray(static_attrs, dtype=np.float64)
    n1, m, _ = pos.shape
    if attrs.size == 0:
        attrs = np.zeros((m, 0))
    if attrs.ndim == 2:
        if attrs.shape[0] != m:
            raise InvalidInputError(f"static_attrs has {attrs.shape[0]} rows, expected {m}")
        attrs = np.broadcast_to(attrs, (n1,) + attrs.shape)
    elif attrs.ndim != 3 or attrs.shape[:2] != (n1, m):
        raise InvalidInputError(f"static_attrs shape {attrs.shape} inconsistent with positions {pos.shape}")
    mandatory = tuple(mandatory_edges)
    vel = np.diff(pos, axis=0)
    return [
        snapshot_from_arrays(t, pos[t], vel[t - 1], attrs[t], cfg, mandatory)
        for t in range(1, n1)
    ]


def write_series(path, series: Sequence[GraphSnapshot]) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for g in series:
            fh.write(json.dumps(g.to_json(), separators=(",", ":")))
            fh.write("\n")


def read_series(path) -> list[GraphSnapshot]:
    out = []
    with Path(path).open(encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(GraphSnapshot.from_json(json.loads(line)))
    if not out:
        raise InvalidInputError(f"{path}: empty graph series")
    return out
