"""Deterministic synthetic environments producing evolving graphs.

``gi``: a 2-D spring-chain rope falling onto a static ball.
``eis``: blocks of repelling particles bouncing in a box; blocks merge and
split, so the connected components of the graph change over time.

Both integrate with semi-implicit Euler (velocity first, then position) and
return ``steps + 1`` position frames, i.e. ``steps`` graph snapshots.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import InvalidInputError
from .graph import ConnectivityConfig, GraphSnapshot, graph_series_from_positions, write_series

GI_CONNECTIVITY = ConnectivityConfig(r_nn=0.043, k_nn=2)
EIS_CONNECTIVITY = ConnectivityConfig(r_nn=0.08, k_nn=20)

GI_TEST_OFFSETS = (-0.1, -0.05, 0.0, 0.05, 0.1, 0.2, 0.3)


@dataclass(frozen=True)
class GiConfig:
    n_rope_nodes: int = 30
    n_ball_nodes: int = 1
    link_length: float = 0.03
    mass: float = 1.0
    stiffness: float = 20000.0
    damping: float = 20.0
    gravity: float = 2.0
    ball_center: tuple[float, float] = (0.0, 0.0)
    ball_radius: float = 0.04
    contact_restitution: float = 0.1
    rope_offset: float = 0.0
    rope_height: float = 0.12
    floor_height: Optional[float] = -0.2
    floor_friction: float = 0.1
    steps: int = 500
    dt: float = 0.003
    substeps: int = 3
    three_d_layout: bool = True

    def __post_init__(self):
        object.__setattr__(self, "ball_center", tuple(float(c) for c in self.ball_center))
        if self.n_rope_nodes < 1 or self.n_ball_nodes < 0:
            raise InvalidInputError("need at least one rope node and a non-negative ball node count")
        for name in ("link_length", "mass", "stiffness", "dt", "ball_radius"):
            if not getattr(self, name) > 0:
                raise InvalidInputError(f"{name} must be positive")
        if self.damping < 0 or self.gravity < 0 or not 0 <= self.contact_restitution <= 1:
            raise InvalidInputError("damping and gravity must be >= 0, restitution in [0, 1]")
        if not 0 <= self.floor_friction <= 1:
            raise InvalidInputError("floor_friction must lie in [0, 1]")
        if self.floor_height is not None and self.floor_height >= self.ball_center[1] + self.rope_height:
            raise InvalidInputError("floor must lie below the rope's starting height")
        if self.steps < 2 or self.substeps < 1:
            raise InvalidInputError("steps must be >= 2 and substeps >= 1")
        if self.dt * np.sqrt(self.stiffness / self.mass) >= 0.5:
            raise InvalidInputError("dt too large: dt * sqrt(stiffness / mass) must be < 0.5")

    @property
    def num_nodes(self) -> int:
        return self.n_rope_nodes + self.n_ball_nodes


@dataclass(frozen=True)
class EisConfig:
    n_blocks: int = 4
    particles_per_block: int = 11
    particle_spacing: float = 0.03
    box_bounds: tuple[float, float, float, float] = (0.0, 1.0, 0.0, 1.0)
    gravity: float = 5.0
    restitution: float = 0.5
    repulsion: float = 400.0
    repulsion_radius: float = 0.03
    viscosity: float = 4.0
    max_speed: float = 1.5
    steps: int = 200
    dt: float = 0.004
    seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "box_bounds", tuple(float(b) for b in self.box_bounds))
        x0, x1, y0, y1 = self.box_bounds
        if not (x1 > x0 and y1 > y0):
            raise InvalidInputError("box_bounds must be (x_min, x_max, y_min, y_max) with max > min")
        if self.n_blocks < 1 or self.particles_per_block < 1:
            raise InvalidInputError("need at least one block with one particle")
        if self.steps < 2:
            raise InvalidInputError("steps must be >= 2")
        if not (self.dt > 0 and self.repulsion_radius > 0 and self.particle_spacing > 0):
            raise InvalidInputError("dt, repulsion_radius and particle_spacing must be positive")
        if not 0 <= self.restitution <= 1:
            raise InvalidInputError("restitution must lie in [0, 1]")

    @property
    def num_nodes(self) -> int:
        return self.n_blocks * self.particles_per_block


@dataclass
class Simulation:
    """Raw trajectories plus what is needed to turn them into graphs."""

    env: str
    positions: np.ndarray  # (steps + 1, M, P)
    attrs: np.ndarray  # (M, S) or (steps + 1, M, S)
    mandatory_edges: list[tuple[int, int]]
    connectivity: ConnectivityConfig
    config: dict
    seed: Optional[int] = None
    offset: Optional[float] = None
    attr_kind: dict = field(default_factory=lambda: {"kind": "static"})

    def series(self, connectivity: Optional[ConnectivityConfig] = None) -> list[GraphSnapshot]:
        return graph_series_from_positions(
            self.positions, self.attrs, connectivity or self.connectivity, self.mandatory_edges
        )

    def metadata(self) -> dict:
        return {
            "env": self.env,
            "seed": self.seed,
            "offset": self.offset,
            "num_nodes": int(self.positions.shape[1]),
            "num_snapshots": int(self.positions.shape[0] - 1),
            "connectivity": self.connectivity.to_dict(),
            "attr_kind": self.attr_kind,
            "config": self.config,
        }

    def write(self, path) -> tuple[Path, Path]:
        path = Path(path)
        write_series(path, self.series())
        meta = path.with_suffix(".meta.json")
        meta.write_text(json.dumps(self.metadata(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path, meta


def _gi_initial(cfg: GiConfig):
    cx, cy = cfg.ball_center
    half = 0.5 * (cfg.n_rope_nodes - 1) * cfg.link_length
    rope = np.zeros((cfg.n_rope_nodes, 2))
    rope[:, 0] = cx + cfg.rope_offset - half + cfg.link_length * np.arange(cfg.n_rope_nodes)
    rope[:, 1] = cy + cfg.rope_height
    if cfg.n_ball_nodes == 1:
        ball = np.array([[cx, cy]])
    else:
        ang = 2 * np.pi * np.arange(cfg.n_ball_nodes) / max(cfg.n_ball_nodes, 1)
        ball = np.column_stack([cx + cfg.ball_radius * np.cos(ang), cy + cfg.ball_radius * np.sin(ang)])
    return rope, ball


def gi_chain_edges(cfg: GiConfig) -> list[tuple[int, int]]:
    """Rope links plus, for multi-node balls, the ball's ring links."""
    edges = [(i, i + 1) for i in range(cfg.n_rope_nodes - 1)]
    nb, off = cfg.n_ball_nodes, cfg.n_rope_nodes
    if nb == 2:
        edges.append((off, off + 1))
    elif nb > 2:
        edges += [(off + k, off + (k + 1) % nb) for k in range(nb)]
    return edges


def gi_spring_forces(x: np.ndarray, v: np.ndarray, cfg: GiConfig) -> np.ndarray:
    """Link forces: axial spring plus damping of the full relative velocity."""
    f = np.zeros_like(x)
    if x.shape[0] < 2:
        return f
    d = x[1:] - x[:-1]
    length = np.sqrt(np.sum(d * d, axis=1))
    u = d / length[:, None]
    fl = (cfg.stiffness * (length - cfg.link_length))[:, None] * u + cfg.damping * (v[1:] - v[:-1])
    f[:-1] += fl
    f[1:] -= fl
    return f


def gi_potential(x: np.ndarray, cfg: GiConfig) -> float:
    pe = cfg.mass * cfg.gravity * float(np.sum(x[:, 1]))
    if x.shape[0] > 1:
        length = np.sqrt(np.sum((x[1:] - x[:-1]) ** 2, axis=1))
        pe += 0.5 * cfg.stiffness * float(np.sum((length - cfg.link_length) ** 2))
    return pe


def gi_energy(x: np.ndarray, v: np.ndarray, v_next: np.ndarray, cfg: GiConfig) -> float:
    """Mechanical energy of the rope at state ``(x, v)``.

    The kinetic term pairs the velocity with the next step's velocity,
    ``m/2 * v_n . v_{n+1}``: this is the energy that kick-drift Euler conserves
    exactly for gravity and linear springs, so only damping changes it.
    """
    return 0.5 * cfg.mass * float(np.sum(v * v_next)) + gi_potential(x, cfg)


def gi_step(x: np.ndarray, v: np.ndarray, cfg: GiConfig) -> tuple[np.ndarray, np.ndarray, bool]:
    """Advance the rope by one step; returns new state and whether contact occurred."""
    acc = gi_spring_forces(x, v, cfg) / cfg.mass
    acc[:, 1] -= cfg.gravity
    v = v + cfg.dt * acc
    x = x + cfg.dt * v
    contact = False
    if cfg.n_ball_nodes > 0:
        c = np.asarray(cfg.ball_center)
        r = x - c
        dist = np.sqrt(np.sum(r * r, axis=1))
        inside = dist < cfg.ball_radius
        if np.any(inside):
            contact = True
            n = r[inside] / np.maximum(dist[inside], 1e-300)[:, None]
            x[inside] = c + cfg.ball_radius * n
            vn = np.sum(v[inside] * n, axis=1)
            inward = vn < 0
            v_in = v[inside]
            v_in[inward] -= ((1.0 + cfg.contact_restitution) * vn[inward])[:, None] * n[inward]
            v[inside] = v_in
    if cfg.floor_height is not None:
        below = x[:, 1] < cfg.floor_height
        if np.any(below):
            contact = True
            x[below, 1] = cfg.floor_height
            v[below, 1] = cfg.contact_restitution * np.abs(v[below, 1])
            v[below, 0] *= 1.0 - cfg.floor_friction
    return x, v, contact


def simulate_gi(cfg: GiConfig = GiConfig(), return_contacts: bool = False):
    rope, ball = _gi_initial(cfg)
    x = rope.copy()
    v = np.zeros_like(x)
    frames = [np.vstack([x, ball])]
    contacts = []
    for _ in range(cfg.steps):
        touched = False
        for _ in range(cfg.substeps):
            x, v, contact = gi_step(x, v, cfg)
            touched |= contact
        frames.append(np.vstack([x, ball]))
        contacts.append(touched)
    pos = np.array(frames)
    if cfg.three_d_layout:
        pos = np.concatenate([pos, np.zeros(pos.shape[:2] + (1,))], axis=2)
    attrs = np.zeros((cfg.num_nodes, 1))
    attrs[: cfg.n_rope_nodes, 0] = 1.0
    sim = Simulation(
        env="gi",
        positions=pos,
        attrs=attrs,
        mandatory_edges=gi_chain_edges(cfg),
        connectivity=GI_CONNECTIVITY,
        config=asdict(cfg),
        offset=cfg.rope_offset,
    )
    if return_contacts:
        return sim, np.array(contacts)
    return sim


def _block_offsets(k: int, spacing: float) -> np.ndarray:
    """Hexagonal-ish packing of ``k`` particles in rows of alternating width."""
    width = max(1, int(np.ceil(np.sqrt(k))))
    pts = []
    row = 0
    while len(pts) < k:
        w = width if row % 2 == 0 else max(1, width - 1)
        shift = 0.0 if row % 2 == 0 else 0.5 * spacing
        for c in range(w):
            if len(pts) == k:
                break
            pts.append((shift + c * spacing, row * spacing * np.sqrt(0.75)))
        row += 1
    pts = np.array(pts)
    return pts - pts.mean(axis=0)


def box_distances(pos: np.ndarray, bounds) -> np.ndarray:
    """Distances ``(x_max - x, y_max - y, x - x_min, y - y_min)``."""
    x0, x1, y0, y1 = bounds
    return np.stack(
        [x1 - pos[..., 0], y1 - pos[..., 1], pos[..., 0] - x0, pos[..., 1] - y0], axis=-1
    )


def _eis_initial(cfg: EisConfig):
    rng = np.random.default_rng(cfg.seed)
    x0, x1, y0, y1 = cfg.box_bounds
    shape = _block_offsets(cfg.particles_per_block, cfg.particle_spacing)
    extent = np.abs(shape).max() + cfg.particle_spacing
    min_sep = 2 * extent + EIS_CONNECTIVITY.r_nn + 0.02
    lo = np.array([x0 + extent, y0 + 0.35 * (y1 - y0)])
    hi = np.array([x1 - extent, y1 - extent])
    centers: list[np.ndarray] = []
    for _ in range(10000):
        if len(centers) == cfg.n_blocks:
            break
        c = lo + (hi - lo) * rng.random(2)
        if all(np.linalg.norm(c - o) >= min_sep for o in centers):
            centers.append(c)
    else:
        raise InvalidInputError(f"cannot place {cfg.n_blocks} separated blocks in the box")
    vel = rng.uniform([-1.0, -1.0], [1.0, 0.5], size=(cfg.n_blocks, 2))
    x = np.vstack([c + shape for c in centers])
    v = np.repeat(vel, cfg.particles_per_block, axis=0)
    return x, v


def eis_forces(x: np.ndarray, v: np.ndarray, cfg: EisConfig) -> np.ndarray:
    """Short-range pairwise repulsion with normal viscous damping."""
    d = x[:, None, :] - x[None, :, :]
    dist = np.sqrt(np.sum(d * d, axis=2))
    np.fill_diagonal(dist, np.inf)
    near = dist < cfg.repulsion_radius
    if not np.any(near):
        return np.zeros_like(x)
    n = np.where(near[:, :, None], d / np.where(near, dist, 1.0)[:, :, None], 0.0)
    overlap = np.where(near, 1.0 - dist / cfg.repulsion_radius, 0.0)
    rel = np.sum((v[:, None, :] - v[None, :, :]) * n, axis=2)
    mag = cfg.repulsion * overlap - cfg.viscosity * np.where(near, rel, 0.0)
    return np.sum(mag[:, :, None] * n, axis=1)


def eis_step(x: np.ndarray, v: np.ndarray, cfg: EisConfig) -> tuple[np.ndarray, np.ndarray]:
    acc = eis_forces(x, v, cfg)
    acc[:, 1] -= cfg.gravity
    v = v + cfg.dt * acc
    speed = np.sqrt(np.sum(v * v, axis=1))
    too_fast = speed > cfg.max_speed
    if np.any(too_fast):
        v[too_fast] *= (cfg.max_speed / speed[too_fast])[:, None]
    x = x + cfg.dt * v
    x0, x1, y0, y1 = cfg.box_bounds
    for dim, lo, hi in ((0, x0, x1), (1, y0, y1)):
        below = x[:, dim] < lo
        above = x[:, dim] > hi
        x[below, dim] = lo
        x[above, dim] = hi
        v[below, dim] = cfg.restitution * np.abs(v[below, dim])
        v[above, dim] = -cfg.restitution * np.abs(v[above, dim])
    return x, v


def simulate_eis(cfg: EisConfig = EisConfig()) -> Simulation:
    x, v = _eis_initial(cfg)
    frames = [x.copy()]
    for _ in range(cfg.steps):
        x, v = eis_step(x, v, cfg)
        frames.append(x.copy())
    pos = np.array(frames)
    return Simulation(
        env="eis",
        positions=pos,
        attrs=box_distances(pos, cfg.box_bounds),
        mandatory_edges=[],
        connectivity=EIS_CONNECTIVITY,
        config=asdict(cfg),
        seed=cfg.seed,
        attr_kind={"kind": "box", "bounds": list(cfg.box_bounds)},
    )


def eis_config_for(num_nodes: int, seed: int, **overrides) -> EisConfig:
    """Standard EIs fixture with ``num_nodes`` particles in blocks of 11."""
    if num_nodes % 11:
        raise InvalidInputError("standard EIs fixtures use blocks of 11 particles")
    return EisConfig(n_blocks=num_nodes // 11, particles_per_block=11, seed=seed, **overrides)


def simulate(env: str, config: Optional[dict] = None) -> Simulation:
    """Run ``env`` with keyword overrides from ``config``."""
    config = dict(config or {})
    if env == "gi":
        return simulate_gi(GiConfig(**config))
    if env == "eis":
        return simulate_eis(EisConfig(**config))
    raise InvalidInputError(f"unknown environment {env!r}")
