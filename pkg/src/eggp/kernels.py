"""Base kernels and the attributed sub-tree kernel.

The sub-tree kernel compares two sub-trees by a root kernel on the mapped
root attributes plus a neighbourhood term: the mean of leaf-kernel values
over all pairs of leaves.  All hyperparameters are stored in log space.

Two evaluation paths are provided.  The scalar functions (``ard_rbf``,
``k_nn``, ``subtree_kernel``, ...) work on ``SubTree`` objects and serve as a
readable reference.  ``SubTreeBatch`` with ``gram`` / ``gram_and_grads``
evaluates whole Gram matrices by writing the neighbourhood term as
``A @ K_leaf @ B.T``, where ``A`` and ``B`` are sparse row-normalized
leaf-membership matrices.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np
from scipy import sparse

from .errors import InvalidInputError
from .graph import GraphSnapshot, SubTree, VertexState

# cap on the number of leaf-pair entries materialized at once
_CHUNK_ENTRIES = 2_000_000


class RBF:
    """Squared-exponential profile ``exp(-r2 / 2)``."""

    name = "rbf"

    @staticmethod
    def profile(r2):
        return np.exp(-0.5 * r2)

    @staticmethod
    def dprofile_dr2(r2):
        return -0.5 * np.exp(-0.5 * r2)


class Matern52:
    """Matern 5/2 profile in terms of the scaled squared distance."""

    name = "matern52"

    @staticmethod
    def profile(r2):
        r = np.sqrt(np.maximum(r2, 0.0))
        s5 = np.sqrt(5.0) * r
        return (1.0 + s5 + 5.0 / 3.0 * r2) * np.exp(-s5)

    @staticmethod
    def dprofile_dr2(r2):
        r = np.sqrt(np.maximum(r2, 0.0))
        s5 = np.sqrt(5.0) * r
        return -5.0 / 6.0 * (1.0 + s5) * np.exp(-s5)


BASE_KERNELS = {"rbf": RBF, "matern52": Matern52}


def _base(kind: str):
    try:
        return BASE_KERNELS[kind]
    except KeyError:
        raise InvalidInputError(f"unknown base kernel {kind!r}") from None


@dataclass(frozen=True)
class ArdRbfParams:
    """ARD lengthscales and variance of a stationary base kernel (log space).

    ``kind`` selects the radial profile; the default is the RBF kernel.
    """

    log_lengthscales: np.ndarray
    log_variance: float = 0.0
    kind: str = "rbf"

    def __post_init__(self):
        ls = np.array(self.log_lengthscales, dtype=np.float64).reshape(-1)
        if ls.size < 1 or not np.all(np.isfinite(ls)) or not np.isfinite(self.log_variance):
            raise InvalidInputError("kernel parameters must be finite with at least one lengthscale")
        _base(self.kind)
        ls.setflags(write=False)
        object.__setattr__(self, "log_lengthscales", ls)
        object.__setattr__(self, "log_variance", float(self.log_variance))

    @classmethod
    def init(cls, dim: int, kind: str = "rbf") -> "ArdRbfParams":
        return cls(np.zeros(dim), 0.0, kind)

    @property
    def dim(self) -> int:
        return self.log_lengthscales.size

    @property
    def lengthscales(self) -> np.ndarray:
        return np.exp(self.log_lengthscales)

    @property
    def variance(self) -> float:
        return float(np.exp(self.log_variance))

    @property
    def num_params(self) -> int:
        return self.dim + 1

    def to_vector(self) -> np.ndarray:
        return np.append(self.log_lengthscales, self.log_variance)

    def with_vector(self, vec) -> "ArdRbfParams":
        vec = np.asarray(vec, dtype=np.float64)
        return replace(self, log_lengthscales=vec[:-1], log_variance=float(vec[-1]))

    def to_json(self) -> dict:
        return {"log_ls": self.log_lengthscales.tolist(), "log_var": self.log_variance, "kind": self.kind}

    @classmethod
    def from_json(cls, d: dict) -> "ArdRbfParams":
        return cls(d["log_ls"], d["log_var"], d.get("kind", "rbf"))


@dataclass(frozen=True)
class SubTreeKernelParams:
    """Root and leaf kernel parameters plus the vertex-mapping mask.

    ``leaf=None`` disables the neighbourhood term, which turns the kernel into
    a plain vector-input ARD kernel on the mapped root attributes.
    """

    root: ArdRbfParams
    leaf: Optional[ArdRbfParams]
    attr_mask: np.ndarray

    def __post_init__(self):
        mask = np.array(self.attr_mask, dtype=bool).reshape(-1)
        e = int(mask.sum())
        if e < 1:
            raise InvalidInputError("attribute mask selects no dimensions")
        if self.root.dim != e or (self.leaf is not None and self.leaf.dim != e):
            raise InvalidInputError(
                f"lengthscale vectors must have length {e} (mask), got "
                f"{self.root.dim} and {None if self.leaf is None else self.leaf.dim}"
            )
        mask.setflags(write=False)
        object.__setattr__(self, "attr_mask", mask)

    @classmethod
    def init(cls, mask, with_leaf: bool = True, root_kind="rbf", leaf_kind="rbf") -> "SubTreeKernelParams":
        e = int(np.sum(np.asarray(mask, dtype=bool)))
        leaf = ArdRbfParams.init(e, leaf_kind) if with_leaf else None
        return cls(ArdRbfParams.init(e, root_kind), leaf, mask)

    @property
    def mapped_dim(self) -> int:
        return int(self.attr_mask.sum())

    @property
    def num_params(self) -> int:
        return self.root.num_params + (self.leaf.num_params if self.leaf is not None else 0)

    def to_vector(self) -> np.ndarray:
        parts = [self.root.to_vector()]
        if self.leaf is not None:
            parts.append(self.leaf.to_vector())
        return np.concatenate(parts)

    def with_vector(self, vec) -> "SubTreeKernelParams":
        vec = np.asarray(vec, dtype=np.float64)
        if vec.size != self.num_params:
            raise InvalidInputError(f"expected {self.num_params} parameters, got {vec.size}")
        nr = self.root.num_params
        leaf = self.leaf.with_vector(vec[nr:]) if self.leaf is not None else None
        return replace(self, root=self.root.with_vector(vec[:nr]), leaf=leaf)

    def param_names(self) -> list[str]:
        e = self.mapped_dim
        names = [f"root.log_ls[{d}]" for d in range(e)] + ["root.log_var"]
        if self.leaf is not None:
            names += [f"leaf.log_ls[{d}]" for d in range(e)] + ["leaf.log_var"]
        return names

    def to_json(self, standardizer: Optional["Standardizer"] = None) -> dict:
        d = {
            "root": self.root.to_json(),
            "leaf": self.leaf.to_json() if self.leaf is not None else None,
            "mask": [int(b) for b in self.attr_mask],
        }
        if standardizer is not None:
            d["standardization"] = standardizer.to_json()
        return d

    @classmethod
    def from_json(cls, d: dict) -> "SubTreeKernelParams":
        leaf = ArdRbfParams.from_json(d["leaf"]) if d.get("leaf") is not None else None
        return cls(ArdRbfParams.from_json(d["root"]), leaf, [bool(b) for b in d["mask"]])


@dataclass(frozen=True)
class Standardizer:
    """Per-dimension affine map applied to mapped vertex features."""

    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def identity(cls, dim: int) -> "Standardizer":
        return cls(np.zeros(dim), np.ones(dim))

    @classmethod
    def fit(cls, x: np.ndarray) -> "Standardizer":
        x = np.asarray(x, dtype=np.float64)
        mean = x.mean(axis=0)
        std = x.std(axis=0)
        # constant dimensions (e.g. an unused third coordinate) pass through unscaled
        std = np.where(std > 1e-12, std, 1.0)
        return cls(mean, std)

    def __call__(self, x):
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std

    def to_json(self) -> dict:
        return {"mean": np.asarray(self.mean).tolist(), "std": np.asarray(self.std).tolist()}

    @classmethod
    def from_json(cls, d: dict) -> "Standardizer":
        return cls(np.array(d["mean"], dtype=np.float64), np.array(d["std"], dtype=np.float64))


def default_mask(env: str, attribute_dim: Optional[int] = None) -> np.ndarray:
    """Vertex-mapping mask used for each environment.

    GI drops the trailing static rope/ball flag; EIs keeps every dimension.
    """
    if env == "gi":
        d = 7 if attribute_dim is None else attribute_dim
        mask = np.ones(d, dtype=bool)
        mask[-1] = False
        return mask
    if env == "eis":
        return np.ones(8 if attribute_dim is None else attribute_dim, dtype=bool)
    raise InvalidInputError(f"unknown environment {env!r}")


# ---------------------------------------------------------------------------
# scalar reference path


def phi_v(v: VertexState, mask) -> np.ndarray:
    mask = np.asarray(mask, dtype=bool)
    if mask.size != v.dim:
        raise InvalidInputError(f"mask length {mask.size} != attribute dimension {v.dim}")
    if not mask.any():
        raise InvalidInputError("attribute mask selects no dimensions")
    return v.features[mask]


def _check_pair(a, b, p: ArdRbfParams):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1 or a.size != p.dim:
        raise InvalidInputError(f"length mismatch: {a.shape}, {b.shape}, lengthscales {p.dim}")
    return a, b


def ard_rbf(a, b, p: ArdRbfParams) -> float:
    """``sigma^2 * profile(sum_d ((a_d - b_d) / theta_d)^2)``."""
    a, b = _check_pair(a, b, p)
    r2 = float(np.sum(((a - b) / p.lengthscales) ** 2))
    return p.variance * float(_base(p.kind).profile(r2))


def ard_rbf_grad(a, b, p: ArdRbfParams) -> tuple[float, np.ndarray]:
    """Value and gradient w.r.t. ``(log theta_1..E, log sigma^2)``."""
    a, b = _check_pair(a, b, p)
    sq = ((a - b) / p.lengthscales) ** 2
    r2 = float(sq.sum())
    base = _base(p.kind)
    value = p.variance * float(base.profile(r2))
    dls = -2.0 * p.variance * float(base.dprofile_dr2(r2)) * sq
    return value, np.append(dls, value)


def _mapped(vs: Sequence[VertexState], mask, standardizer):
    e = int(np.sum(np.asarray(mask, dtype=bool)))
    x = np.array([phi_v(v, mask) for v in vs], dtype=np.float64).reshape(len(vs), e)
    return standardizer(x) if standardizer is not None else x


def k_nn(si: SubTree, sj: SubTree, p: SubTreeKernelParams, standardizer=None) -> float:
    """Mean leaf-kernel value over all leaf pairs; 0 if either side is leafless."""
    if p.leaf is None or not si.leaves or not sj.leaves:
        return 0.0
    la = _mapped(si.leaves, p.attr_mask, standardizer)
    lb = _mapped(sj.leaves, p.attr_mask, standardizer)
    # fsum is exactly rounded, so the result does not depend on pair order
    total = math.fsum(ard_rbf(a, b, p.leaf) for a in la for b in lb)
    return total / (len(la) * len(lb))


def subtree_kernel(si: SubTree, sj: SubTree, p: SubTreeKernelParams, standardizer=None) -> float:
    ra = _mapped([si.root], p.attr_mask, standardizer)[0]
    rb = _mapped([sj.root], p.attr_mask, standardizer)[0]
    return ard_rbf(ra, rb, p.root) + k_nn(si, sj, p, standardizer)


def subtree_kernel_grad(
    si: SubTree, sj: SubTree, p: SubTreeKernelParams, standardizer=None
) -> tuple[float, np.ndarray]:
    """Kernel value and its gradient over ``p.to_vector()`` ordering."""
    ra = _mapped([si.root], p.attr_mask, standardizer)[0]
    rb = _mapped([sj.root], p.attr_mask, standardizer)[0]
    value, g_root = ard_rbf_grad(ra, rb, p.root)
    if p.leaf is None:
        return value, g_root
    g_leaf = np.zeros(p.leaf.num_params)
    if si.leaves and sj.leaves:
        la = _mapped(si.leaves, p.attr_mask, standardizer)
        lb = _mapped(sj.leaves, p.attr_mask, standardizer)
        knn = 0.0
        for a in la:
            for b in lb:
                v, g = ard_rbf_grad(a, b, p.leaf)
                knn += v
                g_leaf += g
        norm = len(la) * len(lb)
        value += knn / norm
        g_leaf /= norm
    return value, np.concatenate([g_root, g_leaf])


# ---------------------------------------------------------------------------
# batched path


@dataclass(frozen=True)
class SubTreeBatch:
    """Mapped (and standardized) root and leaf features for many sub-trees.

    Leaves are stored flat, grouped by owning sub-tree in ascending order.
    """

    roots: np.ndarray
    leaves: np.ndarray
    counts: np.ndarray
    _embed: sparse.csr_matrix = field(default=None, repr=False, compare=False)
    _unique: np.ndarray = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        # C order everywhere: numpy's vectorized exp may round differently on
        # strided input, and results must not depend on how arrays were built
        roots = np.ascontiguousarray(self.roots, dtype=np.float64)
        counts = np.asarray(self.counts, dtype=np.intp)
        leaves = np.ascontiguousarray(np.reshape(self.leaves, (-1, roots.shape[1])), dtype=np.float64)
        if counts.shape != (roots.shape[0],) or counts.sum() != leaves.shape[0]:
            raise InvalidInputError("leaf counts inconsistent with leaf array")
        object.__setattr__(self, "roots", roots)
        object.__setattr__(self, "leaves", leaves)
        object.__setattr__(self, "counts", counts)
        # sub-trees from one snapshot share leaves; kernel work runs on unique rows
        if leaves.shape[0]:
            unique, inverse = np.unique(leaves, axis=0, return_inverse=True)
            inverse = inverse.reshape(-1)
        else:
            unique, inverse = leaves, np.zeros(0, dtype=np.intp)
        owner = np.repeat(np.arange(roots.shape[0]), counts)
        w = 1.0 / counts[owner] if owner.size else np.zeros(0)
        embed = sparse.csr_matrix((w, (owner, inverse)), shape=(roots.shape[0], unique.shape[0]))
        embed.sum_duplicates()
        object.__setattr__(self, "_embed", embed)
        object.__setattr__(self, "_unique", unique)

    def __len__(self) -> int:
        return self.roots.shape[0]

    @property
    def embed(self) -> sparse.csr_matrix:
        """Sparse ``(n, n_unique)`` mean-embedding weights over unique leaves."""
        return self._embed

    @property
    def unique_leaves(self) -> np.ndarray:
        return self._unique

    @classmethod
    def from_features(cls, root_feats, leaf_feats: Sequence[np.ndarray]) -> "SubTreeBatch":
        roots = np.asarray(root_feats, dtype=np.float64)
        counts = np.array([len(lf) for lf in leaf_feats], dtype=np.intp)
        e = roots.shape[1]
        leaves = (
            np.vstack([np.asarray(lf, dtype=np.float64).reshape(-1, e) for lf in leaf_feats])
            if counts.sum()
            else np.zeros((0, e))
        )
        return cls(roots, leaves, counts)

    @classmethod
    def from_subtrees(cls, trees: Sequence[SubTree], mask, standardizer=None) -> "SubTreeBatch":
        roots = _mapped([t.root for t in trees], mask, standardizer)
        leaves = [_mapped(t.leaves, mask, standardizer) for t in trees]
        return cls.from_features(roots, leaves)

    @classmethod
    def from_snapshot(
        cls,
        g: GraphSnapshot,
        mask,
        standardizer=None,
        nodes=None,
        neighbors=None,
    ) -> "SubTreeBatch":
        """Sub-trees rooted at ``nodes`` (default: all) of ``g``.

        ``neighbors`` overrides the snapshot's own adjacency, e.g. to reuse a
        fixed reference adjacency with the current attributes.
        """
        mask = np.asarray(mask, dtype=bool)
        if mask.size != g.attribute_dim:
            raise InvalidInputError(
                f"mask length {mask.size} != snapshot attribute dimension {g.attribute_dim}"
            )
        feats = g.features[:, mask]
        if standardizer is not None:
            feats = standardizer(feats)
        nbrs = g.neighbors if neighbors is None else neighbors
        if len(nbrs) != g.num_vertices:
            raise InvalidInputError("neighbour lists do not match the snapshot's vertex count")
        nodes = range(g.num_vertices) if nodes is None else nodes
        nodes = np.asarray(list(nodes), dtype=np.intp)
        counts = np.array([len(nbrs[i]) for i in nodes], dtype=np.intp)
        idx = np.concatenate([np.asarray(nbrs[i], dtype=np.intp) for i in nodes]) if len(nodes) else []
        return cls(feats[nodes], feats[np.asarray(idx, dtype=np.intp)], counts)

    @classmethod
    def concat(cls, batches: Sequence["SubTreeBatch"]) -> "SubTreeBatch":
        return cls(
            np.vstack([b.roots for b in batches]),
            np.vstack([b.leaves for b in batches]),
            np.concatenate([b.counts for b in batches]),
        )

    def take(self, index) -> "SubTreeBatch":
        index = np.asarray(index, dtype=np.intp)
        starts = np.concatenate([[0], np.cumsum(self.counts)])
        leaves = [self.leaves[starts[i] : starts[i + 1]] for i in index]
        return SubTreeBatch.from_features(self.roots[index], leaves)

    def to_json(self) -> dict:
        return {"roots": self.roots.tolist(), "leaves": self.leaves.tolist(), "counts": self.counts.tolist()}

    @classmethod
    def from_json(cls, d: dict) -> "SubTreeBatch":
        roots = np.array(d["roots"], dtype=np.float64)
        return cls(roots, np.array(d["leaves"], dtype=np.float64).reshape(-1, roots.shape[1]), d["counts"])


def _scaled_sq(a: np.ndarray, b: np.ndarray, ls: np.ndarray) -> np.ndarray:
    """Per-dimension scaled squared differences, shape ``(E, na, nb)``."""
    a = a / ls
    b = b / ls
    return (a.T[:, :, None] - b.T[:, None, :]) ** 2


def _base_gram(a, b, p: ArdRbfParams) -> np.ndarray:
    r2 = _scaled_sq(a, b, p.lengthscales).sum(axis=0) if a.size and b.size else np.zeros((len(a), len(b)))
    return p.variance * _base(p.kind).profile(r2)


def _leaf_blocks(la: np.ndarray, lb: np.ndarray):
    step = max(1, _CHUNK_ENTRIES // max(1, lb.shape[0] * la.shape[1]))
    for s in range(0, la.shape[0], step):
        yield s, min(la.shape[0], s + step)


def _neighbourhood_gram(a: SubTreeBatch, b: SubTreeBatch, p: ArdRbfParams) -> np.ndarray:
    out = np.zeros((len(a), len(b)))
    ua, ub = a.unique_leaves, b.unique_leaves
    if ua.shape[0] == 0 or ub.shape[0] == 0:
        return out
    ea = a.embed.tocsc()
    eb = b.embed
    for s, e in _leaf_blocks(ua, ub):
        kl = _base_gram(ua[s:e], ub, p)  # (c, nUb)
        out += ea[:, s:e] @ (eb @ kl.T).T
    return out


def gram(a: SubTreeBatch, b: SubTreeBatch, p: SubTreeKernelParams) -> np.ndarray:
    """Cross Gram matrix ``K[i, j] = K(a_i, b_j)``."""
    k = _base_gram(a.roots, b.roots, p.root)
    if p.leaf is not None:
        k = k + _neighbourhood_gram(a, b, p.leaf)
    return k


def gram_diag(a: SubTreeBatch, p: SubTreeKernelParams) -> np.ndarray:
    """``K(a_i, a_i)`` for every sub-tree in ``a``."""
    d = np.full(len(a), p.root.variance * float(_base(p.root.kind).profile(0.0)))
    if p.leaf is None or a.leaves.shape[0] == 0:
        return d
    # pad leaf sets to a common size and evaluate all within-set pairs at once
    cmax = int(a.counts.max())
    e = a.leaves.shape[1]
    starts = np.concatenate([[0], np.cumsum(a.counts)])
    scaled = a.leaves / p.leaf.lengthscales
    profile = _base(p.leaf.kind).profile
    step = max(1, _CHUNK_ENTRIES // (cmax * cmax * e))
    for s in range(0, len(a), step):
        t = min(len(a), s + step)
        counts = a.counts[s:t]
        lo, hi = starts[s], starts[t]
        owner = np.repeat(np.arange(t - s), counts)
        slot = np.arange(lo, hi) - np.repeat(starts[s:t], counts)
        pad = np.zeros((t - s, cmax, e))
        valid = np.zeros((t - s, cmax), dtype=bool)
        pad[owner, slot] = scaled[lo:hi]
        valid[owner, slot] = True
        r2 = np.sum((pad[:, :, None, :] - pad[:, None, :, :]) ** 2, axis=-1)
        kl = p.leaf.variance * profile(r2)
        kl *= valid[:, :, None] & valid[:, None, :]
        has = counts > 0
        d[s:t][has] += kl[has].sum(axis=(1, 2)) / counts[has].astype(np.float64) ** 2
    return d


def gram_and_grads(a: SubTreeBatch, p: SubTreeKernelParams) -> tuple[np.ndarray, np.ndarray]:
    """Symmetric Gram matrix and its derivatives w.r.t. every log-parameter.

    Returns ``K`` of shape ``(n, n)`` and ``dK`` of shape ``(P, n, n)`` with
    ``P = p.num_params`` in ``p.to_vector()`` order.
    """
    n = len(a)
    e = p.mapped_dim
    dk = np.zeros((p.num_params, n, n))

    sq = _scaled_sq(a.roots, a.roots, p.root.lengthscales)
    r2 = sq.sum(axis=0)
    base = _base(p.root.kind)
    kr = p.root.variance * base.profile(r2)
    dkr = -2.0 * p.root.variance * base.dprofile_dr2(r2)
    for d in range(e):
        dk[d] = dkr * sq[d]
    dk[e] = kr
    k = kr.copy()

    if p.leaf is not None:
        off = p.root.num_params
        ua = a.unique_leaves
        if ua.shape[0]:
            emb = a.embed
            emb_c = emb.tocsc()
            lbase = _base(p.leaf.kind)
            ls = p.leaf.lengthscales
            knn = np.zeros((n, n))
            for s, t in _leaf_blocks(ua, ua):
                lsq = _scaled_sq(ua[s:t], ua, ls)
                lr2 = lsq.sum(axis=0)
                kl = p.leaf.variance * lbase.profile(lr2)
                dkl = -2.0 * p.leaf.variance * lbase.dprofile_dr2(lr2)
                left = emb_c[:, s:t]
                knn += left @ (emb @ kl.T).T
                for d in range(e):
                    dk[off + d] += left @ (emb @ (dkl * lsq[d]).T).T
            # symmetrize away reassociation differences between the two sides
            knn = 0.5 * (knn + knn.T)
            for d in range(e):
                dk[off + d] = 0.5 * (dk[off + d] + dk[off + d].T)
            dk[off + e] = knn
            k = k + knn
    return k, dk
