import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eggp.errors import InvalidInputError
from eggp.graph import ConnectivityConfig, SubTree, VertexState, build_graph
from eggp.kernels import (
    ArdRbfParams,
    Standardizer,
    SubTreeBatch,
    SubTreeKernelParams,
    ard_rbf,
    ard_rbf_grad,
    default_mask,
    gram,
    gram_and_grads,
    gram_diag,
    k_nn,
    phi_v,
    subtree_kernel,
    subtree_kernel_grad,
)

from conftest import random_subtree


def rbf_oracle(a, b, log_ls, log_var):
    r2 = sum(((x - y) / math.exp(l)) ** 2 for x, y, l in zip(a, b, log_ls))
    return math.exp(log_var) * math.exp(-0.5 * r2)


def matern_oracle(a, b, log_ls, log_var):
    r = math.sqrt(sum(((x - y) / math.exp(l)) ** 2 for x, y, l in zip(a, b, log_ls)))
    s5 = math.sqrt(5.0) * r
    return math.exp(log_var) * (1 + s5 + 5.0 * r * r / 3.0) * math.exp(-s5)


def subtree_oracle(si, sj, mask, root, leaf):
    f = lambda v: [x for x, m in zip(list(v.position) + list(v.prev_velocity) + list(v.static_attrs), mask) if m]
    val = rbf_oracle(f(si.root), f(sj.root), *root)
    if si.leaves and sj.leaves:
        tot = sum(rbf_oracle(f(a), f(b), *leaf) for a in si.leaves for b in sj.leaves)
        val += tot / (len(si.leaves) * len(sj.leaves))
    return val


def params(rng, e, with_leaf=True, kind="rbf"):
    root = ArdRbfParams(rng.normal(0, 0.5, e), float(rng.normal(0, 0.5)), kind)
    leaf = ArdRbfParams(rng.normal(0, 0.5, e), float(rng.normal(0, 0.5)), kind) if with_leaf else None
    return SubTreeKernelParams(root, leaf, np.ones(e, dtype=bool))


def test_ard_rbf_reference_values():
    p = ArdRbfParams(np.zeros(2), 0.0)
    assert ard_rbf([0, 0], [0, 0], p) == 1.0
    assert ard_rbf([1, 0], [0, 0], p) == pytest.approx(math.exp(-0.5), rel=1e-15)
    p2 = ArdRbfParams(np.log([2.0, 0.5]), math.log(3.0))
    assert ard_rbf([1, 1], [0, 0], p2) == pytest.approx(3 * math.exp(-0.5 * (0.25 + 4)), rel=1e-14)


def test_ard_rbf_matches_oracle(rng):
    for _ in range(50):
        e = int(rng.integers(1, 8))
        a, b = rng.normal(size=e), rng.normal(size=e)
        ls, lv = rng.normal(size=e), float(rng.normal())
        assert ard_rbf(a, b, ArdRbfParams(ls, lv)) == pytest.approx(rbf_oracle(a, b, ls, lv), rel=1e-12)
        m = ard_rbf(a, b, ArdRbfParams(ls, lv, "matern52"))
        assert m == pytest.approx(matern_oracle(a, b, ls, lv), rel=1e-12)


def test_ard_rbf_length_mismatch():
    with pytest.raises(InvalidInputError):
        ard_rbf([0, 0], [0, 0, 0], ArdRbfParams(np.zeros(2), 0.0))
    with pytest.raises(InvalidInputError):
        ard_rbf([0, 0, 0], [0, 0, 0], ArdRbfParams(np.zeros(2), 0.0))


@pytest.mark.parametrize("kind", ["rbf", "matern52"])
def test_ard_rbf_gradient_finite_difference(rng, kind):
    h = 1e-5
    for _ in range(20):
        e = int(rng.integers(1, 6))
        a, b = rng.normal(size=e), rng.normal(size=e)
        p = ArdRbfParams(rng.normal(0, 0.3, e), float(rng.normal(0, 0.3)), kind)
        _, g = ard_rbf_grad(a, b, p)
        x = p.to_vector()
        for k in range(x.size):
            xp, xm = x.copy(), x.copy()
            xp[k] += h
            xm[k] -= h
            fd = (ard_rbf(a, b, p.with_vector(xp)) - ard_rbf(a, b, p.with_vector(xm))) / (2 * h)
            assert abs(g[k] - fd) <= 1e-4 * max(abs(fd), 1e-8) + 1e-10


def test_knn_identical_single_leaf():
    v = VertexState([0.0, 0.0], [0.0, 0.0])
    s = SubTree(v, (v,))
    p = SubTreeKernelParams(ArdRbfParams(np.zeros(4), 0.0), ArdRbfParams(np.zeros(4), 0.0), np.ones(4, bool))
    assert k_nn(s, s, p) == 1.0


def test_knn_empty_side_is_zero(rng):
    p = params(rng, 3)
    a = random_subtree(rng, 0)
    b = random_subtree(rng, 4)
    assert k_nn(a, b, p) == 0.0
    assert k_nn(b, a, p) == 0.0


def test_knn_exact_symmetry(rng):
    p = params(rng, 5)
    for _ in range(30):
        a = random_subtree(rng, int(rng.integers(0, 9)))
        b = random_subtree(rng, int(rng.integers(0, 9)))
        assert k_nn(a, b, p) == k_nn(b, a, p)


def test_subtree_kernel_matches_oracle(rng):
    for _ in range(40):
        p = params(rng, 5)
        a = random_subtree(rng, int(rng.integers(0, 6)))
        b = random_subtree(rng, int(rng.integers(0, 6)))
        root = (p.root.log_lengthscales, p.root.log_variance)
        leaf = (p.leaf.log_lengthscales, p.leaf.log_variance)
        assert subtree_kernel(a, b, p) == pytest.approx(subtree_oracle(a, b, [1] * 5, root, leaf), rel=1e-12)


def test_mask_drops_dimension(rng):
    mask = np.array([1, 1, 1, 1, 0], dtype=bool)
    p = SubTreeKernelParams(
        ArdRbfParams(np.zeros(4), 0.0), ArdRbfParams(np.zeros(4), 0.0), mask
    )
    a = random_subtree(rng, 2)
    b = SubTree(
        VertexState(a.root.position, a.root.prev_velocity, [123.0]),
        tuple(VertexState(v.position, v.prev_velocity, [-7.0]) for v in a.leaves),
    )
    assert subtree_kernel(a, b, p) == subtree_kernel(a, a, p)
    assert phi_v(a.root, mask).shape == (4,)
    with pytest.raises(InvalidInputError):
        phi_v(a.root, np.ones(3, bool))


def test_default_masks():
    assert default_mask("gi").tolist() == [True] * 6 + [False]
    assert default_mask("eis").tolist() == [True] * 8


@pytest.mark.parametrize("kind", ["rbf", "matern52"])
def test_subtree_gradient_finite_difference(rng, kind):
    h = 1e-5
    for _ in range(10):
        p = params(rng, 4, kind=kind)
        a = random_subtree(rng, int(rng.integers(1, 5)), s=0)
        b = random_subtree(rng, int(rng.integers(1, 5)), s=0)
        _, g = subtree_kernel_grad(a, b, p)
        x = p.to_vector()
        for k in range(x.size):
            xp, xm = x.copy(), x.copy()
            xp[k] += h
            xm[k] -= h
            fd = (subtree_kernel(a, b, p.with_vector(xp)) - subtree_kernel(a, b, p.with_vector(xm))) / (2 * h)
            assert abs(g[k] - fd) <= 1e-4 * max(abs(fd), 1e-8) + 1e-10


def test_gram_psd_on_random_subtrees(rng):
    trees = [random_subtree(rng, int(rng.integers(0, 8))) for _ in range(200)]
    for kind in ("rbf", "matern52"):
        p = params(rng, 5, kind=kind)
        batch = SubTreeBatch.from_subtrees(trees, p.attr_mask)
        k = gram(batch, batch, p)
        assert np.array_equal(k, k.T) or np.max(np.abs(k - k.T)) < 1e-12
        w = np.linalg.eigvalsh(0.5 * (k + k.T))
        assert w.min() >= -1e-8 * w.max()


def test_batched_gram_matches_scalar(rng):
    p = params(rng, 5)
    ta = [random_subtree(rng, int(rng.integers(0, 6))) for _ in range(15)]
    tb = [random_subtree(rng, int(rng.integers(0, 6))) for _ in range(11)]
    ba = SubTreeBatch.from_subtrees(ta, p.attr_mask)
    bb = SubTreeBatch.from_subtrees(tb, p.attr_mask)
    k = gram(ba, bb, p)
    ref = np.array([[subtree_kernel(a, b, p) for b in tb] for a in ta])
    np.testing.assert_allclose(k, ref, rtol=1e-12, atol=1e-14)
    np.testing.assert_allclose(gram_diag(ba, p), [subtree_kernel(a, a, p) for a in ta], rtol=1e-12)


def test_gram_diag_chunked(rng, monkeypatch):
    import eggp.kernels as km

    trees = [random_subtree(rng, int(rng.integers(0, 7)), s=0) for _ in range(37)]
    p = params(rng, 4)
    batch = SubTreeBatch.from_subtrees(trees, p.attr_mask)
    full = gram_diag(batch, p)
    monkeypatch.setattr(km, "_CHUNK_ENTRIES", 50)
    np.testing.assert_allclose(gram_diag(batch, p), full, rtol=1e-14)
    np.testing.assert_allclose(full, np.diag(gram(batch, batch, p)), rtol=1e-12)


def test_shared_leaves_deduplicated(rng):
    pos = rng.random((25, 2))
    verts = [VertexState(x, rng.normal(size=2), [1.0]) for x in pos]
    g = build_graph(verts, ConnectivityConfig(0.4, 4))
    p = params(rng, 5)
    batch = SubTreeBatch.from_snapshot(g, p.attr_mask)
    assert batch.unique_leaves.shape[0] < batch.leaves.shape[0]
    from eggp.graph import extract_subtree

    trees = [extract_subtree(g, i) for i in range(25)]
    ref = np.array([[subtree_kernel(a, b, p) for b in trees] for a in trees])
    np.testing.assert_allclose(gram(batch, batch, p), ref, rtol=1e-12, atol=1e-14)


def test_gram_and_grads_finite_difference(rng):
    h = 1e-5
    for kind in ("rbf", "matern52"):
        p = params(rng, 4, kind=kind)
        trees = [random_subtree(rng, int(rng.integers(0, 5)), s=0) for _ in range(12)]
        batch = SubTreeBatch.from_subtrees(trees, p.attr_mask)
        k, dk = gram_and_grads(batch, p)
        np.testing.assert_allclose(k, gram(batch, batch, p), rtol=1e-12, atol=1e-14)
        x = p.to_vector()
        for j in range(x.size):
            xp, xm = x.copy(), x.copy()
            xp[j] += h
            xm[j] -= h
            fd = (gram(batch, batch, p.with_vector(xp)) - gram(batch, batch, p.with_vector(xm))) / (2 * h)
            err = np.abs(dk[j] - fd)
            assert np.all(err <= 1e-4 * np.maximum(np.abs(fd), 1e-8) + 1e-10)


def test_gram_and_grads_root_only(rng):
    p = params(rng, 3, with_leaf=False)
    trees = [random_subtree(rng, 3, s=0) for _ in range(6)]
    p = SubTreeKernelParams(p.root, None, np.array([1, 1, 0, 1], bool))
    batch = SubTreeBatch.from_subtrees(trees, p.attr_mask)
    k, dk = gram_and_grads(batch, p)
    assert dk.shape == (4, 6, 6)
    ref = np.array([[subtree_kernel(a, b, p) for b in trees] for a in trees])
    np.testing.assert_allclose(k, ref, rtol=1e-12)


def test_standardizer_applied_consistently(rng):
    p = params(rng, 5)
    trees = [random_subtree(rng, 3) for _ in range(8)]
    raw = np.array([phi_v(t.root, p.attr_mask) for t in trees])
    std = Standardizer.fit(raw * 10 + 3)
    batch = SubTreeBatch.from_subtrees(trees, p.attr_mask, std)
    ref = np.array([[subtree_kernel(a, b, p, std) for b in trees] for a in trees])
    np.testing.assert_allclose(gram(batch, batch, p), ref, rtol=1e-12)
    const = Standardizer.fit(np.ones((4, 2)))
    assert np.all(const.std == 1.0)


def test_batch_take_concat_json(rng):
    p = params(rng, 5)
    trees = [random_subtree(rng, int(rng.integers(0, 4))) for _ in range(9)]
    batch = SubTreeBatch.from_subtrees(trees, p.attr_mask)
    sub = batch.take([4, 0, 7])
    np.testing.assert_array_equal(gram(sub, sub, p), gram(batch, batch, p)[np.ix_([4, 0, 7], [4, 0, 7])])
    both = SubTreeBatch.concat([batch.take([0, 1]), batch.take([2])])
    np.testing.assert_array_equal(both.counts, batch.counts[:3])
    back = SubTreeBatch.from_json(batch.to_json())
    np.testing.assert_array_equal(back.leaves, batch.leaves)


def test_params_round_trip():
    p = SubTreeKernelParams(
        ArdRbfParams(np.array([0.1, -0.2]), 0.3), ArdRbfParams(np.array([0.0, 1.0]), -1.0, "matern52"),
        np.array([1, 1, 0], bool),
    )
    std = Standardizer(np.array([1.0, 2.0]), np.array([3.0, 4.0]))
    d = p.to_json(std)
    assert set(d) == {"root", "leaf", "mask", "standardization"}
    back = SubTreeKernelParams.from_json(d)
    np.testing.assert_array_equal(back.to_vector(), p.to_vector())
    assert back.leaf.kind == "matern52"
    assert np.array_equal(Standardizer.from_json(d["standardization"]).std, std.std)
    assert len(p.param_names()) == p.num_params == 6


def test_mismatched_lengthscales_rejected():
    with pytest.raises(InvalidInputError):
        SubTreeKernelParams(ArdRbfParams(np.zeros(3), 0.0), None, np.ones(4, bool))


coords = st.floats(-3, 3, allow_nan=False)


@settings(max_examples=40, deadline=None)
@given(
    st.lists(st.tuples(coords, coords, coords), min_size=1, max_size=5),
    st.lists(st.tuples(coords, coords, coords), min_size=0, max_size=5),
    st.lists(st.tuples(coords, coords, coords), min_size=0, max_size=5),
    st.randoms(use_true_random=False),
)
def test_kernel_symmetric_bounded_permutation_invariant(ra, la, lb, rnd):
    def mk(rows):
        return [VertexState([r[0]], [r[1]], [r[2]]) for r in rows]

    mask = np.ones(3, bool)
    p = SubTreeKernelParams(ArdRbfParams(np.zeros(3), 0.2), ArdRbfParams(np.full(3, 0.3), -0.1), mask)
    a = SubTree(mk(ra)[0], tuple(mk(la)))
    b = SubTree(mk(ra)[-1], tuple(mk(lb)))
    kab, kba = subtree_kernel(a, b, p), subtree_kernel(b, a, p)
    assert kab == pytest.approx(kba, rel=1e-14, abs=1e-300)
    assert 0.0 <= kab <= p.root.variance + p.leaf.variance + 1e-12
    perm = list(a.leaves)
    rnd.shuffle(perm)
    assert subtree_kernel(SubTree(a.root, tuple(perm)), b, p) == pytest.approx(kab, rel=1e-13, abs=1e-300)
