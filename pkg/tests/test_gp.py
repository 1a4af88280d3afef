import math

import numpy as np
import pytest

from eggp.errors import InvalidInputError, NumericalError, TrainingError
from eggp.gp import (
    JITTER_START,
    AdamConfig,
    GpProblem,
    adam_optimize,
    cholesky_jittered,
    neg_mll,
    neg_mll_and_grad,
    neg_mll_grad,
    posterior,
    write_trace_csv,
)
from eggp.kernels import SubTreeBatch, SubTreeKernelParams, gram_and_grads

from conftest import random_subtree


def random_problem(rng, n, f=1):
    x = rng.normal(size=(n, 3))
    var, ls = np.exp(rng.normal()), np.exp(rng.normal(0, 0.3))

    def kern(a, b):
        return var * np.exp(-0.5 * ((a[:, None] - b[None]) ** 2).sum(-1) / ls**2)

    prob = GpProblem(kern(x, x), rng.normal(size=(n, f)), float(rng.uniform(-6, -1)))
    return prob, lambda xs: (kern(xs, x), np.full(len(xs), var))


def naive_posterior(k, y, total_noise, ks, kss):
    inv = np.linalg.inv(k + total_noise * np.eye(len(k)))
    return ks @ inv @ y, kss - np.einsum("ij,jk,ik->i", ks, inv, ks)


def test_cholesky_identity():
    f = cholesky_jittered(np.eye(3), -np.inf)
    np.testing.assert_allclose(f.lower, math.sqrt(1 + 1e-6) * np.eye(3), rtol=1e-15)


def test_cholesky_two_by_two():
    f = cholesky_jittered(np.array([[2.0, 1.0], [1.0, 2.0]]), -np.inf)
    ref = np.array([[math.sqrt(2), 0], [1 / math.sqrt(2), math.sqrt(1.5)]])
    np.testing.assert_allclose(f.lower, ref, atol=1e-6)


def test_cholesky_reconstruction(rng):
    a = rng.normal(size=(20, 20))
    spd = a @ a.T + 20 * np.eye(20)
    f = cholesky_jittered(spd, -np.inf)
    np.testing.assert_allclose(f.lower @ f.lower.T, spd + f.jitter * np.eye(20), atol=1e-10)


def test_cholesky_escalates_then_fails():
    # rank-deficient: fails at 0 jitter on some platforms, succeeds with jitter
    v = np.ones((4, 1))
    f = cholesky_jittered(v @ v.T, -np.inf)
    assert f.jitter >= JITTER_START
    with pytest.raises(NumericalError, match="min eigenvalue"):
        cholesky_jittered(np.diag([1.0, -1.0]), -np.inf)


def test_problem_validation():
    with pytest.raises(InvalidInputError):
        GpProblem(np.array([[1.0, 0.5], [0.0, 1.0]]), np.zeros(2), 0.0)
    with pytest.raises(InvalidInputError):
        GpProblem(np.eye(2), np.array([0.0, np.nan]), 0.0)
    with pytest.raises(InvalidInputError):
        GpProblem(np.eye(2), np.zeros(3), 0.0)
    with pytest.raises(InvalidInputError):
        GpProblem(np.zeros((0, 0)), np.zeros(0), 0.0)


def test_posterior_interpolates_training_point(rng):
    prob, _ = random_problem(rng, 8)
    prob = GpProblem(prob.gram, prob.targets, math.log(1e-8))
    res = posterior(prob, prob.gram[3:4], prob.gram[3, 3:4])
    assert abs(res.mean[0, 0] - prob.targets[3, 0]) <= 1e-4
    assert res.variance[0, 0] <= 1e-4


def test_posterior_single_point():
    prob = GpProblem([[1.0]], [[0.7]], -np.inf)
    res = posterior(prob, [[1.0]], [1.0])
    assert res.mean[0, 0] == pytest.approx(0.7, abs=1e-5)
    assert res.variance[0, 0] == pytest.approx(0.0, abs=1e-5)


def test_posterior_matches_naive_inverse(rng):
    for _ in range(25):
        n = int(rng.integers(1, 31))
        prob, cross = random_problem(rng, n, f=int(rng.integers(1, 3)))
        ks, kss = cross(rng.normal(size=(7, 3)))
        f = cholesky_jittered(prob.gram, prob.log_noise)
        res = posterior(prob, ks, kss, f)
        m, v = naive_posterior(prob.gram, prob.targets, prob.noise + f.jitter, ks, kss)
        np.testing.assert_allclose(res.mean, m, atol=1e-8)
        np.testing.assert_allclose(res.variance[:, 0], np.maximum(v, 0), atol=1e-8)
        assert np.all(res.variance <= kss[:, None] + 1e-10)
        assert res.variance.shape == res.mean.shape


def test_neg_mll_closed_forms(rng):
    assert neg_mll(GpProblem([[1.0]], [[0.0]], -np.inf)) == pytest.approx(0.5 * math.log(2 * math.pi), abs=1e-6)
    n, s = 6, 0.7
    y = rng.normal(size=(n, 1))
    prob = GpProblem(s * np.eye(n), y, math.log(0.2))
    var = s + 0.2 + 1e-6
    dens = sum(-0.5 * math.log(2 * math.pi * var) - 0.5 * yi * yi / var for yi in y[:, 0])
    assert neg_mll(prob) == pytest.approx(-dens, rel=1e-12)
    two = GpProblem(prob.gram, np.hstack([y, y]), prob.log_noise)
    assert neg_mll(two) == pytest.approx(2 * neg_mll(prob), rel=1e-14)


def test_grad_zero_derivatives(rng):
    prob, _ = random_problem(rng, 5)
    g = neg_mll_grad(prob, np.zeros((3, 5, 5)))
    assert np.all(g[:3] == 0)
    with pytest.raises(InvalidInputError):
        neg_mll_grad(prob, np.zeros((3, 4, 4)))


def _objective(batch, p, y):
    def f(vec):
        q = p.with_vector(vec[:-1])
        k, dk = gram_and_grads(batch, q)
        return neg_mll_and_grad(GpProblem(k, y, vec[-1]), dk)

    return f


def test_neg_mll_grad_finite_difference(rng):
    h = 1e-5
    for _ in range(20):
        e = 3
        p = SubTreeKernelParams.init(np.ones(e, bool))
        trees = [random_subtree(rng, int(rng.integers(0, 4)), p=1, s=1) for _ in range(10)]
        batch = SubTreeBatch.from_subtrees(trees, p.attr_mask)
        y = rng.normal(size=(10, 2))
        x = np.append(rng.normal(0, 0.4, p.num_params), rng.uniform(-3, -1))
        f = _objective(batch, p, y)
        _, g = f(x)
        for j in range(x.size):
            xp, xm = x.copy(), x.copy()
            xp[j] += h
            xm[j] -= h
            fd = (f(xp)[0] - f(xm)[0]) / (2 * h)
            assert abs(g[j] - fd) <= 1e-4 * max(abs(fd), 1e-6), (j, g[j], fd)


def test_noise_gradient_isotropic_limit(rng):
    n = 8
    y = rng.normal(size=(n, 1))
    prob, _ = random_problem(rng, n)
    log_s = math.log(1e6)
    big = GpProblem(prob.gram, y, log_s)
    g = neg_mll_grad(big, np.zeros((0, n, n)))[-1]
    s = math.exp(log_s)
    ref = 0.5 * n - 0.5 * float(y[:, 0] @ y[:, 0]) / s
    assert g == pytest.approx(ref, rel=1e-5)


def test_adam_quadratic():
    res = adam_optimize(lambda x: (float(x @ x), 2 * x), [1.0], AdamConfig())
    assert abs(res.params[0]) < 1e-2
    assert len(res.trace) == 151
    assert res.trace[-1] == pytest.approx(float(res.params @ res.params))


def test_adam_zero_gradient():
    res = adam_optimize(lambda x: (1.0, np.zeros_like(x)), [0.3, -2.0], AdamConfig(iterations=10))
    np.testing.assert_array_equal(res.params, [0.3, -2.0])


def test_adam_aborts_with_trace():
    def f(x):
        return (float(x[0]) if x[0] > 0.5 else float("nan")), np.ones(1)

    with pytest.raises(TrainingError) as info:
        adam_optimize(f, [1.0], AdamConfig(iterations=50))
    assert len(info.value.trace) > 1
    assert math.isnan(info.value.trace[-1])
    with pytest.raises(InvalidInputError):
        AdamConfig(learning_rate=0.0)
    with pytest.raises(InvalidInputError):
        AdamConfig(iterations=0)


def test_gp_fit_trace_finite_and_descends(rng, tmp_path):
    p = SubTreeKernelParams.init(np.ones(3, bool))
    trees = [random_subtree(rng, int(rng.integers(0, 4)), p=1, s=1) for _ in range(25)]
    batch = SubTreeBatch.from_subtrees(trees, p.attr_mask)
    y = np.sin(batch.roots.sum(1, keepdims=True))
    res = adam_optimize(_objective(batch, p, y), np.append(p.to_vector(), math.log(1e-2)))
    assert np.all(np.isfinite(res.trace))
    assert res.trace[-1] < res.trace[0]
    run_min = np.minimum.accumulate(res.trace)
    assert np.all(np.array(res.trace[-20:]) <= run_min[-20:] + 1e-3)
    path = tmp_path / "trace.csv"
    write_trace_csv(path, res.trace)
    lines = path.read_text().splitlines()
    assert lines[0] == "iteration,loss" and len(lines) == 152
    assert float(lines[5].split(",")[1]) == res.trace[4]
