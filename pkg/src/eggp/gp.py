"""Exact GP algebra: jittered Cholesky, posterior, marginal likelihood, Adam.

All routines work on a precomputed Gram matrix, so they are independent of
the kernel.  Several output columns may share one Gram matrix; they are
treated as independent GPs with a common kernel and noise.
"""

from __future__ import annotations

import csv
import logging
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy import linalg

from .errors import InvalidInputError, NumericalError, TrainingError

log = logging.getLogger(__name__)

LOG_2PI = float(np.log(2.0 * np.pi))
JITTER_START = 1e-6
JITTER_MAX = 1e-2


@dataclass(frozen=True)
class GpProblem:
    gram: np.ndarray
    targets: np.ndarray
    log_noise: float

    def __post_init__(self):
        k = np.asarray(self.gram, dtype=np.float64)
        y = np.asarray(self.targets, dtype=np.float64)
        if y.ndim == 1:
            y = y[:, None]
        if k.ndim != 2 or k.shape[0] != k.shape[1] or k.shape[0] < 1:
            raise InvalidInputError(f"gram must be a non-empty square matrix, got {k.shape}")
        if y.shape[0] != k.shape[0]:
            raise InvalidInputError(f"targets have {y.shape[0]} rows, gram has {k.shape[0]}")
        if not np.all(np.isfinite(y)):
            raise InvalidInputError("targets contain non-finite entries")
        if not np.allclose(k, k.T, rtol=0.0, atol=1e-12 * max(1.0, np.abs(k).max())):
            raise InvalidInputError("gram matrix is not symmetric")
        object.__setattr__(self, "gram", k)
        object.__setattr__(self, "targets", y)
        object.__setattr__(self, "log_noise", float(self.log_noise))

    @property
    def n(self) -> int:
        return self.gram.shape[0]

    @property
    def noise(self) -> float:
        return float(np.exp(self.log_noise))


@dataclass(frozen=True)
class PosteriorResult:
    mean: np.ndarray
    variance: np.ndarray


@dataclass(frozen=True)
class AdamConfig:
    learning_rate: float = 0.1
    iterations: int = 150
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise InvalidInputError("learning_rate must be positive")
        if int(self.iterations) < 1:
            raise InvalidInputError("iterations must be >= 1")


@dataclass(frozen=True)
class Factor:
    """Lower Cholesky factor of ``gram + (noise + jitter) I``."""

    lower: np.ndarray
    jitter: float


def cholesky_jittered(gram, log_noise: float) -> Factor:
    """Factor ``gram + (exp(log_noise) + jitter) I``.

    Jitter starts at 1e-6 and grows tenfold up to 1e-2 until the
    factorization succeeds.
    """
    k = np.asarray(gram, dtype=np.float64)
    noise = float(np.exp(log_noise))
    jitter = JITTER_START
    while True:
        try:
            lower = linalg.cholesky(k + (noise + jitter) * np.eye(k.shape[0]), lower=True)
            if np.all(np.isfinite(lower)):
                return Factor(lower, jitter)
        except linalg.LinAlgError:
            pass
        if jitter >= JITTER_MAX * (1 - 1e-12):
            w = np.linalg.eigvalsh(0.5 * (k + k.T)) if np.all(np.isfinite(k)) else np.array([np.nan])
            raise NumericalError(
                f"matrix not positive definite after jitter {jitter:g}: n={k.shape[0]}, "
                f"noise={noise:g}, min eigenvalue={w.min():g}, max eigenvalue={w.max():g}"
            )
        jitter *= 10.0
        log.debug("cholesky failed, raising jitter to %g", jitter)


def _solve(factor: Factor, b: np.ndarray) -> np.ndarray:
    return linalg.cho_solve((factor.lower, True), b)


def posterior(
    problem: GpProblem,
    k_star,
    k_star_star_diag,
    factor: Optional[Factor] = None,
) -> PosteriorResult:
    """Posterior mean and marginal variance at test inputs.

    ``k_star`` is ``(n_test, n)``; ``k_star_star_diag`` is ``(n_test,)``.
    Returned arrays are ``(n_test, F)``; variances are clamped at 0.
    """
    ks = np.asarray(k_star, dtype=np.float64)
    if ks.ndim != 2 or ks.shape[1] != problem.n:
        raise InvalidInputError(f"k_star must be (n_test, {problem.n}), got {ks.shape}")
    if factor is None:
        factor = cholesky_jittered(problem.gram, problem.log_noise)
    alpha = _solve(factor, problem.targets)
    return posterior_from_factor(factor, alpha, ks, k_star_star_diag)


def posterior_from_factor(factor: Factor, alpha, k_star, k_star_star_diag) -> PosteriorResult:
    """Posterior given a stored factor and weights ``alpha = (K + S)^-1 y``."""
    ks = np.asarray(k_star, dtype=np.float64)
    kss = np.asarray(k_star_star_diag, dtype=np.float64).reshape(-1)
    alpha = np.asarray(alpha, dtype=np.float64)
    if alpha.ndim == 1:
        alpha = alpha[:, None]
    n = factor.lower.shape[0]
    if ks.ndim != 2 or ks.shape[1] != n or kss.shape[0] != ks.shape[0] or alpha.shape[0] != n:
        raise InvalidInputError(
            f"inconsistent shapes: k_star {ks.shape}, k** {kss.shape}, alpha {alpha.shape}, n={n}"
        )
    mean = ks @ alpha
    v = linalg.solve_triangular(factor.lower, ks.T, lower=True)
    var = np.maximum(kss - np.sum(v * v, axis=0), 0.0)
    return PosteriorResult(mean, np.repeat(var[:, None], alpha.shape[1], axis=1))


def solve(factor: Factor, b) -> np.ndarray:
    """``(K + S)^-1 b`` through the Cholesky factor."""
    return _solve(factor, np.asarray(b, dtype=np.float64))


def neg_mll(problem: GpProblem, factor: Optional[Factor] = None) -> float:
    """Negative log marginal likelihood summed over output columns."""
    if factor is None:
        factor = cholesky_jittered(problem.gram, problem.log_noise)
    y = problem.targets
    alpha = _solve(factor, y)
    n, f = y.shape
    logdet = 2.0 * np.sum(np.log(np.diag(factor.lower)))
    return float(0.5 * np.sum(y * alpha) + f * (0.5 * logdet + 0.5 * n * LOG_2PI))


def neg_mll_grad(
    problem: GpProblem,
    kernel_param_grads,
    factor: Optional[Factor] = None,
) -> np.ndarray:
    """Gradient of ``neg_mll`` w.r.t. kernel parameters and ``log_noise``.

    ``kernel_param_grads`` is a ``(P, n, n)`` stack of Gram derivatives.  The
    result has length ``P + 1``; the last entry is the noise gradient.
    """
    dk = np.asarray(kernel_param_grads, dtype=np.float64)
    if dk.ndim == 2:
        dk = dk[None]
    if dk.ndim != 3 or dk.shape[1:] != (problem.n, problem.n):
        raise InvalidInputError(f"expected derivative stack (P, {problem.n}, {problem.n}), got {dk.shape}")
    if factor is None:
        factor = cholesky_jittered(problem.gram, problem.log_noise)
    y = problem.targets
    f = y.shape[1]
    alpha = _solve(factor, y)
    kinv = _solve(factor, np.eye(problem.n))
    w = f * kinv - alpha @ alpha.T
    grads = 0.5 * np.einsum("ij,pij->p", w, dk)
    g_noise = 0.5 * problem.noise * np.trace(w)
    return np.append(grads, g_noise)


def neg_mll_and_grad(problem: GpProblem, kernel_param_grads) -> tuple[float, np.ndarray]:
    factor = cholesky_jittered(problem.gram, problem.log_noise)
    return neg_mll(problem, factor), neg_mll_grad(problem, kernel_param_grads, factor)


@dataclass
class AdamResult:
    params: np.ndarray
    trace: list[float]


def adam_optimize(
    fun: Callable[[np.ndarray], tuple[float, np.ndarray]],
    x0,
    cfg: AdamConfig = AdamConfig(),
) -> AdamResult:
    """Minimize ``fun`` (returning ``(loss, grad)``) with Adam.

    The trace has ``cfg.iterations + 1`` entries: the loss before every
    update and the loss at the returned parameters.
    """
    x = np.array(x0, dtype=np.float64)
    m = np.zeros_like(x)
    v = np.zeros_like(x)
    trace: list[float] = []
    for t in range(1, cfg.iterations + 2):
        try:
            loss, g = fun(x)
        except NumericalError as exc:
            raise TrainingError(f"objective failed at iteration {t - 1}: {exc}", trace) from exc
        g = np.asarray(g, dtype=np.float64)
        if not (np.isfinite(loss) and np.all(np.isfinite(g))):
            trace.append(float(loss))
            raise TrainingError(f"non-finite loss or gradient at iteration {t - 1}", trace)
        trace.append(float(loss))
        if t > cfg.iterations:
            break
        m = cfg.beta1 * m + (1.0 - cfg.beta1) * g
        v = cfg.beta2 * v + (1.0 - cfg.beta2) * g * g
        mhat = m / (1.0 - cfg.beta1**t)
        vhat = v / (1.0 - cfg.beta2**t)
        x = x - cfg.learning_rate * mhat / (np.sqrt(vhat) + cfg.eps)
    return AdamResult(x, trace)


def write_trace_csv(path, trace) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["iteration", "loss"])
        for i, loss in enumerate(trace):
            w.writerow([i, repr(float(loss))])
