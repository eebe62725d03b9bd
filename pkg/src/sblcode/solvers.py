"""End-to-end SBL solvers: CHAMPAGNE, reweighted l21 and the low-SNR group lasso."""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .model import (
    ProblemInstance,
    SourceEstimate,
    assemble_covariance,
    check_gamma,
    compute_dual_weights,
    eval_F,
    gamma_from_x,
    posterior_mean,
    prune_gamma,
)
from .prox import InnerProblem, lipschitz_estimate, weighted_l21_run

__all__ = [
    "VARIANTS",
    "SolverConfig",
    "IterTrace",
    "SolverResult",
    "champagne_solve",
    "reweighted_solve",
    "low_snr_solve",
    "low_snr_weights",
    "solve",
]

VARIANTS = ("champagne", "reweighted", "low_snr")


@dataclass(frozen=True)
class SolverConfig:
    """Solver settings.

    ``sigma0_sq`` is the noise hyperparameter of the low-SNR variant; when
    left as ``None`` the problem's ``noise_var`` is used. ``gamma_init`` is
    the constant initial variance.
    """

    variant: str = "reweighted"
    max_outer: int = 500
    inner_k: int = 50
    outer_tol: float = 1e-6
    inner_tol: float = 1e-10
    accelerated: bool = True
    gamma_init: float = 1.0
    sigma0_sq: Optional[float] = None
    prune_rel: float = 1e-12

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if self.max_outer < 1 or self.inner_k < 1:
            raise ValueError("max_outer and inner_k must be >= 1")
        if not (self.outer_tol >= 0 and self.inner_tol > 0):
            raise ValueError("outer_tol must be nonnegative and inner_tol positive")
        if self.sigma0_sq is not None and not self.sigma0_sq > 0:
            raise ValueError("sigma0_sq must be positive")
        if not self.gamma_init > 0:
            raise ValueError("gamma_init must be positive")
        if self.prune_rel < 0:
            raise ValueError("prune_rel must be nonnegative")


@dataclass(frozen=True)
class IterTrace:
    iter: int
    wall_seconds: float
    objective: float
    data_fit: float
    n_active: int
    recon_snr_db: Optional[float] = None


@dataclass
class SolverResult:
    estimate: SourceEstimate
    gamma: np.ndarray
    trace: list[IterTrace] = field(default_factory=list)
    converged: bool = False
    outer_iterations: int = 0
    v: Optional[np.ndarray] = None

    @property
    def objectives(self) -> np.ndarray:
        return np.array([t.objective for t in self.trace])


def _recon_snr(X_true, X) -> Optional[float]:
    if X_true is None:
        return None
    err = float(np.sum((X - X_true) ** 2))
    sig = float(np.sum(X_true ** 2))
    return math.inf if err == 0 else 10.0 * math.log10(sig / err)


def _truth_matrix(truth):
    if truth is None:
        return None
    return np.asarray(getattr(truth, "X_true", truth), dtype=float)


def _record(trace, it, t0, objective, problem, X, X_true):
    R = problem.Y - problem.G @ X
    n_active = int(np.count_nonzero(np.any(X != 0, axis=1)))
    trace.append(IterTrace(it, time.perf_counter() - t0, objective, float(np.vdot(R, R)),
                           n_active, _recon_snr(X_true, X)))


def _stalled(f_prev: float, f: float, tol: float) -> bool:
    # tol == 0 disables the test: F is flat near a fixed point, so stopping on
    # F alone leaves the variances accurate to only about sqrt(eps)
    if tol == 0:
        return False
    diff = abs(f_prev - f)
    return diff == 0 or diff <= tol * max(abs(f_prev), abs(f))


def _initial_gamma(problem: ProblemInstance, config: SolverConfig, gamma0) -> np.ndarray:
    if gamma0 is not None:
        return check_gamma(gamma0, problem.N).copy()
    return np.full(problem.N, float(config.gamma_init))


def champagne_solve(problem: ProblemInstance, config: SolverConfig = SolverConfig("champagne"),
                    truth=None, gamma0=None) -> SolverResult:
    """CHAMPAGNE: alternate the dual-weight, posterior-mean and variance updates.

    Each iteration records ``F(X_i, v_i)`` where ``X_i`` is the posterior mean
    and ``v_i`` the dual weights, both at the previous variances.
    """
    X_true = _truth_matrix(truth)
    t0 = time.perf_counter()
    gamma = _initial_gamma(problem, config, gamma0)
    trace: list[IterTrace] = []
    converged = False
    f_prev = None
    x = SourceEstimate.zeros(problem.N, problem.T)
    v = None
    it = 0
    for it in range(1, config.max_outer + 1):
        factor = assemble_covariance(problem, gamma)
        v = compute_dual_weights(problem, factor)
        x = posterior_mean(problem, gamma, factor)
        wstar = float(np.dot(v, gamma)) - factor.logdet
        f = eval_F(x, v, wstar, problem)
        if not np.isfinite(f):
            raise FloatingPointError(f"non-finite objective at CHAMPAGNE iteration {it}: {f}")
        gamma = prune_gamma(gamma_from_x(x, v, problem.rho, problem.T), config.prune_rel)
        _record(trace, it, t0, f, problem, x.X, X_true)
        if f_prev is not None and _stalled(f_prev, f, config.outer_tol):
            converged = True
            break
        f_prev = f
    return SolverResult(x, gamma, trace, converged, it, v)


def reweighted_solve(problem: ProblemInstance, config: SolverConfig = SolverConfig("reweighted"),
                     truth=None, gamma0=None) -> SolverResult:
    """SBL as reweighted l21 sparse coding.

    Per outer iteration: dual weights ``v`` from the current variances,
    ``inner_k`` proximal-gradient steps on::

        1/(2 noise_var) ||Y - G X||^2 + sqrt(T) sum_n sqrt(rho + v_n) ||X[n]||

    warm-started from the previous estimate, then the closed-form variance
    update. The traced objective ``F(X_i, v_i)`` is non-increasing.
    """
    X_true = _truth_matrix(truth)
    t0 = time.perf_counter()
    gamma = _initial_gamma(problem, config, gamma0)
    scale = 1.0 / problem.noise_var
    lip = lipschitz_estimate(problem.G, scale)
    sqrt_t = math.sqrt(problem.T)
    trace: list[IterTrace] = []
    converged = False
    f_prev = None
    x = None
    v = None
    it = 0
    for it in range(1, config.max_outer + 1):
        factor = assemble_covariance(problem, gamma)
        v = compute_dual_weights(problem, factor)
        if x is None:
            x = posterior_mean(problem, gamma, factor)
        inner = InnerProblem(problem.G, problem.Y, sqrt_t * np.sqrt(problem.rho + v),
                             scale, lip)
        x = weighted_l21_run(inner, x, config.inner_k, config.inner_tol,
                             config.accelerated).estimate
        wstar = float(np.dot(v, gamma)) - factor.logdet
        f = eval_F(x, v, wstar, problem)
        if not np.isfinite(f):
            raise FloatingPointError(f"non-finite objective at reweighted iteration {it}: {f}")
        gamma = prune_gamma(gamma_from_x(x, v, problem.rho, problem.T), config.prune_rel)
        _record(trace, it, t0, f, problem, x.X, X_true)
        if f_prev is not None and _stalled(f_prev, f, config.outer_tol):
            converged = True
            break
        f_prev = f
    return SolverResult(x, gamma, trace, converged, it, v)


def low_snr_weights(problem: ProblemInstance, sigma0_sq: float) -> np.ndarray:
    """Fixed row weights ``sigma0^2 sqrt(T) sqrt(||G[:, n]||^2 + rho)``."""
    return sigma0_sq * math.sqrt(problem.T) * np.sqrt(problem.col_sq_norms + problem.rho)


def low_snr_solve(problem: ProblemInstance, config: SolverConfig = SolverConfig("low_snr"),
                  truth=None, weights=None) -> SolverResult:
    """Low-SNR approximation: a single weighted group lasso::

        1/2 ||Y - G X||^2 + sum_n lam_n ||X[n]||,   lam from :func:`low_snr_weights`

    run for at most ``max_outer * inner_k`` iterations from zero. A trace
    entry is written every ``inner_k`` iterations. ``weights`` overrides the
    default row weights.
    """
    X_true = _truth_matrix(truth)
    t0 = time.perf_counter()
    sigma0_sq = problem.noise_var if config.sigma0_sq is None else config.sigma0_sq
    lam = low_snr_weights(problem, sigma0_sq) if weights is None else np.asarray(weights, float)
    inner = InnerProblem(problem.G, problem.Y, lam, 1.0)
    trace: list[IterTrace] = []

    def on_block(k, X):
        R = problem.Y - problem.G @ X
        fit = float(np.vdot(R, R))
        obj = 0.5 * fit + float(np.dot(lam, np.linalg.norm(X, axis=1)))
        trace.append(IterTrace(len(trace) + 1, time.perf_counter() - t0, obj, fit,
                               int(np.count_nonzero(np.any(X != 0, axis=1))),
                               _recon_snr(X_true, X)))

    res = weighted_l21_run(inner, None, config.max_outer * config.inner_k, config.inner_tol,
                           config.accelerated, callback=on_block, callback_every=config.inner_k)
    x = res.estimate
    # minimiser over gamma of the low-SNR cost at fixed X
    gamma = x.row_norms / np.sqrt(problem.T * (problem.col_sq_norms + problem.rho))
    return SolverResult(x, gamma, trace, res.converged, len(trace), None)


def solve(problem: ProblemInstance, config: SolverConfig, truth=None) -> SolverResult:
    """Dispatch on ``config.variant``."""
    if config.variant == "champagne":
        return champagne_solve(problem, config, truth)
    if config.variant == "reweighted":
        return reweighted_solve(problem, config, truth)
    return low_snr_solve(problem, config, truth)
