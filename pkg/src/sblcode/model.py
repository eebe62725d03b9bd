"""Sparse Bayesian learning model: covariance, dual weights and objectives.

Notation follows the usual SBL conventions::

    Y = G X + E,   X[:, t] ~ N(0, diag(gamma)),   E[m, t] ~ N(0, noise_var)
    Sigma_y(gamma) = noise_var * I + G diag(gamma) G^T

All objectives use the scaling of the joint CHAMPAGNE cost::

    C(X, gamma, v) = ||Y - G X||^2 / (T noise_var) + (1/T) sum_n ||X[n]||^2 / gamma_n
                     + v^T gamma - w*(v) + rho * sum(gamma)

so that ``min_{X, v} C = type2_objective``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.linalg as sl

__all__ = [
    "ProblemInstance",
    "SourceEstimate",
    "CovFactor",
    "assemble_covariance",
    "compute_dual_weights",
    "posterior_mean",
    "gamma_from_x",
    "prune_gamma",
    "eval_type2",
    "eval_wstar_at_iterate",
    "eval_F",
    "eval_joint_cost",
    "logdet_lowsnr_approx",
    "group_weights",
    "check_gamma",
]


@dataclass(frozen=True, eq=False)
class ProblemInstance:
    """An SBL inverse problem ``Y = G X + noise``.

    Parameters
    ----------
    G : array, shape (M, N)
        Sensing (leadfield) matrix.
    Y : array, shape (M, T)
        Observations. A 1-D vector is promoted to a single column.
    noise_var : float
        Observation noise variance, strictly positive.
    rho : float
        Rate of the exponential prior on the source variances, nonnegative.
    """

    G: np.ndarray
    Y: np.ndarray
    noise_var: float
    rho: float = 0.0

    def __post_init__(self):
        G = np.array(self.G, dtype=float)
        Y = np.array(self.Y, dtype=float)
        if Y.ndim == 1:
            Y = Y[:, None]
        if G.ndim != 2 or Y.ndim != 2:
            raise ValueError("G and Y must be 2-D arrays")
        if G.shape[0] != Y.shape[0]:
            raise ValueError(
                f"G has {G.shape[0]} rows but Y has {Y.shape[0]} (G {G.shape}, Y {Y.shape})"
            )
        if not (np.all(np.isfinite(G)) and np.all(np.isfinite(Y))):
            raise ValueError("G and Y must have finite entries")
        if not (np.isfinite(self.noise_var) and self.noise_var > 0):
            raise ValueError(f"noise_var must be positive, got {self.noise_var}")
        if not (np.isfinite(self.rho) and self.rho >= 0):
            raise ValueError(f"rho must be nonnegative, got {self.rho}")
        G.setflags(write=False)
        Y.setflags(write=False)
        object.__setattr__(self, "G", G)
        object.__setattr__(self, "Y", Y)
        object.__setattr__(self, "noise_var", float(self.noise_var))
        object.__setattr__(self, "rho", float(self.rho))

    @property
    def M(self) -> int:
        return self.G.shape[0]

    @property
    def N(self) -> int:
        return self.G.shape[1]

    @property
    def T(self) -> int:
        return self.Y.shape[1]

    @cached_property
    def col_sq_norms(self) -> np.ndarray:
        return np.einsum("ij,ij->j", self.G, self.G)


@dataclass(frozen=True, eq=False)
class SourceEstimate:
    """Row-sparse source matrix with its active set.

    ``active_set`` holds exactly the rows with nonzero norm; every other row
    is bit-exact zero.
    """

    X: np.ndarray
    active_set: np.ndarray = field(init=False)

    def __post_init__(self):
        X = np.array(self.X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        X.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "active_set", np.flatnonzero(np.any(X != 0, axis=1)))

    @classmethod
    def zeros(cls, N: int, T: int) -> "SourceEstimate":
        return cls(np.zeros((N, T)))

    @property
    def n_active(self) -> int:
        return int(self.active_set.size)

    @property
    def row_norms(self) -> np.ndarray:
        return np.linalg.norm(self.X, axis=1)


def check_gamma(gamma, N: int) -> np.ndarray:
    """Validate a variance vector and return it as a float array."""
    gamma = np.asarray(gamma, dtype=float)
    if gamma.shape != (N,):
        raise ValueError(f"gamma must have shape ({N},), got {gamma.shape}")
    if not np.all(np.isfinite(gamma)):
        raise ValueError("gamma must be finite")
    if np.any(gamma < 0):
        raise ValueError("gamma must be nonnegative")
    return gamma


class CovFactor:
    """Cholesky factor of ``Sigma_y = noise_var * I + G diag(gamma) G^T``."""

    def __init__(self, lower: np.ndarray, noise_var: float):
        self.lower = lower
        self.noise_var = noise_var

    @property
    def M(self) -> int:
        return self.lower.shape[0]

    @cached_property
    def logdet(self) -> float:
        return 2.0 * float(np.sum(np.log(np.diag(self.lower))))

    def whiten(self, B: np.ndarray) -> np.ndarray:
        """Return ``L^{-1} B``."""
        return sl.solve_triangular(self.lower, B, lower=True, check_finite=False)

    def solve(self, B: np.ndarray) -> np.ndarray:
        """Return ``Sigma_y^{-1} B``."""
        return sl.cho_solve((self.lower, True), B, check_finite=False)

    def quad(self, B: np.ndarray) -> float:
        """Return ``trace(B^T Sigma_y^{-1} B)``."""
        W = self.whiten(B)
        return float(np.vdot(W, W))

    def matrix(self) -> np.ndarray:
        return self.lower @ self.lower.T


def assemble_covariance(problem: ProblemInstance, gamma) -> CovFactor:
    gamma = check_gamma(gamma, problem.N)
    active = gamma > 0
    Ga = problem.G[:, active]
    S = (Ga * gamma[active]) @ Ga.T
    S[np.diag_indices_from(S)] += problem.noise_var
    try:
        lower = sl.cholesky(S, lower=True, check_finite=True)
    except (np.linalg.LinAlgError, ValueError) as exc:
        raise FloatingPointError(f"Cholesky factorization of Sigma_y failed: {exc}") from exc
    return CovFactor(lower, problem.noise_var)


def compute_dual_weights(problem: ProblemInstance, factor: CovFactor) -> np.ndarray:
    """Dual weights ``v[n] = G[:, n]^T Sigma_y^{-1} G[:, n]``."""
    W = factor.whiten(problem.G)
    return np.einsum("ij,ij->j", W, W)


def posterior_mean(problem: ProblemInstance, gamma, factor: CovFactor) -> SourceEstimate:
    """Posterior mean ``diag(gamma) G^T Sigma_y^{-1} Y``; zero-variance rows stay exact zeros."""
    gamma = check_gamma(gamma, problem.N)
    active = np.flatnonzero(gamma > 0)
    X = np.zeros((problem.N, problem.T))
    if active.size:
        Z = factor.solve(problem.Y)
        X[active] = gamma[active, None] * (problem.G[:, active].T @ Z)
    return SourceEstimate(X)


def gamma_from_x(x: SourceEstimate, v, rho: float, T: int) -> np.ndarray:
    """Closed-form minimiser over gamma of the joint cost for fixed X and v.

    ``gamma_n = ||X[n, :]|| / sqrt(T (v_n + rho))``, the argmin of
    ``||X[n]||^2 / (T gamma_n) + (v_n + rho) gamma_n``.
    """
    denom = T * (np.asarray(v, dtype=float) + rho)
    if np.any(denom <= 0):
        bad = np.flatnonzero(denom <= 0)
        raise ValueError(f"v_n + rho must be positive; violated at rows {bad[:10].tolist()}")
    return x.row_norms / np.sqrt(denom)


def prune_gamma(gamma: np.ndarray, prune_rel: float) -> np.ndarray:
    """Zero out variances below ``prune_rel * max(gamma)``."""
    gamma = np.array(gamma, dtype=float)
    top = gamma.max(initial=0.0)
    if top > 0 and prune_rel > 0:
        gamma[gamma < prune_rel * top] = 0.0
    return gamma


def group_weights(v, rho: float, T: int) -> np.ndarray:
    """Per-row l21 weights ``sqrt((rho + v_n) / T)`` of the equivalent sparse coding cost."""
    return np.sqrt((np.asarray(v, dtype=float) + rho) / T)


def eval_type2(problem: ProblemInstance, gamma, factor: CovFactor | None = None) -> float:
    """Negative log type-II likelihood in the joint-cost scaling.

    ``(1/T) trace(Y^T Sigma_y^{-1} Y) + log|Sigma_y| + rho * sum(gamma)``
    """
    gamma = check_gamma(gamma, problem.N)
    if factor is None:
        factor = assemble_covariance(problem, gamma)
    return factor.quad(problem.Y) / problem.T + factor.logdet + problem.rho * float(gamma.sum())


def eval_wstar_at_iterate(v, gamma_prev, problem: ProblemInstance,
                          factor: CovFactor | None = None) -> float:
    """Concave conjugate of ``log|Sigma_y|`` at ``v = diag(G^T Sigma_y(gamma_prev)^{-1} G)``.

    Since ``v`` is the gradient of the log-determinant at ``gamma_prev``, the
    conjugate is attained there and no division by ``gamma`` is needed.
    """
    gamma_prev = check_gamma(gamma_prev, problem.N)
    if factor is None:
        factor = assemble_covariance(problem, gamma_prev)
    return float(np.dot(v, gamma_prev)) - factor.logdet


def eval_F(x: SourceEstimate, v, wstar_value: float, problem: ProblemInstance) -> float:
    """Auxiliary objective ``F(X, v)`` monitored by the reweighted solver."""
    R = problem.Y - problem.G @ x.X
    fit = float(np.vdot(R, R)) / (problem.T * problem.noise_var)
    penalty = 2.0 * float(np.dot(group_weights(v, problem.rho, problem.T), x.row_norms))
    return fit + penalty - wstar_value


def eval_joint_cost(x: SourceEstimate, gamma, v, wstar_value: float,
                    problem: ProblemInstance) -> float:
    """Joint cost ``C(X, gamma, v)`` evaluated term by term.

    Rows with ``gamma_n = 0`` contribute ``0`` when ``X[n]`` is zero and
    ``+inf`` otherwise.
    """
    gamma = check_gamma(gamma, problem.N)
    T = problem.T
    R = problem.Y - problem.G @ x.X
    fit = float(np.vdot(R, R)) / (T * problem.noise_var)
    sq = x.row_norms ** 2
    pos = gamma > 0
    if np.any(sq[~pos] > 0):
        return np.inf
    ratio = float(np.sum(sq[pos] / gamma[pos])) / T
    return fit + ratio + float(np.dot(v, gamma)) - wstar_value + problem.rho * float(gamma.sum())


def logdet_lowsnr_approx(problem: ProblemInstance, gamma) -> float:
    """First-order (low-SNR) surrogate of ``log|Sigma_y|``: ``trace(G diag(gamma) G^T)``."""
    gamma = check_gamma(gamma, problem.N)
    return float(np.dot(problem.col_sq_norms, gamma))
