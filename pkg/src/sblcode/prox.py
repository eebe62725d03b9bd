"""Weighted l21-regularised least squares by proximal gradient (ISTA / FISTA).

Solves::

    min_X  c/2 ||Y - G X||_F^2 + sum_n lam_n ||X[n, :]||_2

with a fixed step ``1 / L``, ``L`` an upper bound of ``c * ||G||_2^2``.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np

from .model import SourceEstimate

logger = logging.getLogger(__name__)

__all__ = [
    "InnerProblem",
    "InnerResult",
    "block_soft_threshold",
    "group_soft_threshold",
    "lipschitz_estimate",
    "smooth_grad",
    "inner_objective",
    "duality_gap",
    "weighted_l21_solve",
    "weighted_l21_run",
]

LIPSCHITZ_INFLATION = 1.01


@dataclass(frozen=True, eq=False)
class InnerProblem:
    """Data of one weighted l21 problem.

    ``lipschitz`` may be supplied to skip the power iteration when the same
    ``G`` and ``data_scale`` are solved repeatedly.
    """

    G: np.ndarray
    Y: np.ndarray
    weights: np.ndarray
    data_scale: float = 1.0
    lipschitz: Optional[float] = None

    def __post_init__(self):
        Y = np.asarray(self.Y, dtype=float)
        if Y.ndim == 1:
            Y = Y[:, None]
        object.__setattr__(self, "Y", Y)
        w = np.asarray(self.weights, dtype=float)
        if w.shape != (self.G.shape[1],):
            raise ValueError(f"weights must have shape ({self.G.shape[1]},), got {w.shape}")
        if np.any(w < 0) or not np.all(np.isfinite(w)):
            raise ValueError("weights must be finite and nonnegative")
        if not self.data_scale > 0:
            raise ValueError("data_scale must be positive")
        if self.G.shape[0] != Y.shape[0]:
            raise ValueError(f"shape mismatch: G {self.G.shape}, Y {Y.shape}")
        object.__setattr__(self, "weights", w)


@dataclass
class InnerResult:
    estimate: SourceEstimate
    n_iter: int
    objective: float
    gap: float
    converged: bool


def block_soft_threshold(row, threshold: float) -> np.ndarray:
    """Proximal operator of ``threshold * ||.||_2``.

    >>> block_soft_threshold(np.array([3.0, 4.0]), 2.0)
    array([1.8, 2.4])
    """
    row = np.asarray(row, dtype=float)
    if threshold < 0:
        raise ValueError("threshold must be nonnegative")
    if threshold == 0:
        return row.copy()
    norm = np.linalg.norm(row)
    if norm <= threshold:
        return np.zeros_like(row)
    return row * (1.0 - threshold / norm)


def group_soft_threshold(Z: np.ndarray, thresholds: np.ndarray) -> np.ndarray:
    """Row-wise :func:`block_soft_threshold`; thresholded rows are exact zeros."""
    norms = np.linalg.norm(Z, axis=1)
    out = np.zeros_like(Z)
    keep = norms > thresholds
    scale = 1.0 - thresholds[keep] / norms[keep]
    out[keep] = Z[keep] * scale[:, None]
    return out


def lipschitz_estimate(G: np.ndarray, data_scale: float = 1.0, tol: float = 1e-8,
                       max_iter: int = 5000) -> float:
    """``data_scale * sigma_max(G)^2`` by power iteration, inflated by 1%."""
    G = np.asarray(G, dtype=float)
    M, N = G.shape
    rng = np.random.default_rng(0)
    # Iterate on the smaller Gram matrix; both share the top eigenvalue.
    if M <= N:
        apply = lambda u: G @ (G.T @ u)
        u = rng.standard_normal(M)
    else:
        apply = lambda u: G.T @ (G @ u)
        u = rng.standard_normal(N)
    u /= np.linalg.norm(u)
    lam = 0.0
    for _ in range(max_iter):
        w = apply(u)
        lam_new = float(np.dot(u, w))
        nw = np.linalg.norm(w)
        if nw == 0:
            break
        u = w / nw
        if abs(lam_new - lam) <= tol * lam_new:
            lam = lam_new
            break
        lam = lam_new
    if lam <= 0:
        warnings.warn("zero sensing matrix: Lipschitz constant set to machine epsilon",
                      RuntimeWarning, stacklevel=2)
        return data_scale * np.finfo(float).eps
    return data_scale * lam * LIPSCHITZ_INFLATION


def smooth_grad(X: np.ndarray, inner: InnerProblem) -> np.ndarray:
    """Gradient of ``c/2 ||Y - G X||^2``, i.e. ``c G^T (G X - Y)``."""
    return inner.data_scale * (inner.G.T @ (inner.G @ X - inner.Y))


def inner_objective(X: np.ndarray, inner: InnerProblem) -> float:
    R = inner.Y - inner.G @ X
    return 0.5 * inner.data_scale * float(np.vdot(R, R)) + float(
        np.dot(inner.weights, np.linalg.norm(X, axis=1)))


def _gap_from_residual(X, R, GtR, inner: InnerProblem) -> float:
    c = inner.data_scale
    lam = inner.weights
    primal = 0.5 * c * float(np.vdot(R, R)) + float(np.dot(lam, np.linalg.norm(X, axis=1)))
    corr = c * np.linalg.norm(GtR, axis=1)
    pen = lam > 0
    if not np.any(pen):
        warnings.warn("all weights are zero: returning the least-squares optimality residual",
                      RuntimeWarning, stacklevel=3)
        return float(c * np.linalg.norm(GtR))
    if not np.all(pen):
        logger.warning("unpenalised rows present: duality gap is not a certified bound")
    ratio = np.full(lam.shape, np.inf)
    nz = pen & (corr > 0)
    ratio[nz] = lam[nz] / corr[nz]
    s = min(1.0, float(ratio.min()))
    theta = (c * s) * R
    dual = float(np.vdot(theta, inner.Y)) - float(np.vdot(theta, theta)) / (2.0 * c)
    return max(primal - dual, 0.0)


def duality_gap(X: np.ndarray, inner: InnerProblem) -> float:
    """Primal minus dual objective at a rescaled residual.

    The dual candidate is ``c * s * (Y - G X)`` with ``s`` chosen so that
    ``||(G^T theta)[n]|| <= lam_n`` for every penalised row. The returned
    value upper-bounds the suboptimality of ``X``.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    R = inner.Y - inner.G @ X
    return _gap_from_residual(X, R, inner.G.T @ R, inner)


def weighted_l21_run(
    inner: InnerProblem,
    x0: SourceEstimate | np.ndarray | None = None,
    max_iter: int = 20,
    tol: float = 1e-8,
    accelerated: bool = False,
    callback: Optional[Callable[[int, np.ndarray], None]] = None,
    callback_every: int = 1,
) -> InnerResult:
    """Proximal gradient loop; see :func:`weighted_l21_solve`.

    ``callback(k, X)`` is invoked after every ``callback_every`` iterations
    and after the last one.

    With ``accelerated=True`` a step that increases the objective is
    rejected and the momentum restarted, so the objective is monotone for
    both variants.
    """
    if max_iter < 1:
        raise ValueError("max_iter must be >= 1")
    G, Y, c, lam = inner.G, inner.Y, inner.data_scale, inner.weights
    N, T = G.shape[1], Y.shape[1]
    if x0 is None:
        X = np.zeros((N, T))
    else:
        X = np.array(x0.X if isinstance(x0, SourceEstimate) else x0, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        if X.shape != (N, T):
            raise ValueError(f"x0 has shape {X.shape}, expected {(N, T)}")
    L = inner.lipschitz if inner.lipschitz is not None else lipschitz_estimate(G, c)
    step = 1.0 / L
    thresholds = lam * step

    R = Y - G @ X
    GtR = G.T @ R
    obj = 0.5 * c * float(np.vdot(R, R)) + float(np.dot(lam, np.linalg.norm(X, axis=1)))
    gap = np.inf
    converged = False

    # FISTA extrapolated point Z and G^T (Y - G Z)
    Z, GtRz, t_k = X, GtR, 1.0
    k = 0
    for k in range(1, max_iter + 1):
        X_new = group_soft_threshold(Z + (step * c) * GtRz, thresholds)
        if not np.all(np.isfinite(X_new)):
            raise FloatingPointError("non-finite iterate in weighted l21 solve")
        R_new = Y - G @ X_new
        GtR_new = G.T @ R_new
        obj_new = 0.5 * c * float(np.vdot(R_new, R_new)) + float(
            np.dot(lam, np.linalg.norm(X_new, axis=1)))
        if not np.isfinite(obj_new):
            raise FloatingPointError("non-finite objective in weighted l21 solve")

        if accelerated and obj_new > obj and Z is not X:
            Z, GtRz, t_k = X, GtR, 1.0
            if callback is not None and k % callback_every == 0:
                callback(k, X)
            continue

        dx = np.linalg.norm(X_new - X)
        xn = np.linalg.norm(X_new)
        X_old, GtR_old = X, GtR
        X, R, GtR, obj = X_new, R_new, GtR_new, obj_new

        if accelerated:
            t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t_k * t_k))
            beta = (t_k - 1.0) / t_next
            t_k = t_next
            if beta > 0:
                Z = X + beta * (X - X_old)
                # linearity: G^T (Y - G Z) = (1 + beta) G^T R - beta G^T R_old
                GtRz = (1.0 + beta) * GtR - beta * GtR_old
            else:
                Z, GtRz = X, GtR
        else:
            Z, GtRz = X, GtR

        if callback is not None and k % callback_every == 0:
            callback(k, X)

        if dx == 0 or dx <= tol * xn:
            converged = True
            break
        gap = _gap_from_residual(X, R, GtR, inner)
        if gap < tol:
            converged = True
            break

    if callback is not None and k % callback_every != 0:
        callback(k, X)
    if not np.isfinite(gap) or converged:
        gap = _gap_from_residual(X, R, GtR, inner)
    return InnerResult(SourceEstimate(X), k, obj, gap, converged)


def weighted_l21_solve(inner: InnerProblem, x0: SourceEstimate | np.ndarray | None = None,
                       max_iter: int = 20, tol: float = 1e-8,
                       accelerated: bool = False) -> SourceEstimate:
    """Solve the weighted l21 problem by ISTA or FISTA from a warm start.

    Stops after ``max_iter`` iterations, when the relative iterate change
    falls below ``tol``, or when the duality gap falls below ``tol``.
    Rows cut by the thresholding are exact zeros.
    """
    return weighted_l21_run(inner, x0, max_iter, tol, accelerated).estimate
