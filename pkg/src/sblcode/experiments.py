"""Synthetic benchmark problems, evaluation metrics and trial aggregation."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .model import ProblemInstance, SourceEstimate

__all__ = [
    "GENERATORS",
    "TrialSpec",
    "GroundTruth",
    "MedianSummary",
    "gen_compressed_sensing",
    "gen_meg_like",
    "generate",
    "meg_leadfield",
    "normalize_columns",
    "sensor_snr_db",
    "recon_snr_db",
    "support_metrics",
    "aggregate_median",
    "time_to_convergence",
]

GENERATORS = ("gaussian_cs", "meg_like")

# noise power relative to signal power used when no noise is added
NOISELESS_VAR_FLOOR = 1e-12


@dataclass(frozen=True)
class TrialSpec:
    M: int
    N: int
    T: int
    active_fraction: float
    target_snr_db: float
    generator: str = "gaussian_cs"
    seed: int = 0
    rho: float = 0.0

    def __post_init__(self):
        if min(self.M, self.N, self.T) < 1:
            raise ValueError("M, N and T must be >= 1")
        if not 0 < self.active_fraction < 1:
            raise ValueError("active_fraction must lie in (0, 1)")
        if self.n_active < 1:
            raise ValueError(
                f"active_fraction * N = {self.active_fraction * self.N:g} rounds to no active source")
        if self.generator not in GENERATORS:
            raise ValueError(f"unknown generator {self.generator!r}; expected one of {GENERATORS}")

    @property
    def n_active(self) -> int:
        return int(round(self.active_fraction * self.N))


@dataclass(frozen=True, eq=False)
class GroundTruth:
    X_true: np.ndarray
    support: frozenset
    sensor_snr_db: float
    noise: Optional[np.ndarray] = None
    metadata: dict = field(default_factory=dict)


@dataclass
class MedianSummary:
    grid: np.ndarray
    median: np.ndarray
    terminal: np.ndarray


def normalize_columns(G: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(G, axis=0)
    if np.any(norms == 0):
        raise ValueError("cannot normalise a zero column")
    return G / norms


def sensor_snr_db(G: np.ndarray, X_true: np.ndarray, noise: np.ndarray) -> float:
    """``10 log10(||G X||^2 / ||noise||^2)``; ``inf`` for zero noise."""
    signal = float(np.sum((G @ X_true) ** 2))
    power = float(np.sum(np.asarray(noise) ** 2))
    if power == 0:
        return math.inf
    return 10.0 * math.log10(signal / power)


def recon_snr_db(X_true: np.ndarray, X_est: np.ndarray) -> float:
    """``10 log10(||X_true||^2 / ||X_est - X_true||^2)``; ``inf`` on exact recovery."""
    X_true = np.asarray(X_true, dtype=float)
    X_est = np.asarray(X_est, dtype=float)
    if X_true.shape != X_est.shape:
        raise ValueError(f"shape mismatch: {X_true.shape} vs {X_est.shape}")
    sig = float(np.sum(X_true ** 2))
    if sig == 0:
        raise ValueError("reconstruction SNR undefined for a zero ground truth")
    err = float(np.sum((X_est - X_true) ** 2))
    return math.inf if err == 0 else 10.0 * math.log10(sig / err)


def support_metrics(truth: GroundTruth, estimate: SourceEstimate) -> tuple[float, float, float]:
    """Precision, recall and F1 of the recovered active set.

    Precision is ``nan`` when the estimate is empty.
    """
    true = set(truth.support)
    if not true:
        raise ValueError("support metrics undefined for an empty true support")
    found = set(int(i) for i in estimate.active_set)
    hits = len(true & found)
    recall = hits / len(true)
    precision = hits / len(found) if found else math.nan
    if hits == 0:
        return precision, recall, 0.0
    return precision, recall, 2 * precision * recall / (precision + recall)


def _add_noise(rng, G, X_true, target_snr_db, rho):
    signal = G @ X_true
    M, T = signal.shape
    power = float(np.sum(signal ** 2))
    if math.isinf(target_snr_db) and target_snr_db > 0:
        noise = np.zeros_like(signal)
        noise_var = NOISELESS_VAR_FLOOR * max(power, 1.0) / (M * T)
    else:
        noise = rng.standard_normal(signal.shape)
        # rescale so that the realised SNR hits the target exactly
        noise_var = power / (M * T * 10.0 ** (target_snr_db / 10.0))
        noise *= math.sqrt(noise_var * M * T / float(np.sum(noise ** 2)))
    problem = ProblemInstance(G, signal + noise, noise_var, rho)
    return problem, noise


def _support(X):
    return frozenset(int(i) for i in np.flatnonzero(np.any(X != 0, axis=1)))


def gen_compressed_sensing(spec: TrialSpec) -> tuple[ProblemInstance, GroundTruth]:
    """Column-normalised Gaussian design with Gaussian active rows."""
    if spec.generator != "gaussian_cs":
        raise ValueError("spec.generator must be 'gaussian_cs'")
    rng = np.random.default_rng(spec.seed)
    G = normalize_columns(rng.standard_normal((spec.M, spec.N)))
    X = np.zeros((spec.N, spec.T))
    support = np.sort(rng.choice(spec.N, spec.n_active, replace=False))
    X[support] = rng.standard_normal((support.size, spec.T))
    problem, noise = _add_noise(rng, G, X, spec.target_snr_db, spec.rho)
    truth = GroundTruth(X, _support(X), sensor_snr_db(G, X, noise), noise,
                        {"support": support.tolist()})
    return problem, truth


def meg_leadfield(M: int, N: int, coherence: float, seed: int, smoothing: float = 2.0) -> np.ndarray:
    """Surrogate leadfield ``normalize(A @ B)``.

    ``A`` is an M x M Gaussian-kernel mixer over a ring of sensors of width
    ``smoothing``; ``B`` has standard normal rows whose neighbouring
    columns follow an AR(1) recursion with coefficient ``coherence``.
    """
    if not 0 <= coherence < 1:
        raise ValueError("coherence must lie in [0, 1)")
    rng = np.random.default_rng(seed)
    idx = np.arange(M)
    d = np.abs(idx[:, None] - idx[None, :])
    d = np.minimum(d, M - d)
    A = np.exp(-0.5 * (d / smoothing) ** 2) if smoothing > 0 else np.eye(M)
    Z = rng.standard_normal((M, N))
    B = np.empty_like(Z)
    B[:, 0] = Z[:, 0]
    innov = math.sqrt(1.0 - coherence ** 2)
    for j in range(1, N):
        B[:, j] = coherence * B[:, j - 1] + innov * Z[:, j]
    return normalize_columns(A @ B)


def gen_meg_like(spec: TrialSpec, coherence: float = 0.9, *, leadfield: Optional[np.ndarray] = None,
                 leadfield_seed: Optional[int] = None,
                 amplitude_range: tuple[float, float] = (0.5, 1.5),
                 frequency_range: tuple[float, float] = (1.0, 5.0),
                 phase_range: tuple[float, float] = (0.0, 2 * math.pi)) -> tuple[ProblemInstance, GroundTruth]:
    """MEG-like problem: correlated leadfield and sinusoidal active sources.

    Active rows are ``a sin(2 pi f t / T + phi)`` for ``t = 0..T-1`` with
    ``a``, ``f`` (cycles per window) and ``phi`` drawn uniformly from the
    given ranges. ``leadfield`` replaces the surrogate (it is
    column-normalised); ``leadfield_seed`` draws the surrogate from its own
    stream so it can be shared across trials.
    """
    if spec.generator != "meg_like":
        raise ValueError("spec.generator must be 'meg_like'")
    if leadfield is not None:
        G = normalize_columns(np.asarray(leadfield, dtype=float))
        if G.shape != (spec.M, spec.N):
            raise ValueError(f"leadfield has shape {G.shape}, spec expects {(spec.M, spec.N)}")
    else:
        G = meg_leadfield(spec.M, spec.N, coherence,
                          spec.seed if leadfield_seed is None else leadfield_seed)
    rng = np.random.default_rng([spec.seed, 1])
    support = np.sort(rng.choice(spec.N, spec.n_active, replace=False))
    k = support.size
    amp = rng.uniform(*amplitude_range, size=k) if amplitude_range[0] < amplitude_range[1] \
        else np.full(k, float(amplitude_range[0]))
    freq = rng.uniform(*frequency_range, size=k) if frequency_range[0] < frequency_range[1] \
        else np.full(k, float(frequency_range[0]))
    phase = rng.uniform(*phase_range, size=k) if phase_range[0] < phase_range[1] \
        else np.full(k, float(phase_range[0]))
    t = np.arange(spec.T)
    X = np.zeros((spec.N, spec.T))
    X[support] = amp[:, None] * np.sin(2 * math.pi * freq[:, None] * t[None, :] / spec.T
                                       + phase[:, None])
    problem, noise = _add_noise(rng, G, X, spec.target_snr_db, spec.rho)
    meta = {"support": support.tolist(), "amplitude": amp.tolist(), "frequency": freq.tolist(),
            "phase": phase.tolist(), "coherence": coherence}
    return problem, GroundTruth(X, _support(X), sensor_snr_db(G, X, noise), noise, meta)


def generate(spec: TrialSpec, coherence: float = 0.9, leadfield=None, leadfield_seed=None):
    if spec.generator == "gaussian_cs":
        return gen_compressed_sensing(spec)
    return gen_meg_like(spec, coherence, leadfield=leadfield, leadfield_seed=leadfield_seed)


def _step_values(times: np.ndarray, values: np.ndarray, grid: np.ndarray) -> np.ndarray:
    idx = np.searchsorted(times, grid, side="right") - 1
    out = np.full(grid.shape, np.nan)
    ok = idx >= 0
    out[ok] = values[idx[ok]]
    return out


def aggregate_median(traces: Sequence[tuple[Sequence[float], Sequence[float]]],
                     grid: Sequence[float]) -> MedianSummary:
    """Pointwise median of step-interpolated ``(times, values)`` series.

    Each series carries its last value forward; grid points before a
    series' first sample are ignored for that series (``nan`` if no series
    has started).
    """
    grid = np.asarray(grid, dtype=float)
    if grid.size == 0:
        raise ValueError("empty time grid")
    if len(traces) == 0:
        raise ValueError("need at least one trace")
    rows = []
    terminal = []
    for times, values in traces:
        times = np.asarray(times, dtype=float)
        values = np.asarray(values, dtype=float)
        rows.append(_step_values(times, values, grid))
        terminal.append(values[-1] if values.size else np.nan)
    stack = np.vstack(rows)
    med = np.full(grid.shape, np.nan)
    started = ~np.all(np.isnan(stack), axis=0)
    med[started] = np.nanmedian(stack[:, started], axis=0)
    return MedianSummary(grid, med, np.asarray(terminal))


def time_to_convergence(times: Sequence[float], objectives: Sequence[float],
                        rel_tol: float = 1e-4) -> float:
    """First time at which the objective is within ``rel_tol`` (relative) of its final value."""
    times = np.asarray(times, dtype=float)
    obj = np.asarray(objectives, dtype=float)
    if obj.size == 0:
        return math.nan
    final = obj[-1]
    close = np.abs(obj - final) <= rel_tol * max(abs(final), np.finfo(float).tiny)
    return float(times[np.argmax(close)])
