import math

import numpy as np
import pytest

from conftest import random_problem
from sblcode.experiments import TrialSpec, gen_compressed_sensing, normalize_columns
from sblcode.model import (
    ProblemInstance,
    assemble_covariance,
    compute_dual_weights,
    eval_F,
    eval_joint_cost,
    eval_type2,
    eval_wstar_at_iterate,
    gamma_from_x,
    posterior_mean,
    prune_gamma,
)
from sblcode.prox import InnerProblem, lipschitz_estimate, weighted_l21_run, weighted_l21_solve
from sblcode.solvers import (
    SolverConfig,
    champagne_solve,
    low_snr_solve,
    low_snr_weights,
    reweighted_solve,
    solve,
)

TIGHT_CHAMP = SolverConfig("champagne", max_outer=100_000, outer_tol=1e-15)
TIGHT_RW = SolverConfig("reweighted", max_outer=100_000, outer_tol=1e-15, inner_k=100,
                        inner_tol=1e-14)


def tiny_instance(seed, rho=0.0, snr_db=10.0):
    return gen_compressed_sensing(TrialSpec(4, 8, 2, 0.25, snr_db, seed=seed, rho=rho))


def champagne_polished(p, extra=3000):
    """CHAMPAGNE to a tight F tolerance, then extra single steps.

    Vanishing variances decay geometrically but stop moving F in floating
    point long before they drop under the pruning floor.
    """
    g = champagne_solve(p, TIGHT_CHAMP).gamma
    return champagne_solve(p, SolverConfig("champagne", max_outer=extra, outer_tol=0.0),
                           gamma0=g).gamma


def assert_monotone(result, rtol=1e-9):
    F = result.objectives
    assert np.all(F[1:] <= F[:-1] + rtol * np.abs(F[:-1])), np.max(np.diff(F))


def test_config_validation():
    with pytest.raises(ValueError):
        SolverConfig("em")
    with pytest.raises(ValueError):
        SolverConfig(max_outer=0)
    with pytest.raises(ValueError):
        SolverConfig(inner_tol=0)
    with pytest.raises(ValueError):
        SolverConfig(outer_tol=-1e-3)
    with pytest.raises(ValueError):
        SolverConfig(sigma0_sq=-1.0)


def test_zero_outer_tol_runs_all_iterations(small_problem):
    for variant in ("champagne", "reweighted"):
        r = solve(small_problem, SolverConfig(variant, max_outer=7, outer_tol=0.0))
        assert r.outer_iterations == 7 and not r.converged


class TestChampagne:
    def test_zero_data(self, small_problem):
        p = ProblemInstance(small_problem.G, np.zeros((4, 2)), 0.3)
        r = champagne_solve(p, SolverConfig("champagne", max_outer=5))
        assert np.all(r.gamma == 0)
        assert np.all(r.estimate.X == 0)
        assert r.trace[-1].n_active == 0

    def test_scalar_fixed_point(self):
        # gamma = 2 gamma / sqrt(1 + gamma) has the positive fixed point gamma = 3
        p = ProblemInstance(np.ones((1, 1)), np.array([[2.0]]), 1.0)
        r = champagne_solve(p, SolverConfig("champagne", max_outer=200, outer_tol=0.0))
        g = r.gamma
        f = assemble_covariance(p, g)
        v = compute_dual_weights(p, f)
        x = posterior_mean(p, g, f)
        residual = abs(gamma_from_x(x, v, 0.0, 1)[0] - g[0])
        assert residual < 1e-8
        assert g[0] == pytest.approx(3.0, abs=1e-7)

    def test_estimates_not_exactly_sparse(self):
        p, _ = gen_compressed_sensing(TrialSpec(30, 100, 1, 0.1, 25.0, seed=1))
        r = champagne_solve(p, SolverConfig("champagne", max_outer=50))
        assert r.estimate.n_active > 10

    def test_monotone(self):
        for seed in range(10):
            p, _ = tiny_instance(seed, rho=0.1 * (seed % 2))
            assert_monotone(champagne_solve(p, SolverConfig("champagne", max_outer=300)))


class TestReweighted:
    def test_zero_data(self, small_problem):
        p = ProblemInstance(small_problem.G, np.zeros((4, 2)), 0.3)
        r = reweighted_solve(p, SolverConfig("reweighted", max_outer=3))
        assert np.all(r.estimate.X == 0)
        assert r.trace[0].n_active == 0
        assert np.all(r.gamma == 0)

    def test_monotone_and_exact_sparsity(self):
        for seed in range(10):
            p, _ = gen_compressed_sensing(TrialSpec(10, 30, 3, 0.1, 10.0, seed=seed))
            for acc in (False, True):
                r = reweighted_solve(p, SolverConfig("reweighted", max_outer=200, inner_k=5,
                                                     accelerated=acc))
                assert_monotone(r)
                X = r.estimate.X
                nz = np.any(X != 0, axis=1)
                assert r.trace[-1].n_active == nz.sum()
                assert np.all(X[~nz] == 0.0)

    @pytest.mark.parametrize("seed", range(4))
    def test_cost_identity_along_iterations(self, seed):
        # F(X_i, v_i) equals the joint cost at the closed-form gamma_{i+1}
        p, _ = tiny_instance(seed, rho=0.05)
        lip = lipschitz_estimate(p.G, 1 / p.noise_var)
        gamma = np.ones(p.N)
        x = None
        for _ in range(15):
            f = assemble_covariance(p, gamma)
            v = compute_dual_weights(p, f)
            x = posterior_mean(p, gamma, f) if x is None else x
            inner = InnerProblem(p.G, p.Y, math.sqrt(p.T) * np.sqrt(p.rho + v), 1 / p.noise_var, lip)
            x = weighted_l21_solve(inner, x, 20, 1e-12, True)
            w = eval_wstar_at_iterate(v, gamma, p, f)
            gamma = prune_gamma(gamma_from_x(x, v, p.rho, p.T), 1e-12)
            assert eval_F(x, v, w, p) == pytest.approx(eval_joint_cost(x, gamma, v, w, p), abs=1e-8)

    @pytest.mark.parametrize("seed", range(5))
    def test_stationary_at_termination(self, seed):
        p, _ = tiny_instance(seed, rho=0.1)
        r = reweighted_solve(p, TIGHT_RW)
        assert r.converged
        g = r.gamma
        v = compute_dual_weights(p, assemble_covariance(p, g))
        np.testing.assert_allclose(v, r.v, atol=1e-6 * np.abs(r.v).max())
        np.testing.assert_allclose(gamma_from_x(r.estimate, v, p.rho, p.T), g, atol=1e-6)
        lam = math.sqrt(p.T) * np.sqrt(p.rho + r.v)
        grad = (p.G.T @ (p.G @ r.estimate.X - p.Y)) / p.noise_var
        for n in range(p.N):
            xn = np.linalg.norm(r.estimate.X[n])
            if xn == 0:
                assert np.linalg.norm(grad[n]) <= lam[n] + 1e-6
            else:
                np.testing.assert_allclose(grad[n], -lam[n] * r.estimate.X[n] / xn, atol=1e-6)

    @pytest.mark.parametrize("seed", range(6))
    def test_agrees_with_champagne(self, seed):
        p, _ = tiny_instance(seed, rho=0.1 * (seed % 2), snr_db=20.0)
        ga = champagne_polished(p)
        gb = reweighted_solve(p, TIGHT_RW).gamma
        assert eval_type2(p, ga) == pytest.approx(eval_type2(p, gb), abs=1e-6)
        floor = 1e-12 * max(ga.max(), gb.max())
        mask = np.maximum(ga, gb) > floor
        np.testing.assert_allclose(ga[mask], gb[mask], rtol=1e-3)

    def test_gamma_init_override(self, small_problem):
        g0 = np.zeros(6)
        g0[0] = 1.0
        r = reweighted_solve(small_problem, SolverConfig(max_outer=2), gamma0=g0)
        assert r.outer_iterations == 2


class TestLowSnr:
    def test_unit_columns_match_uniform_weights(self):
        rng = np.random.default_rng(5)
        # entries +-1/4 with 16 rows: every column has norm exactly 1
        G = rng.choice([-0.25, 0.25], size=(16, 40))
        X = np.zeros((40, 3))
        X[[2, 7, 30]] = rng.standard_normal((3, 3))
        p = ProblemInstance(G, G @ X + 0.05 * rng.standard_normal((16, 3)), 0.01)
        cfg = SolverConfig("low_snr", sigma0_sq=0.05, max_outer=40, inner_k=10)
        r = low_snr_solve(p, cfg)
        lam = np.full(40, 0.05 * math.sqrt(3))
        ref = weighted_l21_solve(InnerProblem(G, p.Y, lam, 1.0), None, 400, cfg.inner_tol, True)
        assert np.array_equal(r.estimate.X, ref.X)

    def test_generated_columns_match_uniform_weights(self):
        p, _ = gen_compressed_sensing(TrialSpec(30, 80, 2, 0.1, 15.0, seed=3))
        cfg = SolverConfig("low_snr", sigma0_sq=0.02, max_outer=50, inner_k=10)
        r = low_snr_solve(p, cfg)
        ref = weighted_l21_solve(InnerProblem(p.G, p.Y, np.full(80, 0.02 * math.sqrt(2)), 1.0),
                                 None, 500, cfg.inner_tol, True)
        # column norms are 1 only up to rounding, so iterates agree to solver accuracy
        obj = np.sum((p.Y - p.G @ ref.X) ** 2) / 2 + 0.02 * math.sqrt(2) * ref.row_norms.sum()
        assert r.objectives[-1] == pytest.approx(obj, rel=1e-10)
        np.testing.assert_allclose(r.estimate.X, ref.X, atol=1e-6 * np.abs(ref.X).max())

    def test_full_shrinkage(self, small_problem):
        G = normalize_columns(small_problem.G)
        p = ProblemInstance(G, small_problem.Y, 0.3)
        corr = np.linalg.norm(G.T @ p.Y, axis=1)
        sigma0_sq = 1.001 * corr.max() / math.sqrt(p.T)
        r = low_snr_solve(p, SolverConfig("low_snr", sigma0_sq=sigma0_sq))
        assert np.all(r.estimate.X == 0)

    def test_weights_and_trace(self, small_problem):
        w = low_snr_weights(small_problem, 0.5)
        np.testing.assert_allclose(w, 0.5 * math.sqrt(2) * np.linalg.norm(small_problem.G, axis=0))
        r = low_snr_solve(small_problem, SolverConfig("low_snr", max_outer=5, inner_k=3,
                                                      inner_tol=1e-300))
        assert len(r.trace) == 5
        objs = r.objectives
        assert np.all(np.diff(objs) <= 1e-12 * np.abs(objs[:-1]))
        times = [t.wall_seconds for t in r.trace]
        assert times == sorted(times)

    def test_default_sigma0_is_noise_var(self, small_problem):
        a = low_snr_solve(small_problem, SolverConfig("low_snr"))
        b = low_snr_solve(small_problem, SolverConfig("low_snr", sigma0_sq=small_problem.noise_var))
        assert np.array_equal(a.estimate.X, b.estimate.X)


def test_trace_recon_snr_with_truth():
    p, truth = gen_compressed_sensing(TrialSpec(20, 40, 1, 0.1, 20.0, seed=2))
    for variant in ("champagne", "reweighted", "low_snr"):
        r = solve(p, SolverConfig(variant, max_outer=20), truth)
        assert all(t.recon_snr_db is not None for t in r.trace)
        assert all(0 <= t.n_active <= 40 for t in r.trace)
        r = solve(p, SolverConfig(variant, max_outer=20))
        assert all(t.recon_snr_db is None for t in r.trace)
