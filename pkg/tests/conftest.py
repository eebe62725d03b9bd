import numpy as np
import pytest

from sblcode.model import ProblemInstance

# criterion id -> (passed, detail); filled by test_acceptance.py
ACCEPTANCE_RESULTS = {}


def random_problem(seed, M=4, N=6, T=2, noise_var=0.3, rho=0.0, k=None):
    rng = np.random.default_rng(seed)
    G = rng.standard_normal((M, N))
    X = np.zeros((N, T))
    k = k if k is not None else max(1, N // 3)
    X[rng.choice(N, k, replace=False)] = rng.standard_normal((k, T))
    Y = G @ X + np.sqrt(noise_var) * rng.standard_normal((M, T))
    return ProblemInstance(G, Y, noise_var, rho)


@pytest.fixture
def small_problem():
    return random_problem(0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for cid in sorted(ACCEPTANCE_RESULTS):
        ok, detail = ACCEPTANCE_RESULTS[cid]
        terminalreporter.write_line(f"criterion {cid}: {'PASS' if ok else 'FAIL'}  {detail}")
