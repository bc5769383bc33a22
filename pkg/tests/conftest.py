import numpy as np
import pytest

from rfmpc.chain import BenchConfig, chain_problem
from rfmpc.contraction import synthesize


def random_stabilizable(rng, n_x, n_u, scale=1.2):
    """Random (A, B) with B of full column rank and A mildly unstable.

    Stabilizability is confirmed by a direct controllability-rank check so
    the generator never hands an undetectable pair to the DARE.
    """
    while True:
        A = rng.standard_normal((n_x, n_x))
        A *= scale / max(np.max(np.abs(np.linalg.eigvals(A))), 1e-3)
        B = rng.standard_normal((n_x, n_u))
        ctrb = np.hstack([np.linalg.matrix_power(A, k) @ B for k in range(n_x)])
        if np.linalg.matrix_rank(ctrb) == n_x:
            return A, B


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_cfg():
    return BenchConfig(n_carts=2, N=10, x0_scale=1.0)


@pytest.fixture(scope="session")
def small_chain(small_cfg):
    return chain_problem(small_cfg)


@pytest.fixture(scope="session")
def small_chain_x0(small_cfg):
    return small_cfg.x0()


@pytest.fixture(scope="session")
def reduced_cfg():
    return BenchConfig(n_carts=5, N=20, x0_scale=1.5)


@pytest.fixture(scope="session")
def reduced_chain(reduced_cfg):
    return chain_problem(reduced_cfg)


@pytest.fixture(scope="session")
def reduced_design(reduced_chain):
    return synthesize(reduced_chain)


# one summary line per acceptance criterion, printed after the run
ACCEPTANCE_LINES = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[key])


def pytest_configure(config):
    config.addinivalue_line("markers", "acceptance: acceptance criterion check")
    config.addinivalue_line("markers", "slow: long-running full-scale run")
