import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from exo_rl.env import build_tabular

settings.register_profile("default", max_examples=40, deadline=None, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


def two_path_document(p0=0.9, p1=0.2):
    """Level 1 has one state; action 0 reaches state 0 w.p. p0, action 1 w.p. p1.

    Two exogenous states; each (s, xi) emits one of two private observations.
    """
    q1 = [[[[0, 0.5], [1, 0.5]], [[2, 1.0]]]]
    q2 = [
        [[[0, 0.3], [1, 0.7]], [[2, 1.0]]],
        [[[3, 0.6], [4, 0.4]], [[5, 1.0]]],
    ]
    return {
        "H": 2,
        "A": 2,
        "endo_states": [1, 2],
        "mu": [1.0],
        "T": [[[[p0, 1 - p0], [p1, 1 - p1]]]],
        "R": [[[0.0, 0.0]], [[1.0, 0.0], [0.0, 0.5]]],
        "exo": {"states": 2, "mu_xi": [0.4, 0.6], "T_xi": [[0.7, 0.3], [0.2, 0.8]]},
        "emission": {"kind": "table", "q": [q1, q2]},
    }


def chain_document(stochastic=0.0):
    """Two-state deterministic chain over three levels with identity emission."""
    e = stochastic
    return {
        "H": 3,
        "A": 2,
        "endo_states": [1, 2, 2],
        "mu": [1.0],
        "T": [
            [[[1 - e, e], [e, 1 - e]]],
            [[[1 - e, e], [e, 1 - e]], [[e, 1 - e], [1 - e, e]]],
        ],
        "R": [[[0.0, 0.0]], [[0.0, 0.0], [0.0, 0.0]], [[1.0, 0.0], [0.0, 0.3]]],
        "exo": {"states": 1, "mu_xi": [1.0], "T_xi": [[1.0]]},
        "emission": {"kind": "identity"},
    }


@pytest.fixture
def two_path_env():
    return build_tabular(two_path_document())


@pytest.fixture
def chain_env():
    return build_tabular(chain_document())


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: list = []


def record_criterion(number, passed, detail):
    line = f"{'PASS' if passed else 'FAIL'} criterion {number}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
