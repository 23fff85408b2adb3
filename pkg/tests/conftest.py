import itertools
import os

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from mflab.grid import Grid, GridField

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.register_profile("thorough", deadline=None, max_examples=300)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "default"))


def symmetric_density(rng, cells, N, concentration=1.0):
    """Random exchangeable probability table on ``cells**N`` states."""
    p = rng.gamma(concentration, size=(cells,) * N)
    acc = np.zeros_like(p)
    for perm in itertools.permutations(range(N)):
        acc += np.transpose(p, perm)
    return acc / acc.sum()


def marginals_of(prob, grid, m_max):
    """Exact marginal densities ``F^1..F^m_max`` of a probability table."""
    N = prob.ndim
    out = []
    for m in range(1, m_max + 1):
        pm = prob.sum(axis=tuple(range(m, N))) if m < N else prob
        out.append(GridField(m, grid, pm / grid.cell_volume ** m))
    return out


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def grid5():
    return Grid.torus(5)


# -- acceptance report --------------------------------------------------------

ACCEPTANCE_LINES: dict[int, str] = {}


def record_criterion(number: int, passed: bool, detail: str, seconds: float, budget: str) -> None:
    ACCEPTANCE_LINES[number] = (f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  "
                                f"{detail}  [{seconds:.1f} s; budget {budget}]")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
