import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from mtdlnm.core import build_lagged_design

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture
def small_data():
    """Short noisy series with a strong same-day effect above 25."""
    g = np.random.default_rng(5)
    T, L = 260, 4
    x = 22 + 5 * g.standard_normal(T)
    y = 3.0 * (x > 25) + 0.5 * g.standard_normal(T)
    return build_lagged_design(x, y, L=L)


ACCEPTANCE_LINES = {}


@pytest.fixture
def criterion():
    """Record one pass/fail line per acceptance criterion for the terminal summary."""
    def record(number, passed, detail):
        ACCEPTANCE_LINES[number] = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
        print(ACCEPTANCE_LINES[number])
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
