import numpy as np
import pytest

from dualdiff.schedule import make_linear_schedule


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def default_schedule():
    return make_linear_schedule(1000, 1e-4, 0.02)


def random_binary(rng, shape, p=0.5):
    return (rng.random(shape) < p).astype(np.float64)


# -- acceptance reporting ------------------------------------------------------

ACCEPTANCE_RESULTS = {}


@pytest.fixture
def criterion():
    """Record ``(number, passed, detail)`` for the end-of-run acceptance summary."""
    def record(number, passed, detail):
        ACCEPTANCE_RESULTS[number] = (bool(passed), detail)
        return passed
    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for number in sorted(ACCEPTANCE_RESULTS):
        passed, detail = ACCEPTANCE_RESULTS[number]
        terminalreporter.write_line(f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}")
