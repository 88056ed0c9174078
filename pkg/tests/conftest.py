import numpy as np
import pytest

from swolca.core import SurveyDataset
from swolca.simgen import toy_dataset


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


@pytest.fixture(scope="session")
def toy():
    return toy_dataset()


def tiny_dataset(n=8, J=3, R=4, seed=0, weights=None):
    gen = np.random.default_rng(seed)
    items = gen.integers(1, R + 1, size=(n, J))
    y = gen.integers(0, 2, size=n)
    cov = gen.integers(0, 2, size=(n, 1)).astype(float)
    w = np.ones(n) if weights is None else np.asarray(weights, dtype=float)
    stratum = np.repeat([1, 2], [n // 2, n - n // 2])
    cluster = np.arange(1, n + 1)
    return SurveyDataset(items, y, cov, w, stratum, cluster, np.full(J, R), ("v",))


# one line per acceptance criterion, printed after the test session
ACCEPTANCE_LINES = {}


def record_criterion(number, passed, detail):
    ACCEPTANCE_LINES[number] = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    print(ACCEPTANCE_LINES[number])


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[number])
