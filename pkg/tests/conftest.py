import warnings

import numpy as np
import pytest

warnings.filterwarnings("ignore", message="The TBB threading layer")

from coevo.core import Domain, RngSpec  # noqa: E402


@pytest.fixture
def torus():
    return Domain("torus", 1)


@pytest.fixture
def line():
    return Domain("euclidean", 1)


@pytest.fixture
def rng():
    return RngSpec(12345)


def random_kernel(seed, n, low=-1.0, high=1.0):
    return np.random.default_rng(seed).uniform(low, high, (n, n))


ACCEPTANCE_LINES = []


@pytest.fixture(scope="session")
def acceptance_report():
    """Record and print one pass/fail line per acceptance criterion."""

    def report(number, ok, detail):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        print(line)
        ACCEPTANCE_LINES.append(line)
        return ok

    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
