import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from pooledcs.matrix import construct_balanced

settings.register_profile("default", deadline=None, max_examples=40,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

# (n, m, r, c) combinations the randomised construction handles quickly
SMALL_SHAPES = [(9, 6, 3, 2), (12, 9, 4, 3), (16, 12, 4, 3), (20, 10, 4, 2), (20, 16, 5, 4)]


@pytest.fixture(scope="session")
def matrix_100():
    return construct_balanced(100, 50, 8, 4, seed=0)


@pytest.fixture(scope="session")
def small_matrix():
    return construct_balanced(20, 10, 4, 2, seed=3)


def all_binary(n):
    """Every length-n 0/1 vector, one per row."""
    return ((np.arange(2**n)[:, None] >> np.arange(n)) & 1).astype(np.int8)


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def acceptance(request):
    """Record one PASS/FAIL line for an acceptance criterion, then assert it."""
    lines = request.config.stash.setdefault(_ACCEPTANCE, [])

    def record(number: int, ok: bool, detail: str):
        line = f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}"
        lines.append(line)
        print(line)
        assert ok, line

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
