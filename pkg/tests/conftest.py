import numpy as np
import pytest

from dpadapter.autodiff import init_mlp
from dpadapter.data import make_synthetic_transfer


@pytest.fixture(scope="session")
def small_task():
    return make_synthetic_transfer(0, n_up=400, n_down=80, d_in=8, k=4)


@pytest.fixture
def small_model():
    return init_mlp([8, 16, 4], seed=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_KEY = pytest.StashKey[dict]()


@pytest.fixture
def acceptance(request):
    """Record one PASS/FAIL line per acceptance criterion and assert it."""
    lines = request.config.stash.setdefault(ACCEPTANCE_KEY, {})

    def record(number: int, passed: bool, detail: str):
        lines[number] = f"[{'PASS' if passed else 'FAIL'}] criterion {number:2d}: {detail}"
        assert passed, lines[number]

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE_KEY, {})
    if lines:
        terminalreporter.section("acceptance criteria")
        for n in sorted(lines):
            terminalreporter.write_line(lines[n])
