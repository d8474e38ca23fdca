import os
import sys
from functools import lru_cache
from pathlib import Path

import pytest
from hypothesis import HealthCheck, settings

sys.path.insert(0, str(Path(__file__).parent))

from notrade.model import scenario  # noqa: E402
from notrade.policy import PolicyField  # noqa: E402
from notrade.solver import SolveOptions, solve  # noqa: E402

settings.register_profile(
    "repo", deadline=None, derandomize=True, max_examples=200,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile(os.environ.get("HYPOTHESIS_PROFILE", "repo"))

ACCEPTANCE_LINES: list[str] = []


@lru_cache(maxsize=None)
def cached_solve(number=1, p=0.3, theta=0.8, grid=None, **overrides):
    params = scenario(number, p=p, theta=theta, **overrides)
    return solve(params, grid, SolveOptions())


@lru_cache(maxsize=None)
def cached_field(number=1, p=0.3, theta=0.8, **overrides):
    return PolicyField(cached_solve(number, p, theta, **overrides))


@pytest.fixture(scope="session")
def sol1():
    return cached_solve(1, 0.3, 0.8)


@pytest.fixture(scope="session")
def sol1_neg():
    return cached_solve(1, -0.3, 0.8)


@pytest.fixture(scope="session")
def field1():
    return cached_field(1, 0.3, 0.8)


@pytest.fixture(scope="session")
def field1_neg():
    return cached_field(1, -0.3, 0.8)


@pytest.fixture
def record():
    """Append one acceptance line; the summary hook prints them all at the end."""
    def _record(name, passed, detail=""):
        status = "PASS" if passed is True else ("SKIP" if passed is None else "FAIL")
        line = f"[{status}] {name}: {detail}"
        ACCEPTANCE_LINES.append(line)
        print(line)
    return _record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for line in ACCEPTANCE_LINES:
        terminalreporter.write_line(line)
