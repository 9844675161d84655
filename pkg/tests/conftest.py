from pathlib import Path

import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from mma.numerics import default_dtype

settings.register_profile("default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")

DATA = Path(__file__).parent / "data"


@pytest.fixture
def f64():
    with default_dtype(np.float64):
        yield


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# -- acceptance summary ----------------------------------------------------------

ACCEPTANCE: list[tuple[str, bool, str]] = []


@pytest.fixture
def criterion():
    """Record one acceptance line: ``criterion(name, passed, detail)``."""

    def record(name: str, passed: bool, detail: str) -> bool:
        ACCEPTANCE.append((name, bool(passed), detail))
        print(f"{'PASS' if passed else 'FAIL'}  {name}: {detail}")
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for name, passed, detail in ACCEPTANCE:
        terminalreporter.write_line(f"{'PASS' if passed else 'FAIL'}  {name}: {detail}")
