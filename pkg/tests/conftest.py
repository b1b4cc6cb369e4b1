import numpy as np
import pytest

from robopoll.core import ScenarioConfig


@pytest.fixture
def s1() -> ScenarioConfig:
    return ScenarioConfig(1, 3, (0.10, 0.25, 0.45), name="s1")


@pytest.fixture
def small2() -> ScenarioConfig:
    return ScenarioConfig(2, 4, (0.15, 0.25, 0.50, 0.60), name="small2", horizon=200)


@pytest.fixture
def rng() -> np.random.Generator:
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    from acceptance_log import RESULTS

    if not RESULTS:
        return
    terminalreporter.section("acceptance criteria")
    for n, ok, detail in sorted(RESULTS, key=lambda r: r[0]):
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
