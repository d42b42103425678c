import numpy as np
import pytest
from hypothesis import settings

from lightplace.grid import GridMap, ObstacleSet, Rect

settings.register_profile("default", max_examples=40, deadline=None)
settings.load_profile("default")

_CRITERIA: dict[int, str] = {}


@pytest.fixture(scope="session")
def criterion():
    """Record one pass/fail line per acceptance criterion; printed in the terminal summary."""

    def report(number: int, name: str, passed: bool, detail: str) -> bool:
        _CRITERIA[number] = f"criterion {number:2d} [{'PASS' if passed else 'FAIL'}] {name}: {detail}"
        print(_CRITERIA[number])
        return passed

    return report


def pytest_terminal_summary(terminalreporter):
    if _CRITERIA:
        terminalreporter.section("acceptance criteria")
        for k in sorted(_CRITERIA):
            terminalreporter.write_line(_CRITERIA[k])


@pytest.fixture
def open_grid():
    return GridMap.build(13, 13, 0.35)


@pytest.fixture
def small_grid():
    return GridMap.build(5, 5, 0.35)


@pytest.fixture
def walled_grid():
    """5x6 grid split by a full-height wall in column 2."""
    wall = Rect(0.7, 0.0, 1.05, 5 * 0.35, reflectivity=0.0)
    return GridMap.build(6, 5, 0.35, ObstacleSet((wall,)))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
