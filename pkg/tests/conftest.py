import numpy as np
import pytest

from clecarpet.carpet import rasterize_carpet
from clecarpet.soup import SoupConfig, sample_ensemble

ACCEPTANCE_LINES: list = []


def record(criterion: str, passed: bool, detail: str) -> None:
    line = f"[{'PASS' if passed else 'FAIL'}] {criterion}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def small_ensemble():
    return sample_ensemble(SoupConfig(min_duration=5e-5, seed=1))


@pytest.fixture(scope="session")
def small_mask(small_ensemble):
    return rasterize_carpet(small_ensemble, 256)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
