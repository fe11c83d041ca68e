import numpy as np
import pytest

from pathhedge import Flavor, LocalVolModel
from pathhedge.paths import PathGeneratorSpec, generate_path

ACCEPTANCE_LINES: list[str] = []


def record(criterion: int, title: str, passed: bool, detail: str) -> None:
    ACCEPTANCE_LINES.append(f"[{'PASS' if passed else 'FAIL'}] criterion {criterion:>2} "
                            f"{title}: {detail}")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[2])):
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def bs_model():
    return LocalVolModel.constant([[0.04]], Flavor.POSITIVE)


@pytest.fixture(scope="session")
def bm2_model():
    return LocalVolModel.constant([[1.0, 0.3], [0.3, 0.5]])


@pytest.fixture(scope="session")
def bm2_path(bm2_model):
    return generate_path(PathGeneratorSpec(bm2_model, (0.0, 0.0), 1.0, 12, seed=3))


@pytest.fixture(scope="session")
def gbm_path(bs_model):
    return generate_path(PathGeneratorSpec(bs_model, (100.0,), 1.0, 14, seed=42))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
