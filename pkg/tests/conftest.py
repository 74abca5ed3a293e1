import numpy as np
import pytest

from ntml.model import ArchSpec
from ntml.poisoning import Dataset, gen_synthetic
from ntml.rng import Rng

ACCEPTANCE_LINES: list[str] = []


def record_acceptance(line: str) -> None:
    ACCEPTANCE_LINES.append(line)
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small_arch():
    return ArchSpec(input_channels=1, input_size=8, conv_filters=(4,), hidden_dense=8,
                    num_classes=3)


@pytest.fixture
def small_data(small_arch) -> Dataset:
    return gen_synthetic(3, 20, 1, 8, Rng(5))
