import numpy as np
import pytest

from rehashdiff.dataset import ToyDataset
from rehashdiff.vocab import VocabSpec


def tiny_dataset(m: int = 2) -> ToyDataset:
    """{AB: 0.5, BA: 0.5} over d=2."""
    return ToyDataset(VocabSpec(2, m), np.array([[0, 1], [1, 0]]), (None, None), np.array([0.5, 0.5]))


@pytest.fixture
def tiny():
    return tiny_dataset()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# filled by the acceptance tests, echoed after the run
ACCEPTANCE_LINES: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
