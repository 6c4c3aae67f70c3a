import numpy as np
import pytest

from spfnet.rng import PrngState


@pytest.fixture
def rng():
    return PrngState(2024, "tests")


def randn(seed, *shape):
    return PrngState(seed, "tests-randn").normal(int(np.prod(shape))).reshape(shape)


# one line per acceptance criterion, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
