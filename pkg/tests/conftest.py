import numpy as np
import pytest

from discrete_diffusion.schedule import build_schedule


@pytest.fixture(scope="session")
def linear_schedule():
    return build_schedule("linear", 1000, 1e-4, 0.02)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# one line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
