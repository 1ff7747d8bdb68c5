import numpy as np
import pytest
from hypothesis import settings

settings.register_profile("mmlite", deadline=None, max_examples=30, derandomize=True)
settings.load_profile("mmlite")

ACCEPTANCE_LINES = []


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
