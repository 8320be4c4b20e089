import sys

import numpy as np
import pytest

from idla_lab.potential import exact_potential


@pytest.fixture(scope="session")
def table150():
    return exact_potential(150)


@pytest.fixture(scope="session")
def table400():
    # large enough for poles of example_flow(1) at m = 128
    return exact_potential(400)


@pytest.fixture
def rng():
    return np.random.default_rng(20240601)



def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
