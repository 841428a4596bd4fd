import numpy as np
import pytest

from hybridcrop import synthgen as sg


def pytest_configure(config):
    config.acceptance_lines = {}


def pytest_terminal_summary(terminalreporter, config):
    lines = config.acceptance_lines
    if not lines:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(lines):
        terminalreporter.write_line(lines[n])


@pytest.fixture(scope="session")
def gdd_small():
    """Three cultivars over three years of synthetic phenology."""
    return sg.build(sg.SynthConfig(model="gdd", n_cultivars=3, years=3, seed=11))


@pytest.fixture(scope="session")
def ferguson_small():
    return sg.build(sg.SynthConfig(model="ferguson", n_cultivars=2, years=2, seed=5))


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
