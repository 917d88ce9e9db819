import math

import numpy as np
import pytest
from hypothesis import settings

from dden.grid import TimeGrid, gaussian_ensemble
from dden.models import (CoxParams, HjmMultiplicativeParams, build_constant_hazard, simulate_cox,
                         simulate_hjm_multiplicative)

settings.register_profile("dden", max_examples=40, deadline=None)
settings.load_profile("dden")


def pytest_configure(config):
    config.dden_acceptance_lines = []


@pytest.fixture(scope="session")
def acceptance_log(pytestconfig):
    return pytestconfig.dden_acceptance_lines


@pytest.fixture(scope="module")
def grid():
    return TimeGrid(10.0, 100)


@pytest.fixture(scope="module")
def hjm(grid):
    ens = gaussian_ensemble(grid, 3000, 1, 11)
    return simulate_hjm_multiplicative(HjmMultiplicativeParams.flat(grid, 0.2, -0.1), ens,
                                       record_every=25)


@pytest.fixture(scope="module")
def cox(grid):
    ens = gaussian_ensemble(grid, 2000, 1, 12)
    params = CoxParams(math.log(0.2), 1.0, math.log(0.2), 0.3, m=8)
    return simulate_cox(params, ens, record_every=25)


@pytest.fixture(scope="module")
def const(grid):
    return build_constant_hazard(0.2, grid, 2000, seed=13, record_every=5)


@pytest.fixture
def rng():
    return np.random.default_rng(2024)


def pytest_terminal_summary(terminalreporter, config):
    lines = getattr(config, "dden_acceptance_lines", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
