import numpy as np
import pytest

from geoclo.grid_field import GridSpec, build_kle_basis
from geoclo.simulator import ReservoirSpec, default_wells


@pytest.fixture(scope="session")
def desk_grid():
    return GridSpec.desk()


@pytest.fixture(scope="session")
def desk_basis(desk_grid):
    return build_kle_basis(desk_grid)


@pytest.fixture(scope="session")
def desk_spec():
    return ReservoirSpec.desk()


@pytest.fixture(scope="session")
def desk_wells(desk_grid):
    return default_wells(desk_grid)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
