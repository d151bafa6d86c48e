import numpy as np
import pytest

from gridpost.dataio import SynthConfig, synth_generate
from gridpost.dataio.grid import GridSpec


CRITERIA = {}


def pytest_terminal_summary(terminalreporter):
    if CRITERIA:
        terminalreporter.section("acceptance criteria")
        for n in sorted(CRITERIA):
            terminalreporter.write_line(CRITERIA[n])


@pytest.fixture
def criterion():
    """Record one pass/fail line for the terminal summary, then assert it."""

    def record(number, passed, detail):
        line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
        CRITERIA[number] = line
        print(line)
        assert passed, line

    return record


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_grid():
    return GridSpec(lon0=4.0, lat0=45.0, nlat=21, nlon=21)


@pytest.fixture(scope="session")
def small_config(small_grid):
    return SynthConfig(n_stations=6, n_days=300, ens_size=5, grid=small_grid,
                      station_box=(46.0, 54.0, 5.0, 13.0))


@pytest.fixture(scope="session")
def small_dataset(small_config):
    return synth_generate(small_config, seed=3)
