import numpy as np
import pytest
from hypothesis import settings

from quakecast.gridding import SpatialGrid, build_series
from quakecast.synthetic import MINI_REGION, MINI_T_END, MINI_T_START, load_mini_catalog

settings.register_profile("default", deadline=None, max_examples=60)
settings.load_profile("default")


@pytest.fixture(scope="session")
def mini_events():
    return load_mini_catalog()


@pytest.fixture(scope="session")
def mini_grid():
    r = MINI_REGION
    return SpatialGrid.from_extent(r["lat_min"], r["lat_max"], r["lon_min"], r["lon_max"], 0.1)


@pytest.fixture(scope="session")
def mini_raw(mini_events, mini_grid):
    return build_series(mini_events, mini_grid, MINI_T_START, MINI_T_END)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# acceptance criteria record one verdict line each; printed after the run
ACCEPTANCE: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for k in sorted(ACCEPTANCE):
        terminalreporter.write_line(ACCEPTANCE[k])
