import numpy as np
import pytest

from storage_mri.io import write_fleet_csv, write_trace_csv
from storage_mri.synthetic import summer_peaking_system


def write_small_system(directory, days=14, first_day=190, reserve=0.06, thermal_scale=1.0):
    """Fleet and load CSVs for a two-week summer slice of the synthetic system."""
    system = summer_peaking_system(reserve=reserve)
    load = system.load.values[first_day * 24:(first_day + days) * 24]
    units = [type(u)(u.id, u.capacity * thermal_scale, u.efor) for u in system.units]
    fleet = directory / "fleet.csv"
    load_path = directory / "load.csv"
    write_fleet_csv(fleet, units, system.storage)
    write_trace_csv(load_path, load)
    return fleet, load_path


@pytest.fixture
def small_system(tmp_path):
    return write_small_system(tmp_path)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


ACCEPTANCE_LINES = []


@pytest.fixture
def criterion(request):
    """Recorder for one acceptance line; a test that dies before recording is logged as FAIL."""
    recorded = []

    def record(number, passed, detail):
        line = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
        recorded.append(line)
        ACCEPTANCE_LINES.append(line)
        print(line)
        assert passed, line

    yield record
    if not recorded:
        ACCEPTANCE_LINES.append(f"criterion ??: FAIL  {request.node.name} raised before recording")


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
