import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from orbitshift import fields as F
from orbitshift.cycles import find_cycle

settings.register_profile("orbitshift", deadline=None, max_examples=25,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("orbitshift")

X_SEED = np.array([1.0, -0.2978])
_ACCEPTANCE = []


@pytest.fixture
def acceptance_log():
    def log(line):
        _ACCEPTANCE.append(line)
        print(line)
    return log


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def toroidal():
    return F.make_system("model_toroidal")


@pytest.fixture(scope="session")
def mode(toroidal):
    return F.make_perturbation("resonant_mode", base=toroidal)


@pytest.fixture(scope="session")
def x_cycle(toroidal):
    return find_cycle(toroidal, X_SEED, 2)


@pytest.fixture(scope="session")
def axis_cycle(toroidal):
    return find_cycle(toroidal, np.array([1.01, 0.0]), 1)


@pytest.fixture(scope="session")
def standard_map():
    return F.make_system("standard_map", {"K": 1.0})


@pytest.fixture(scope="session")
def map_fixed_point(standard_map):
    return find_cycle(standard_map, np.array([0.1, 0.1]), 1)


@pytest.fixture(scope="session")
def torus3d():
    return F.make_system("model_toroidal_3d")


@pytest.fixture(scope="session")
def mode3d(torus3d):
    return F.make_perturbation("resonant_mode_3d", base=torus3d)


@pytest.fixture(scope="session")
def x_cycle3d(torus3d, x_cycle):
    R, Z = x_cycle.point
    return find_cycle(torus3d, np.array([R, 0.0, Z]), 2)
