import numpy as np
import pytest
from hypothesis import settings

from shrinkflow.flow import sphere_trajectory
from shrinkflow.mesh import icosphere

settings.register_profile("shrinkflow", deadline=None, max_examples=25)
settings.load_profile("shrinkflow")

T_C = 0.25  # unit sphere, n = 2


@pytest.fixture(scope="session")
def sphere3():
    return icosphere(3)


@pytest.fixture(scope="session")
def sphere4():
    return icosphere(4)


@pytest.fixture(scope="session")
def sphere_traj():
    """Exact shrinking of the unit icosphere (subdiv 3), sampled densely up to T_c."""
    return sphere_trajectory(icosphere(3), np.linspace(0.0, 0.999 * T_C, 400))


ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture
def report_criterion():
    def record(number: int, passed: bool, text: str) -> bool:
        ACCEPTANCE_LINES[number] = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {text}"
        print(ACCEPTANCE_LINES[number])
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
