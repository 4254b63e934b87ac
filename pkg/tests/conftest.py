import numpy as np
import pytest

from shapeopt.geometry import rectangle, regular_polygon
from shapeopt.meshing import triangulate
from shapeopt.pde import SourceSpec, solve_eigen, solve_poisson
from shapeopt.shape_calculus import ShapeState



@pytest.fixture(scope="session")
def square():
    return rectangle(0.0, 0.0, 1.0, 1.0)


@pytest.fixture(scope="session")
def centered_square():
    return rectangle(-0.5, -0.5, 0.5, 0.5)


@pytest.fixture(scope="session")
def disk256():
    return regular_polygon(256)


@pytest.fixture(scope="session")
def disk_mesh(disk256):
    return triangulate(disk256, 0.03)


@pytest.fixture(scope="session")
def disk_poisson(disk_mesh):
    return solve_poisson(disk_mesh, SourceSpec.constant(1.0))


@pytest.fixture(scope="session")
def disk_eigen(disk_mesh):
    return solve_eigen(disk_mesh)


@pytest.fixture(scope="session")
def disk_state(disk256):
    return ShapeState(disk256, 0.03)


@pytest.fixture(scope="session")
def square_state(centered_square):
    return ShapeState(centered_square, 0.03)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    from helpers import ACCEPTANCE

    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[k])
