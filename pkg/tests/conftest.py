import numpy as np
import pytest

from sbmexit.geometry import FULL, Disk, build_chain
from sbmexit.grids import make_grid
from sbmexit.pde import solve_dirichlet
from sbmexit.backbone import PairFields


@pytest.fixture(scope="session")
def disk_chain():
    return build_chain(Disk(0.0, 0.0, 1.0), 3, 1.0)


@pytest.fixture(scope="session")
def disk_grid(disk_chain):
    return make_grid(disk_chain)


@pytest.fixture(scope="session")
def g_one(disk_grid):
    """Solution with unit boundary data on the full disk."""
    return solve_dirichlet(disk_grid, FULL, 1.0, name="g")


@pytest.fixture(scope="session")
def pair_one(g_one):
    return PairFields(g=g_one, u=None)


@pytest.fixture(scope="session")
def center():
    return np.array([0.0, 0.0])
