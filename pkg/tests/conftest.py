import numpy as np
import pytest

from wittenlab.grid import build_grid
from wittenlab.lattice import build_lattice
from wittenlab.potential import (coordinate_observable, gaussian_potential,
                                 kac_potential, linear_observable)
from wittenlab.witten import SolverConfig


@pytest.fixture(scope="session")
def lat1():
    return build_lattice(1, [1])


@pytest.fixture(scope="session")
def lat2():
    return build_lattice(1, [2])


@pytest.fixture(scope="session")
def lat3():
    return build_lattice(1, [3])


@pytest.fixture(scope="session")
def gauss2(lat2):
    return gaussian_potential(lat2)


@pytest.fixture(scope="session")
def kac2(lat2):
    return kac_potential(lat2, 0.05)


@pytest.fixture(scope="session")
def kac3(lat3):
    return kac_potential(lat3, 0.05)


@pytest.fixture(scope="session")
def grid2_33(lat2):
    return build_grid(lat2, 6.0, 33)


@pytest.fixture(scope="session")
def grid2_65(lat2):
    return build_grid(lat2, 6.0, 65)


@pytest.fixture(scope="session")
def grid3_33(lat3):
    return build_grid(lat3, 6.0, 33)


@pytest.fixture(scope="session")
def x0_2(lat2):
    return coordinate_observable(lat2, 0)


@pytest.fixture(scope="session")
def x1_2(lat2):
    return coordinate_observable(lat2, 1)


@pytest.fixture(scope="session")
def gsum2(lat2):
    return linear_observable(lat2, {(0,): 1.0, (1,): 1.0})


@pytest.fixture(scope="session")
def solver():
    return SolverConfig()


@pytest.fixture(scope="session")
def rng():
    return np.random.default_rng(20240808)
