import numpy as np
import pytest

from mwtomo.mesh import Box, build_hybrid
from mwtomo.selftest import desk_mesh


@pytest.fixture(scope="session")
def desk():
    """16^3-cell domain, h = 0.125, centred 10^3-cell FE box."""
    return desk_mesh()


@pytest.fixture(scope="session")
def small():
    """12^3-cell domain, h = 1, centred 6^3-cell FE box, IN = 2^3 cells."""
    return build_hybrid(Box.cube(0.0, 12.0), Box.cube(3.0, 9.0), [1.0] * 3, out_layers=0)


@pytest.fixture(scope="session")
def tiny():
    """Unit cube, h = 0.1, 6^3-cell FE box without OUT layer."""
    return build_hybrid(Box.cube(0.0, 1.0), Box.cube(0.2, 0.8), [0.1] * 3, out_layers=0)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
