import numpy as np
import pytest

from hmflow.geometry import RoundSphere, SurfaceDomain
from hmflow.fields import random_smooth_map


@pytest.fixture(scope="session")
def torus48():
    return SurfaceDomain.flat_torus(48)


@pytest.fixture(scope="session")
def torus96():
    return SurfaceDomain.flat_torus(96)


@pytest.fixture()
def smooth_map48(torus48):
    return random_smooth_map(torus48, RoundSphere(), seed=7, amplitude=1.0)


def refinement_order(coarse_err, fine_err, factor=2.0):
    """Observed convergence order between two resolutions."""
    return np.log(coarse_err / fine_err) / np.log(factor)
