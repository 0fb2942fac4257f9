import numpy as np
import pytest

from voxssm.volume import PhantomSpec, VoxelGrid, make_phantom

SMALL = PhantomSpec(
    dims=(40, 40, 40),
    radii=(16.0, 14.0, 12.0),
    thickness=3.0,
    amplitude=0.02,
    base_level=-0.4,
    face_thickness=2.0,
)


@pytest.fixture(scope="session")
def small_spec():
    return SMALL


@pytest.fixture(scope="session")
def small_phantom():
    return make_phantom(SMALL)


def grid(data, spacing=(1.0, 1.0, 1.0), origin=(0.0, 0.0, 0.0)):
    return VoxelGrid(np.asarray(data), spacing, origin)


def random_binary(rng, shape, p=0.5):
    return grid((rng.random(shape) < p).astype(np.uint8))
