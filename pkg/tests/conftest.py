import numpy as np
import pytest

from scenediff.scenes import GridSpec, VoxelScene


def unit_grid(dims, resolution=1.0):
    """Grid with min corner at the origin and one metric unit per voxel."""
    return GridSpec((0.0, 0.0, 0.0), tuple(d * resolution for d in dims), resolution)


def random_scene(rng, dims, class_count=4, density=0.2):
    """Uniform random occupancy at the given density with random labels."""
    grid = unit_grid(dims)
    occ = rng.random(dims) < density
    coords = np.argwhere(occ)
    labels = rng.integers(1, class_count + 1, size=coords.shape[0])
    return VoxelScene(grid, coords, labels, class_count)


@pytest.fixture
def rng():
    return np.random.default_rng(20240817)
