"""Procedural toy scenes for smoke tests, benchmarks and demos.

Layout mimics a street block: ground slab, buildings, box-shaped vehicles and
thin posts. Classes are geometry-determined so small networks can learn them.
"""

from __future__ import annotations

import numpy as np

from .scenes import GridSpec, VoxelScene

GROUND, BUILDING, VEHICLE, POST = 1, 2, 3, 4


def toy_grid(dims=(64, 64, 16), resolution: float = 0.1) -> GridSpec:
    return GridSpec((0.0, 0.0, 0.0), tuple(d * resolution for d in dims), resolution)


def toy_scene(index: int, dims=(64, 64, 16), class_count: int = 4, seed: int = 900) -> VoxelScene:
    """Deterministic street-block scene number `index`."""
    rng = np.random.default_rng(seed + index)
    nx, ny, nz = dims
    lab = np.zeros(dims, dtype=np.int16)

    lab[:, :, 0] = GROUND
    bump = rng.random((nx, ny)) < 0.08
    lab[:, :, 1][bump] = GROUND

    for _ in range(rng.integers(2, 5)):
        sx, sy = rng.integers(8, 16), rng.integers(8, 16)
        x0 = rng.integers(0, max(1, nx - sx))
        y0 = rng.integers(0, max(1, ny - sy))
        h = rng.integers(nz // 2, nz - 1)
        lab[x0 : x0 + sx, y0 : y0 + sy, 1 : 1 + h] = BUILDING

    for _ in range(rng.integers(2, 6)):
        sx, sy, sz = rng.integers(3, 6), rng.integers(2, 4), rng.integers(2, 4)
        x0 = rng.integers(0, max(1, nx - sx))
        y0 = rng.integers(0, max(1, ny - sy))
        lab[x0 : x0 + sx, y0 : y0 + sy, 1 : 1 + sz] = VEHICLE

    if class_count >= POST:
        for _ in range(rng.integers(3, 8)):
            x0, y0 = rng.integers(0, nx), rng.integers(0, ny)
            h = rng.integers(4, max(5, nz - 2))
            lab[x0, y0, 1 : 1 + h] = POST

    coords = np.argwhere(lab > 0)
    labels = lab[coords[:, 0], coords[:, 1], coords[:, 2]]
    return VoxelScene(toy_grid(dims), coords, np.minimum(labels, class_count), class_count)


def slab_scene(dims=(64, 64, 64), occupancy: float = 0.1, label: int = 1) -> VoxelScene:
    """Solid slab filling roughly the requested occupancy fraction; spatially
    coherent, so coarse hierarchy levels stay sparse too."""
    height = max(1, round(dims[2] * occupancy))
    lab = np.zeros(dims, dtype=np.int16)
    lab[:, :, :height] = label
    coords = np.argwhere(lab > 0)
    return VoxelScene(toy_grid(dims), coords, lab[lab > 0], max(label, 1))
