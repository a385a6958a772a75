"""Rotating-LiDAR simulation over a voxel scene.

Each (elevation, azimuth) beam marches through the grid with an exact
amanatides-woo traversal; the first occupied voxel it enters produces one
return at that voxel's center, carrying the voxel's label. Returns whose
center distance falls outside [min_range, max_range] are dropped, and a
too-close first hit still blocks the beam. The simulation is a pure function:
identical inputs give byte-identical clouds.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .scenes import VoxelScene

_AZIMUTH_TOL = 1e-9


@dataclass(frozen=True)
class SensorModel:
    elevations_deg: tuple  # strictly increasing beam elevations
    azimuth_step_deg: float = 0.2
    origin: tuple = (0.0, 0.0, 0.0)  # scene frame, must lie inside the grid
    min_range: float = 0.3
    max_range: float = 100.0
    range_jitter_sigma: float = 0.0  # optional Gaussian jitter, off by default

    def __post_init__(self):
        elev = tuple(float(e) for e in self.elevations_deg)
        if len(elev) == 0:
            raise ValueError("need at least one beam")
        if any(b <= a for a, b in zip(elev, elev[1:])):
            raise ValueError("elevations must be strictly increasing")
        object.__setattr__(self, "elevations_deg", elev)
        if not 0.0 < self.min_range < self.max_range:
            raise ValueError("need 0 < min_range < max_range")
        bins = 360.0 / self.azimuth_step_deg
        if abs(round(bins) * self.azimuth_step_deg - 360.0) > _AZIMUTH_TOL:
            raise ValueError(f"azimuth step {self.azimuth_step_deg} must divide 360 degrees")

    @property
    def azimuth_bins(self) -> int:
        return round(360.0 / self.azimuth_step_deg)

    def ray_directions(self) -> np.ndarray:
        """(beams * bins, 3) unit vectors, beam-major then azimuth order."""
        elev = np.deg2rad(np.asarray(self.elevations_deg))
        azim = np.deg2rad(np.arange(self.azimuth_bins) * self.azimuth_step_deg)
        ce, se = np.cos(elev), np.sin(elev)
        ca, sa = np.cos(azim), np.sin(azim)
        dirs = np.stack(
            [
                np.outer(ce, ca).ravel(),
                np.outer(ce, sa).ravel(),
                np.repeat(se, azim.size),
            ],
            axis=1,
        )
        return dirs


def default_sensor(profile: str, **overrides) -> SensorModel:
    """Preset beam layouts: "64-beam" spans -24.9..2 degrees, "128-beam"
    spans -22.5..22.5 degrees."""
    if profile == "64-beam":
        elevations = np.linspace(-24.9, 2.0, 64)
    elif profile == "128-beam":
        elevations = np.linspace(-22.5, 22.5, 128)
    else:
        raise ValueError(f"unknown sensor profile {profile!r}")
    return SensorModel(elevations_deg=tuple(elevations), **overrides)


def simulate(scene: VoxelScene, sensor: SensorModel, jitter_rng=None):
    """Cast every beam and return (points (N, 3) float64, labels (N,) int16),
    sorted by (beam, azimuth)."""
    grid = scene.grid
    origin = np.asarray(sensor.origin, dtype=np.float64)
    g0 = (origin - np.asarray(grid.min_corner)) / grid.resolution
    dims = np.asarray(grid.dims)
    if np.any(g0 < 0) or np.any(g0 >= dims):
        raise ValueError(f"sensor origin {tuple(origin)} lies outside the grid")
    if sensor.range_jitter_sigma > 0 and jitter_rng is None:
        raise ValueError("range jitter requires a random generator")

    occupancy = scene.occupancy()
    label_grid = scene.label_grid()
    dirs = sensor.ray_directions()
    n = dirs.shape[0]

    voxel = np.floor(g0)[None, :].repeat(n, axis=0).astype(np.int64)
    step = np.sign(dirs).astype(np.int64)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / dirs
        # parametric distance (in voxels along the unit ray) to the next
        # boundary crossing, and the per-cell increment
        next_boundary = voxel + (step > 0)
        t_max = np.where(dirs != 0, (next_boundary - g0) * inv, np.inf)
        t_delta = np.where(dirs != 0, np.abs(inv), np.inf)

    max_u = sensor.max_range / grid.resolution + np.sqrt(3.0)
    active = np.ones(n, dtype=bool)
    hit_voxel = np.full((n, 3), -1, dtype=np.int64)
    travelled = np.zeros(n)

    while active.any():
        idx = np.flatnonzero(active)
        v = voxel[idx]
        inside = np.all((v >= 0) & (v < dims), axis=1)
        safe = v.clip(0, dims - 1)
        occ = inside & occupancy[safe[:, 0], safe[:, 1], safe[:, 2]]
        hit_voxel[idx[occ]] = v[occ]
        dead = occ | ~inside | (travelled[idx] > max_u)
        active[idx[dead]] = False
        move = idx[~dead]
        if move.size == 0:
            break
        axis = np.argmin(t_max[move], axis=1)
        rows = (move, axis)
        travelled[move] = t_max[rows]
        voxel[rows] += step[rows]
        t_max[rows] += t_delta[rows]

    got = hit_voxel[:, 0] >= 0
    centers = grid.voxel_centers(hit_voxel[got])
    dist = np.linalg.norm(centers - origin, axis=1)
    in_range = (dist >= sensor.min_range) & (dist <= sensor.max_range)
    centers = centers[in_range]
    vox = hit_voxel[got][in_range]
    labels = label_grid[vox[:, 0], vox[:, 1], vox[:, 2]]
    if sensor.range_jitter_sigma > 0 and centers.shape[0]:
        along = dirs[got][in_range]
        centers = centers + along * jitter_rng.normal(
            0.0, sensor.range_jitter_sigma, size=(centers.shape[0], 1)
        )
    return centers, labels.astype(np.int16)


# ------------------------------ cloud files ------------------------------
#
# Little-endian records of float32 x, y, z followed by a uint8 label.

_RECORD = struct.Struct("<3fB")


def write_cloud(path, points: np.ndarray, labels: np.ndarray) -> None:
    points = np.asarray(points, dtype=np.float32).reshape(-1, 3)
    labels = np.asarray(labels).reshape(-1).astype(np.uint8)
    if points.shape[0] != labels.shape[0]:
        raise ValueError("points and labels length mismatch")
    with open(path, "wb") as fh:
        for p, lab in zip(points, labels):
            fh.write(_RECORD.pack(float(p[0]), float(p[1]), float(p[2]), int(lab)))


def read_cloud(path):
    data = Path(path).read_bytes()
    if len(data) % _RECORD.size:
        raise ValueError("truncated cloud file")
    n = len(data) // _RECORD.size
    points = np.empty((n, 3), dtype=np.float32)
    labels = np.empty(n, dtype=np.uint8)
    for i in range(n):
        x, y, z, lab = _RECORD.unpack_from(data, i * _RECORD.size)
        points[i] = (x, y, z)
        labels[i] = lab
    return points, labels
