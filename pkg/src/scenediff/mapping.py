"""Dense labeled map construction from posed, labeled scans.

Scans are filtered for moving classes, rigidly transformed into the world
frame and accumulated into per-voxel label histograms; a majority vote with a
smallest-id tie-break finalizes the map, so aggregation order never matters.
Training scenes are fixed-range crops of the map re-expressed at a query pose.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .labels import MOVING_CLASS_IDS
from .scenes import GridSpec, VoxelScene, majority_reduce, ravel_index, unravel_index

_ROTATION_TOL = 1e-6


@dataclass(frozen=True)
class PosedScan:
    """Labeled points in the sensor frame plus the sensor-to-world pose."""

    points: np.ndarray  # (N, 3) float64
    labels: np.ndarray  # (N,) int
    rotation: np.ndarray  # (3, 3) orthonormal, det +1
    translation: np.ndarray  # (3,)
    scan_id: str = ""

    def __post_init__(self):
        points = np.ascontiguousarray(np.asarray(self.points, dtype=np.float64).reshape(-1, 3))
        labels = np.ascontiguousarray(np.asarray(self.labels, dtype=np.int64).reshape(-1))
        rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if points.shape[0] != labels.shape[0]:
            raise ValueError("points and labels length mismatch")
        if np.abs(rotation @ rotation.T - np.eye(3)).max() > _ROTATION_TOL:
            raise ValueError("rotation is not orthonormal")
        if abs(np.linalg.det(rotation) - 1.0) > _ROTATION_TOL:
            raise ValueError("rotation determinant must be +1")
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "labels", labels)
        object.__setattr__(self, "rotation", rotation)
        object.__setattr__(self, "translation", translation)

    def __len__(self) -> int:
        return self.points.shape[0]

    def world_points(self) -> np.ndarray:
        return self.points @ self.rotation.T + self.translation


@dataclass(frozen=True)
class SceneMap:
    """Aggregated world-frame map: a VoxelScene plus per-voxel point counts."""

    scene: VoxelScene
    counts: np.ndarray  # (len(scene),) contributing points per voxel

    def __post_init__(self):
        counts = np.ascontiguousarray(np.asarray(self.counts, dtype=np.int64).reshape(-1))
        if counts.shape[0] != len(self.scene):
            raise ValueError("counts length must match voxel count")
        if counts.size and counts.min() < 1:
            raise ValueError("occupied voxels need counts >= 1")
        object.__setattr__(self, "counts", counts)


def filter_moving(scan: PosedScan, moving_classes=MOVING_CLASS_IDS) -> PosedScan:
    """Drop points whose label is a moving class; survivor order preserved."""
    moving = set(int(c) for c in moving_classes)
    if not moving:
        return scan
    keep = ~np.isin(scan.labels, sorted(moving))
    return PosedScan(
        points=scan.points[keep],
        labels=scan.labels[keep],
        rotation=scan.rotation,
        translation=scan.translation,
        scan_id=scan.scan_id,
    )


def aggregate(
    scans,
    map_grid: GridSpec,
    moving_classes=MOVING_CLASS_IDS,
    class_count: int | None = None,
) -> SceneMap:
    """Accumulate filtered world-frame scans into a labeled map."""
    scans = list(scans)
    if not scans:
        raise ValueError("need at least one scan")
    if class_count is None:
        class_count = max((int(s.labels.max()) for s in scans if len(s)), default=1)

    all_keys, all_labels = [], []
    for scan in scans:
        kept = filter_moving(scan, moving_classes)
        if len(kept) == 0:
            continue
        if not np.isfinite(kept.points).all():
            raise ValueError(f"non-finite point in scan {scan.scan_id!r}")
        world = kept.world_points()
        if not np.isfinite(world).all():
            raise ValueError(f"non-finite transformed point in scan {scan.scan_id!r}")
        idx = map_grid.point_to_index(world)
        inside = np.all((idx >= 0) & (idx < np.asarray(map_grid.dims)), axis=1)
        if inside.any():
            all_keys.append(ravel_index(idx[inside], map_grid.dims))
            all_labels.append(kept.labels[inside])

    if not all_keys:
        scene = VoxelScene(map_grid, np.zeros((0, 3)), np.zeros((0,)), class_count)
        return SceneMap(scene=scene, counts=np.zeros((0,), dtype=np.int64))

    keys = np.concatenate(all_keys)
    labels = np.concatenate(all_labels)
    winner_keys, winners = majority_reduce(keys, labels)
    counts = np.zeros(winner_keys.shape[0], dtype=np.int64)
    pos = np.searchsorted(winner_keys, keys)
    np.add.at(counts, pos, 1)
    scene = VoxelScene(map_grid, unravel_index(winner_keys, map_grid.dims), winners, class_count)
    return SceneMap(scene=scene, counts=counts)


def auto_map_grid(scans, resolution: float, moving_classes=MOVING_CLASS_IDS, pad: float = 1.0) -> GridSpec:
    """Bounding box of all transformed surviving points, padded and snapped to
    a whole number of cells."""
    los, his = [], []
    for scan in scans:
        kept = filter_moving(scan, moving_classes)
        if len(kept) == 0:
            continue
        world = kept.world_points()
        los.append(world.min(axis=0))
        his.append(world.max(axis=0))
    if not los:
        raise ValueError("no surviving points to bound")
    lo = np.min(los, axis=0) - pad
    hi = np.max(his, axis=0) + pad
    lo = np.floor(lo / resolution) * resolution
    hi = np.ceil(hi / resolution) * resolution
    hi = np.where(hi - lo < resolution, lo + resolution, hi)
    return GridSpec(tuple(lo), tuple(hi), resolution)


def crop_at_pose(scene_map: SceneMap, rotation, translation, crop_grid: GridSpec) -> VoxelScene:
    """Re-express map voxel centers in the pose frame and re-voxelize into the
    fixed crop range. Collisions resolve by majority over colliding voxels."""
    rotation = np.asarray(rotation, dtype=np.float64).reshape(3, 3)
    translation = np.asarray(translation, dtype=np.float64).reshape(3)
    if np.abs(rotation @ rotation.T - np.eye(3)).max() > _ROTATION_TOL:
        raise ValueError("rotation is not orthonormal")
    scene = scene_map.scene
    if len(scene) == 0:
        return VoxelScene(crop_grid, np.zeros((0, 3)), np.zeros((0,)), scene.class_count)
    centers = scene.grid.voxel_centers(scene.coords)
    local = (centers - translation) @ rotation  # R^T (p - t)
    idx = crop_grid.point_to_index(local)
    inside = np.all((idx >= 0) & (idx < np.asarray(crop_grid.dims)), axis=1)
    if not inside.any():
        return VoxelScene(crop_grid, np.zeros((0, 3)), np.zeros((0,)), scene.class_count)
    keys, winners = majority_reduce(
        ravel_index(idx[inside], crop_grid.dims), scene.labels[inside].astype(np.int64)
    )
    return VoxelScene(crop_grid, unravel_index(keys, crop_grid.dims), winners, scene.class_count)


# ----------------------------- scan directory IO -----------------------------
#
# Per-scan pair of files: <name>.bin holds float32 xyz triplets, <name>.label
# holds one uint8 per point. A single poses file carries one row-major 4x4
# float64 transform per line, ordered like the sorted scan names.

def write_scan_dir(directory, scans) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, scan in enumerate(scans):
        name = scan.scan_id or f"{i:06d}"
        scan.points.astype("<f4").tofile(directory / f"{name}.bin")
        scan.labels.astype(np.uint8).tofile(directory / f"{name}.label")
        mat = np.eye(4)
        mat[:3, :3] = scan.rotation
        mat[:3, 3] = scan.translation
        lines.append(" ".join(f"{v:.17g}" for v in mat.reshape(-1)))
    (directory / "poses.txt").write_text("\n".join(lines) + "\n")


def read_scan_dir(directory) -> list[PosedScan]:
    directory = Path(directory)
    names = sorted(p.stem for p in directory.glob("*.bin"))
    poses = np.loadtxt(directory / "poses.txt", dtype=np.float64).reshape(-1, 4, 4)
    if poses.shape[0] != len(names):
        raise ValueError(f"{poses.shape[0]} poses for {len(names)} scans")
    scans = []
    for name, mat in zip(names, poses):
        points = np.fromfile(directory / f"{name}.bin", dtype="<f4").reshape(-1, 3)
        labels = np.fromfile(directory / f"{name}.label", dtype=np.uint8)
        scans.append(
            PosedScan(
                points=points.astype(np.float64),
                labels=labels.astype(np.int64),
                rotation=mat[:3, :3],
                translation=mat[:3, 3],
                scan_id=name,
            )
        )
    return scans
