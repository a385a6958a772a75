"""Voxel scene representation and the operations every other module builds on.

A scene is a sparse set of occupied integer voxel coordinates inside a fixed
metric grid, one semantic class id per voxel. Scenes are immutable and kept in
canonical (lexicographically sorted) coordinate order so identical content
always serializes to identical bytes.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field

import numpy as np

VSC1_MAGIC = b"VSC1"

# Default training crop: 51.2 m x 51.2 m x 6.4 m at 0.1 m -> 512 x 512 x 64.
DEFAULT_MIN_CORNER = (-25.6, -25.6, -2.2)
DEFAULT_MAX_CORNER = (25.6, 25.6, 4.2)
DEFAULT_RESOLUTION = 0.1

_SPAN_TOL = 1e-9  # meters


@dataclass(frozen=True)
class GridSpec:
    """Axis-aligned metric grid. Cells are half-open: a point exactly on
    max_corner lies outside."""

    min_corner: tuple[float, float, float] = DEFAULT_MIN_CORNER
    max_corner: tuple[float, float, float] = DEFAULT_MAX_CORNER
    resolution: float = DEFAULT_RESOLUTION
    dims: tuple[int, int, int] = field(init=False)

    def __post_init__(self):
        if self.resolution <= 0:
            raise ValueError(f"resolution must be positive, got {self.resolution}")
        dims = []
        for lo, hi in zip(self.min_corner, self.max_corner):
            span = hi - lo
            if span <= 0:
                raise ValueError(f"max_corner must exceed min_corner, got span {span}")
            n = round(span / self.resolution)
            if abs(n * self.resolution - span) > _SPAN_TOL:
                raise ValueError(
                    f"grid span {span} is not an integer multiple of "
                    f"resolution {self.resolution}"
                )
            if n <= 0 or n > 0xFFFF:
                raise ValueError(f"grid dimension {n} outside supported range [1, 65535]")
            dims.append(int(n))
        object.__setattr__(self, "dims", tuple(dims))

    def voxel_centers(self, coords: np.ndarray) -> np.ndarray:
        """Metric centers of the given (N, 3) integer voxel indices."""
        offs = np.asarray(self.min_corner, dtype=np.float64)
        return offs + (np.asarray(coords, dtype=np.float64) + 0.5) * self.resolution

    def point_to_index(self, points: np.ndarray) -> np.ndarray:
        """floor((p - min_corner) / resolution), possibly out of range."""
        rel = (np.asarray(points, dtype=np.float64) - np.asarray(self.min_corner)) / self.resolution
        return np.floor(rel).astype(np.int64)


def _canonical_order(coords: np.ndarray) -> np.ndarray:
    return np.lexsort((coords[:, 2], coords[:, 1], coords[:, 0]))


def ravel_index(coords: np.ndarray, dims: tuple[int, int, int]) -> np.ndarray:
    return (coords[:, 0].astype(np.int64) * dims[1] + coords[:, 1]) * dims[2] + coords[:, 2]


def unravel_index(keys: np.ndarray, dims: tuple[int, int, int]) -> np.ndarray:
    k = keys.astype(np.int64)
    ij, z = np.divmod(k, dims[2])
    x, y = np.divmod(ij, dims[1])
    return np.stack([x, y, z], axis=1).astype(np.int32)


class VoxelScene:
    """Sparse labeled voxel set over a GridSpec.

    coords: (N, 3) int32, unique, within grid dims, lexicographically sorted.
    labels: (N,) int16 class ids in {1..class_count}.
    """

    __slots__ = ("grid", "coords", "labels", "class_count")

    def __init__(self, grid: GridSpec, coords, labels, class_count: int):
        coords = np.ascontiguousarray(np.asarray(coords, dtype=np.int64).reshape(-1, 3))
        labels = np.ascontiguousarray(np.asarray(labels, dtype=np.int64).reshape(-1))
        if coords.shape[0] != labels.shape[0]:
            raise ValueError(
                f"coords ({coords.shape[0]}) and labels ({labels.shape[0]}) length mismatch"
            )
        if class_count < 1:
            raise ValueError(f"class_count must be >= 1, got {class_count}")
        if coords.size:
            if coords.min() < 0 or np.any(coords >= np.asarray(grid.dims)):
                raise ValueError("voxel index outside grid dims")
            if labels.min() < 1 or labels.max() > class_count:
                raise ValueError(f"labels must lie in [1, {class_count}]")
            keys = ravel_index(coords, grid.dims)
            if np.unique(keys).size != keys.size:
                raise ValueError("duplicate voxel coordinates")
            order = _canonical_order(coords)
            coords = coords[order]
            labels = labels[order]
        self.grid = grid
        self.coords = coords.astype(np.int32)
        self.labels = labels.astype(np.int16)
        self.class_count = int(class_count)
        self.coords.setflags(write=False)
        self.labels.setflags(write=False)

    def __len__(self) -> int:
        return self.coords.shape[0]

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, VoxelScene)
            and self.grid == other.grid
            and self.class_count == other.class_count
            and np.array_equal(self.coords, other.coords)
            and np.array_equal(self.labels, other.labels)
        )

    def occupancy(self) -> np.ndarray:
        """Dense boolean occupancy grid of shape grid.dims."""
        occ = np.zeros(self.grid.dims, dtype=bool)
        if len(self):
            occ[self.coords[:, 0], self.coords[:, 1], self.coords[:, 2]] = True
        return occ

    def label_grid(self) -> np.ndarray:
        """Dense int16 label grid, 0 where unoccupied."""
        lab = np.zeros(self.grid.dims, dtype=np.int16)
        if len(self):
            lab[self.coords[:, 0], self.coords[:, 1], self.coords[:, 2]] = self.labels
        return lab

    def voxel_iou(self, other: "VoxelScene") -> float:
        """Occupancy intersection-over-union against another scene on the
        same grid. Two empty scenes have IoU 1."""
        if self.grid.dims != other.grid.dims:
            raise ValueError("voxel_iou requires matching grid dims")
        a = set(map(int, ravel_index(self.coords.astype(np.int64), self.grid.dims)))
        b = set(map(int, ravel_index(other.coords.astype(np.int64), other.grid.dims)))
        union = len(a | b)
        return 1.0 if union == 0 else len(a & b) / union


@dataclass(frozen=True)
class HierarchyTargets:
    """Per-level occupancy masks and semantic targets.

    Index 0 is the input resolution; index l has dims ceil(dims[l-1] / 2).
    Semantic grids carry 0 on unoccupied cells.
    """

    levels: int
    masks: list  # of np.ndarray bool, len levels + 1
    semantics: list  # of np.ndarray int16, len levels + 1

    def __post_init__(self):
        if len(self.masks) != self.levels + 1 or len(self.semantics) != self.levels + 1:
            raise ValueError("need levels + 1 mask/semantic grids, input resolution first")
        for mask, sem in zip(self.masks, self.semantics):
            if mask.shape != sem.shape:
                raise ValueError("mask/semantic shape mismatch")
        for coarse, fine in zip(self.masks[1:], self.masks[:-1]):
            expect = tuple((d + 1) // 2 for d in fine.shape)
            if coarse.shape != expect:
                raise ValueError(f"level dims {coarse.shape} != ceil(previous / 2) {expect}")


def max_hierarchy_levels(dims: tuple[int, int, int]) -> int:
    """Number of halvings until every dimension reaches 1."""
    return max(int(math.ceil(math.log2(d))) for d in dims)


def majority_reduce(keys: np.ndarray, labels: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Per unique key, the label with the highest count; ties broken by the
    smallest label. Returns (sorted unique keys, winning labels)."""
    pair_order = np.lexsort((labels, keys))
    k, lab = keys[pair_order], labels[pair_order]
    # collapse identical (key, label) runs into counts
    boundary = np.empty(k.size, dtype=bool)
    boundary[0] = True
    boundary[1:] = (k[1:] != k[:-1]) | (lab[1:] != lab[:-1])
    starts = np.flatnonzero(boundary)
    counts = np.diff(np.append(starts, k.size))
    uk, ulab = k[starts], lab[starts]
    # per key: max count, then smallest label
    pick = np.lexsort((ulab, -counts, uk))
    uk, ulab, counts = uk[pick], ulab[pick], counts[pick]
    first = np.unique(uk, return_index=True)[1]
    return uk[first], ulab[first]


def voxelize(points, point_labels, grid: GridSpec, class_count: int | None = None) -> VoxelScene:
    """Bin labeled metric points into grid voxels.

    Out-of-range points are dropped; the per-voxel label is the majority vote
    over contributing points, ties resolved toward the smallest class id.
    Non-finite coordinates are rejected.
    """
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    point_labels = np.asarray(point_labels, dtype=np.int64).reshape(-1)
    if points.shape[0] != point_labels.shape[0]:
        raise ValueError("points and labels length mismatch")
    if points.size and not np.isfinite(points).all():
        raise ValueError("non-finite point coordinate")
    if class_count is None:
        class_count = int(point_labels.max()) if point_labels.size else 1
    if point_labels.size and (point_labels.min() < 1 or point_labels.max() > class_count):
        raise ValueError(f"point labels must lie in [1, {class_count}]")

    idx = grid.point_to_index(points)
    inside = np.all((idx >= 0) & (idx < np.asarray(grid.dims)), axis=1)
    idx, lab = idx[inside], point_labels[inside]
    if idx.shape[0] == 0:
        return VoxelScene(grid, np.zeros((0, 3)), np.zeros((0,)), class_count)
    keys, winners = majority_reduce(ravel_index(idx, grid.dims), lab)
    return VoxelScene(grid, unravel_index(keys, grid.dims), winners, class_count)


def downsample_scene(scene: VoxelScene, levels: int) -> HierarchyTargets:
    """Build per-level occupancy and semantic targets by repeated 2x2x2
    reduction: occupancy is the OR over children, semantics the majority vote
    over occupied children (ties toward the smallest class id)."""
    if levels < 1:
        raise ValueError(f"levels must be >= 1, got {levels}")
    limit = max_hierarchy_levels(scene.grid.dims)
    if levels > limit:
        raise ValueError(f"levels {levels} exceeds hierarchy depth {limit} for dims {scene.grid.dims}")

    masks = [scene.occupancy()]
    semantics = [scene.label_grid()]
    coords = scene.coords.astype(np.int64)
    labels = scene.labels.astype(np.int64)
    dims = scene.grid.dims
    for _ in range(levels):
        dims = tuple((d + 1) // 2 for d in dims)
        if coords.shape[0]:
            coords_up = coords >> 1
            keys, winners = majority_reduce(ravel_index(coords_up, dims), labels)
            coords, labels = unravel_index(keys, dims).astype(np.int64), winners
        mask = np.zeros(dims, dtype=bool)
        sem = np.zeros(dims, dtype=np.int16)
        if coords.shape[0]:
            mask[coords[:, 0], coords[:, 1], coords[:, 2]] = True
            sem[coords[:, 0], coords[:, 1], coords[:, 2]] = labels
        masks.append(mask)
        semantics.append(sem)
    return HierarchyTargets(levels=levels, masks=masks, semantics=semantics)


class SparseLatent:
    """Sparse feature field on a low-resolution latent grid."""

    __slots__ = ("dims", "coords", "features")

    def __init__(self, dims: tuple[int, int, int], coords, features):
        coords = np.ascontiguousarray(np.asarray(coords, dtype=np.int64).reshape(-1, 3))
        features = np.ascontiguousarray(np.asarray(features, dtype=np.float32))
        if features.ndim == 1:
            features = features.reshape(coords.shape[0], -1)
        if coords.shape[0] != features.shape[0]:
            raise ValueError("coords and features length mismatch")
        if coords.size:
            if coords.min() < 0 or np.any(coords >= np.asarray(dims)):
                raise ValueError("latent coordinate outside latent dims")
            keys = ravel_index(coords, dims)
            if np.unique(keys).size != keys.size:
                raise ValueError("duplicate latent coordinates")
            order = _canonical_order(coords)
            coords, features = coords[order], features[order]
        self.dims = tuple(int(d) for d in dims)
        self.coords = coords.astype(np.int32)
        self.features = features

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1] if self.features.ndim == 2 else 0

    def __len__(self) -> int:
        return self.coords.shape[0]

    def __eq__(self, other) -> bool:
        return (
            isinstance(other, SparseLatent)
            and self.dims == other.dims
            and np.array_equal(self.coords, other.coords)
            and np.array_equal(self.features, other.features)
        )


class DenseLatent:
    """Dense (H, W, D, d_z) float32 packing of a sparse latent."""

    __slots__ = ("values",)

    def __init__(self, values):
        values = np.ascontiguousarray(np.asarray(values, dtype=np.float32))
        if values.ndim != 4:
            raise ValueError(f"dense latent must be 4-D, got shape {values.shape}")
        if not np.isfinite(values).all():
            raise ValueError("dense latent contains non-finite values")
        self.values = values

    @property
    def spatial_dims(self) -> tuple[int, int, int]:
        return self.values.shape[:3]

    @property
    def feature_dim(self) -> int:
        return self.values.shape[3]


def pack_dense(latent: SparseLatent, feature_dim: int | None = None) -> DenseLatent:
    """Zero-initialize the dense grid and write the sparse features through."""
    d_z = latent.feature_dim if feature_dim is None else feature_dim
    values = np.zeros(latent.dims + (d_z,), dtype=np.float32)
    if len(latent):
        if latent.feature_dim != d_z:
            raise ValueError("feature dim mismatch")
        c = latent.coords
        values[c[:, 0], c[:, 1], c[:, 2]] = latent.features
    return DenseLatent(values)


def unpack_sparse(dense: DenseLatent, occupancy: np.ndarray) -> SparseLatent:
    """Features at occupied cells only, coordinates in lexicographic order."""
    occupancy = np.asarray(occupancy, dtype=bool)
    if occupancy.shape != dense.spatial_dims:
        raise ValueError(
            f"occupancy shape {occupancy.shape} != dense spatial dims {dense.spatial_dims}"
        )
    coords = np.argwhere(occupancy)  # argwhere is already lexicographic
    feats = dense.values[coords[:, 0], coords[:, 1], coords[:, 2]]
    return SparseLatent(dense.spatial_dims, coords, feats)


# --------------------------- VSC1 scene files ---------------------------
#
# Little-endian binary: magic "VSC1"; 7 float64 (min corner x3, max corner x3,
# resolution); uint32 class count; uint32 voxel count; then per voxel
# uint16 i, uint16 j, uint16 k, uint8 label.

_HEADER = struct.Struct("<7dII")
_VOXEL_DTYPE = np.dtype([("i", "<u2"), ("j", "<u2"), ("k", "<u2"), ("label", "u1")])


def scene_to_bytes(scene: VoxelScene) -> bytes:
    head = _HEADER.pack(
        *scene.grid.min_corner, *scene.grid.max_corner, scene.grid.resolution,
        scene.class_count, len(scene),
    )
    rec = np.empty(len(scene), dtype=_VOXEL_DTYPE)
    rec["i"], rec["j"], rec["k"] = scene.coords[:, 0], scene.coords[:, 1], scene.coords[:, 2]
    rec["label"] = scene.labels.astype(np.uint8)
    return VSC1_MAGIC + head + rec.tobytes()


def scene_from_bytes(data: bytes) -> VoxelScene:
    if data[:4] != VSC1_MAGIC:
        raise ValueError("not a VSC1 scene file")
    fields = _HEADER.unpack_from(data, 4)
    grid = GridSpec(tuple(fields[0:3]), tuple(fields[3:6]), fields[6])
    class_count, count = fields[7], fields[8]
    rec = np.frombuffer(data, dtype=_VOXEL_DTYPE, count=count, offset=4 + _HEADER.size)
    coords = np.stack([rec["i"], rec["j"], rec["k"]], axis=1).astype(np.int64)
    return VoxelScene(grid, coords, rec["label"].astype(np.int64), class_count)


def write_scene(scene: VoxelScene, path) -> None:
    with open(path, "wb") as fh:
        fh.write(scene_to_bytes(scene))


def read_scene(path) -> VoxelScene:
    with open(path, "rb") as fh:
        return scene_from_bytes(fh.read())
