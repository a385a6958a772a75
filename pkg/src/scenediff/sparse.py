"""Hash-indexed sparse 3-D convolution primitives.

Features live on an explicit set of active voxel coordinates; convolutions
gather neighbor features through precomputed index plans, so repeated passes
over the same coordinate set (the common case during training) pay the
neighbor search once. Missing neighbors contribute zero, matching a dense
convolution over a zero-filled grid.

Plans store flat padded indices: a gather plan for M output cells and K
stencil taps is an (M, K) int64 tensor whose entries index the source feature
rows, with len(source) standing in for "missing" (resolved against an
appended zero row). That keeps the hot path to one index_select and one GEMM.
"""

from __future__ import annotations

import numpy as np
import torch
from torch import nn

Dims = tuple[int, int, int]


def _ravel(coords: torch.Tensor, dims: Dims) -> torch.Tensor:
    return (coords[:, 0] * dims[1] + coords[:, 1]) * dims[2] + coords[:, 2]


class SparseGrid:
    """Immutable sorted set of active integer cells at one resolution."""

    __slots__ = ("dims", "coords", "keys")

    def __init__(self, dims: Dims, coords: torch.Tensor):
        coords = torch.as_tensor(coords, dtype=torch.int64).reshape(-1, 3)
        keys = _ravel(coords, dims)
        order = torch.argsort(keys)
        self.dims = tuple(int(d) for d in dims)
        self.coords = coords[order].contiguous()
        self.keys = keys[order].contiguous()

    @classmethod
    def from_numpy(cls, dims: Dims, coords: np.ndarray) -> "SparseGrid":
        return cls(dims, torch.from_numpy(np.ascontiguousarray(coords, dtype=np.int64)))

    @classmethod
    def full(cls, dims: Dims) -> "SparseGrid":
        axes = [torch.arange(d) for d in dims]
        coords = torch.cartesian_prod(*axes).reshape(-1, 3)
        return cls(dims, coords)

    def __len__(self) -> int:
        return self.coords.shape[0]

    def lookup(self, query: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """Row index of each query coordinate, with a validity mask. Queries
        outside the grid bounds or not in the active set are invalid."""
        in_bounds = ((query >= 0) & (query < torch.tensor(self.dims))).all(dim=1)
        qkeys = _ravel(query.clamp(min=0), self.dims)
        if len(self) == 0:
            return torch.zeros(query.shape[0], dtype=torch.int64), torch.zeros(
                query.shape[0], dtype=torch.bool
            )
        pos = torch.searchsorted(self.keys, qkeys).clamp(max=len(self) - 1)
        valid = in_bounds & (self.keys[pos] == qkeys)
        return pos * valid, valid

    def coarsen(self) -> "SparseGrid":
        """Parent grid at half resolution (ceil dims)."""
        dims = tuple((d + 1) // 2 for d in self.dims)
        parents = torch.unique(self.coords >> 1, dim=0)
        return SparseGrid(dims, parents)

    def children(self, fine_dims: Dims | None = None) -> "SparseGrid":
        """All 2x2x2 children of the active cells, clipped to fine_dims."""
        if fine_dims is None:
            fine_dims = tuple(d * 2 for d in self.dims)
        kids = (self.coords[:, None, :] * 2 + CHILD_OFFSETS_8[None, :, :]).reshape(-1, 3)
        keep = (kids < torch.tensor(fine_dims)).all(dim=1)
        return SparseGrid(fine_dims, kids[keep])


NEIGHBOR_OFFSETS_27 = torch.tensor(
    [[i, j, k] for i in (-1, 0, 1) for j in (-1, 0, 1) for k in (-1, 0, 1)],
    dtype=torch.int64,
)
CHILD_OFFSETS_8 = torch.tensor(
    [[i, j, k] for i in (0, 1) for j in (0, 1) for k in (0, 1)], dtype=torch.int64
)


def _gather_plan(source: SparseGrid, queries: torch.Tensor) -> torch.Tensor:
    """(M, K) padded indices into source rows for the (M, K, 3) queries;
    missing neighbors index the pad row len(source)."""
    m, k = queries.shape[0], queries.shape[1]
    idx, valid = source.lookup(queries.reshape(-1, 3))
    return torch.where(valid, idx, torch.full_like(idx, len(source))).view(m, k)


def conv_plan(grid: SparseGrid) -> torch.Tensor:
    """(M, 27) padded neighbor indices for a 3x3x3 stencil on grid."""
    queries = grid.coords[:, None, :] + NEIGHBOR_OFFSETS_27[None, :, :]
    return _gather_plan(grid, queries)


def down_plan(fine: SparseGrid, coarse: SparseGrid) -> torch.Tensor:
    """(Mc, 8) padded indices into fine for each coarse cell's children."""
    queries = coarse.coords[:, None, :] * 2 + CHILD_OFFSETS_8[None, :, :]
    return _gather_plan(fine, queries)


def up_plan(coarse: SparseGrid, fine: SparseGrid) -> tuple[torch.Tensor, torch.Tensor]:
    """For each fine cell: index of its parent in coarse and the child-offset
    id (0..7). Every fine cell must have its parent active."""
    parent_idx, valid = coarse.lookup(fine.coords >> 1)
    if not bool(valid.all()):
        raise ValueError("fine grid contains cells without an active parent")
    rel = fine.coords - (fine.coords >> 1) * 2
    offset_id = rel[:, 0] * 4 + rel[:, 1] * 2 + rel[:, 2]
    return parent_idx, offset_id


def _pad_gather(feats: torch.Tensor, plan: torch.Tensor) -> torch.Tensor:
    """(M, K * C) neighbor features, zeros where the plan points at the pad
    row."""
    padded = torch.cat([feats, feats.new_zeros((1, feats.shape[1]))], dim=0)
    return padded.index_select(0, plan.reshape(-1)).view(plan.shape[0], -1)


class _GatherConv(nn.Module):
    """Shared machinery: gather K taps, then one GEMM."""

    def __init__(self, taps: int, in_channels: int, out_channels: int):
        super().__init__()
        scale = (in_channels * taps) ** -0.5
        self.weight = nn.Parameter(torch.randn(taps, in_channels, out_channels) * scale)
        self.bias = nn.Parameter(torch.zeros(out_channels))

    def forward(self, feats: torch.Tensor, plan: torch.Tensor) -> torch.Tensor:
        taps, cin, cout = self.weight.shape
        if plan.shape[0] == 0:
            return feats.new_zeros((0, cout))
        g = _pad_gather(feats, plan)
        w = self.weight.to(feats.dtype).view(taps * cin, cout)
        return g @ w + self.bias.to(feats.dtype)


class SparseConv3(_GatherConv):
    """3x3x3 convolution over an active set via a precomputed plan."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__(27, in_channels, out_channels)


class SparseDown2(_GatherConv):
    """Stride-2 reduction: each output cell mixes its up-to-8 children."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__(8, in_channels, out_channels)


class SparseUp2(nn.Module):
    """Stride-2 expansion: each output cell takes its parent's feature through
    the weight of its child offset."""

    def __init__(self, in_channels: int, out_channels: int):
        super().__init__()
        scale = in_channels ** -0.5
        self.weight = nn.Parameter(torch.randn(8, in_channels, out_channels) * scale)
        self.bias = nn.Parameter(torch.zeros(out_channels))

    def forward(self, feats: torch.Tensor, plan) -> torch.Tensor:
        parent_idx, offset_id = plan
        if parent_idx.shape[0] == 0:
            return feats.new_zeros((0, self.weight.shape[2]))
        g = feats.index_select(0, parent_idx)
        w = self.weight.to(feats.dtype)
        out = None
        for k in range(8):
            sel = (offset_id == k).to(feats.dtype).unsqueeze(1)
            term = (g @ w[k]) * sel
            out = term if out is None else out + term
        return out + self.bias.to(feats.dtype)


class CellNorm(nn.Module):
    """LayerNorm over channels, per active cell."""

    def __init__(self, channels: int):
        super().__init__()
        self.norm = nn.LayerNorm(channels)

    def forward(self, feats: torch.Tensor) -> torch.Tensor:
        if feats.shape[0] == 0:
            return feats
        return self.norm(feats)
