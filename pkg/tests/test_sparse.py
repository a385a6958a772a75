import numpy as np
import torch
import pytest

from scenediff.sparse import (
    SparseConv3,
    SparseDown2,
    SparseGrid,
    SparseUp2,
    conv_plan,
    down_plan,
    up_plan,
)

torch.manual_seed(0)


def dense_from_sparse(grid, feats):
    x = torch.zeros((1, feats.shape[1]) + grid.dims)
    c = grid.coords
    x[0, :, c[:, 0], c[:, 1], c[:, 2]] = feats.T
    return x


def test_lookup_finds_members_and_rejects_outsiders():
    grid = SparseGrid((4, 4, 4), torch.tensor([[0, 0, 0], [3, 3, 3], [1, 2, 3]]))
    idx, valid = grid.lookup(torch.tensor([[1, 2, 3], [2, 2, 2], [-1, 0, 0], [4, 0, 0]]))
    assert valid.tolist() == [True, False, False, False]
    assert torch.equal(grid.coords[idx[0]], torch.tensor([1, 2, 3]))


def test_conv3_matches_dense_conv3d():
    rng = np.random.default_rng(1)
    dims = (6, 5, 4)
    occ = rng.random(dims) < 0.4
    grid = SparseGrid.from_numpy(dims, np.argwhere(occ))
    feats = torch.randn(len(grid), 7)

    conv = SparseConv3(7, 3)
    out = conv(feats, conv_plan(grid))

    ref = torch.nn.Conv3d(7, 3, kernel_size=3, padding=1, bias=True)
    with torch.no_grad():
        # our kernel axis enumerates offsets (-1,0,1)^3 in lexicographic order,
        # matching Conv3d's (kd, kh, kw) layout
        ref.weight.copy_(conv.weight.reshape(3, 3, 3, 7, 3).permute(4, 3, 0, 1, 2))
        ref.bias.copy_(conv.bias)
    dense = ref(dense_from_sparse(grid, feats))
    c = grid.coords
    expected = dense[0, :, c[:, 0], c[:, 1], c[:, 2]].T
    assert torch.allclose(out, expected, atol=1e-5)


def test_down2_matches_dense_strided_conv():
    rng = np.random.default_rng(2)
    dims = (4, 4, 4)
    occ = rng.random(dims) < 0.5
    occ[0, 0, 0] = True
    fine = SparseGrid.from_numpy(dims, np.argwhere(occ))
    coarse = fine.coarsen()
    feats = torch.randn(len(fine), 5)

    down = SparseDown2(5, 4)
    out = down(feats, down_plan(fine, coarse))

    ref = torch.nn.Conv3d(5, 4, kernel_size=2, stride=2)
    with torch.no_grad():
        ref.weight.copy_(down.weight.reshape(2, 2, 2, 5, 4).permute(4, 3, 0, 1, 2))
        ref.bias.copy_(down.bias)
    dense = ref(dense_from_sparse(fine, feats))
    c = coarse.coords
    expected = dense[0, :, c[:, 0], c[:, 1], c[:, 2]].T
    assert torch.allclose(out, expected, atol=1e-5)


def test_up2_matches_dense_transposed_conv():
    rng = np.random.default_rng(3)
    dims = (3, 3, 2)
    occ = rng.random(dims) < 0.6
    occ[1, 1, 1] = True
    coarse = SparseGrid.from_numpy(dims, np.argwhere(occ))
    fine = coarse.children()
    feats = torch.randn(len(coarse), 4)

    up = SparseUp2(4, 6)
    out = up(feats, up_plan(coarse, fine))

    ref = torch.nn.ConvTranspose3d(4, 6, kernel_size=2, stride=2)
    with torch.no_grad():
        ref.weight.copy_(up.weight.reshape(2, 2, 2, 4, 6).permute(3, 4, 0, 1, 2))
        ref.bias.copy_(up.bias)
    dense = ref(dense_from_sparse(coarse, feats))
    c = fine.coords
    expected = dense[0, :, c[:, 0], c[:, 1], c[:, 2]].T
    assert torch.allclose(out, expected, atol=1e-5)


def test_children_clip_to_odd_dims():
    coarse = SparseGrid((2, 2, 1), torch.tensor([[1, 1, 0]]))
    fine = coarse.children(fine_dims=(3, 3, 1))
    assert len(fine) == 1  # only (2, 2, 0) fits
    assert fine.coords.tolist() == [[2, 2, 0]]


def test_coarsen_children_round_trip():
    rng = np.random.default_rng(4)
    dims = (8, 8, 4)
    occ = rng.random(dims) < 0.3
    fine = SparseGrid.from_numpy(dims, np.argwhere(occ))
    coarse = fine.coarsen()
    cover = coarse.children(fine_dims=dims)
    # every fine cell is among the children of its parent
    _, valid = cover.lookup(fine.coords)
    assert bool(valid.all())
    assert len(cover) <= 8 * len(coarse)


def test_up_plan_rejects_orphan_cells():
    coarse = SparseGrid((2, 2, 2), torch.tensor([[0, 0, 0]]))
    orphan = SparseGrid((4, 4, 4), torch.tensor([[3, 3, 3]]))
    with pytest.raises(ValueError):
        up_plan(coarse, orphan)


def test_empty_grid_paths():
    grid = SparseGrid((4, 4, 4), torch.zeros((0, 3), dtype=torch.int64))
    conv = SparseConv3(3, 2)
    out = conv(torch.zeros((0, 3)), conv_plan(grid))
    assert out.shape == (0, 2)
    idx, valid = grid.lookup(torch.tensor([[0, 0, 0]]))
    assert not valid.any()
