"""scenediff: latent-diffusion generation of semantically labeled voxel scenes."""

__version__ = "0.1.0"

from .scenes import (  # noqa: F401
    DenseLatent,
    GridSpec,
    HierarchyTargets,
    SparseLatent,
    VoxelScene,
    downsample_scene,
    pack_dense,
    read_scene,
    unpack_sparse,
    voxelize,
    write_scene,
)
