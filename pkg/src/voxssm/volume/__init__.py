"""Voxel grids, NRRD I/O, volume algebra and synthetic phantoms."""
from .grid import (
    GridGeometry,
    VoxelGrid,
    check_compatible,
    threshold_grid,
    volume_add,
    volume_intersect,
    volume_subtract,
)
from .nrrd import read_nrrd, write_nrrd
from .phantom import (
    DefectSpec,
    PhantomSpec,
    apply_defect,
    defect_region,
    make_phantom,
    removed_fraction,
    shell_point,
    size_for_fraction,
)

__all__ = [
    "DefectSpec",
    "GridGeometry",
    "PhantomSpec",
    "VoxelGrid",
    "apply_defect",
    "check_compatible",
    "defect_region",
    "make_phantom",
    "read_nrrd",
    "removed_fraction",
    "shell_point",
    "size_for_fraction",
    "threshold_grid",
    "volume_add",
    "volume_intersect",
    "volume_subtract",
    "write_nrrd",
]
