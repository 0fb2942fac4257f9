"""Binary / fractional voxel grids and the volume algebra used for completion."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from ..errors import ShapeError


@dataclass(frozen=True)
class GridGeometry:
    """Voxel lattice placement: ``world = origin + index * spacing``."""

    dims: tuple[int, int, int]
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)

    def __post_init__(self):
        dims = tuple(int(d) for d in self.dims)
        spacing = tuple(float(s) for s in self.spacing)
        origin = tuple(float(o) for o in self.origin)
        if len(dims) != 3 or len(spacing) != 3 or len(origin) != 3:
            raise ShapeError("geometry needs exactly 3 dims, spacings and origin coordinates")
        if min(dims) < 1:
            raise ShapeError(f"dims must be >= 1, got {dims}")
        if min(spacing) <= 0:
            raise ShapeError(f"spacing must be > 0, got {spacing}")
        object.__setattr__(self, "dims", dims)
        object.__setattr__(self, "spacing", spacing)
        object.__setattr__(self, "origin", origin)

    @property
    def size(self) -> int:
        return int(np.prod(self.dims))

    def index_to_world(self, idx: np.ndarray) -> np.ndarray:
        return np.asarray(self.origin) + np.asarray(idx, dtype=float) * np.asarray(self.spacing)

    def world_to_index(self, pts: np.ndarray) -> np.ndarray:
        return (np.asarray(pts, dtype=float) - np.asarray(self.origin)) / np.asarray(self.spacing)

    def world_coordinates(self) -> np.ndarray:
        """World position of every voxel centre, shape ``dims + (3,)``."""
        axes = [self.origin[a] + self.spacing[a] * np.arange(self.dims[a]) for a in range(3)]
        return np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)

    def to_dict(self) -> dict:
        return {"dims": list(self.dims), "spacing": list(self.spacing), "origin": list(self.origin)}

    @classmethod
    def from_dict(cls, d: dict) -> GridGeometry:
        return cls(tuple(d["dims"]), tuple(d["spacing"]), tuple(d["origin"]))

    def same_lattice(self, other: GridGeometry, atol: float = 1e-9) -> bool:
        return (
            self.dims == other.dims
            and np.allclose(self.spacing, other.spacing, rtol=0, atol=atol)
            and np.allclose(self.origin, other.origin, rtol=0, atol=atol)
        )


class VoxelGrid:
    """Immutable scalar field on a 3D lattice.

    Binary grids hold ``uint8`` data restricted to {0, 1}; anything else
    (mean shapes, resampled intermediates) is stored as ``float64``.
    Array axis ``a`` corresponds to NRRD axis ``a`` (first axis fastest on disk).
    """

    __slots__ = ("_data", "geometry")

    def __init__(
        self,
        data: np.ndarray,
        spacing: Sequence[float] = (1.0, 1.0, 1.0),
        origin: Sequence[float] = (0.0, 0.0, 0.0),
    ):
        arr = np.asarray(data)
        if arr.ndim != 3:
            raise ShapeError(f"voxel data must be 3D, got {arr.ndim}D")
        if arr.dtype == np.bool_:
            arr = arr.astype(np.uint8)
        if arr.dtype == np.uint8:
            if arr.size and arr.max() > 1:
                raise ValueError("binary grid data must contain only 0 and 1")
            arr = np.array(arr, dtype=np.uint8, copy=True)
        else:
            arr = np.array(arr, dtype=np.float64, copy=True)
        arr.setflags(write=False)
        self._data = arr
        self.geometry = GridGeometry(arr.shape, tuple(spacing), tuple(origin))

    @classmethod
    def zeros(cls, geometry: GridGeometry, binary: bool = True) -> VoxelGrid:
        dtype = np.uint8 if binary else np.float64
        return cls(np.zeros(geometry.dims, dtype=dtype), geometry.spacing, geometry.origin)

    @classmethod
    def like(cls, data: np.ndarray, template: VoxelGrid) -> VoxelGrid:
        return cls(data, template.spacing, template.origin)

    @property
    def data(self) -> np.ndarray:
        return self._data

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.geometry.dims

    @property
    def spacing(self) -> tuple[float, float, float]:
        return self.geometry.spacing

    @property
    def origin(self) -> tuple[float, float, float]:
        return self.geometry.origin

    @property
    def binary(self) -> bool:
        return self._data.dtype == np.uint8

    @property
    def mask(self) -> np.ndarray:
        """Boolean foreground (value > 0.5)."""
        return self._data > 0.5

    def count(self) -> int:
        return int(np.count_nonzero(self.mask))

    def binarize(self, threshold: float = 0.5) -> VoxelGrid:
        """Values strictly above ``threshold`` become 1 (the load-time rule)."""
        return VoxelGrid.like((self._data > threshold).astype(np.uint8), self)

    def with_data(self, data: np.ndarray) -> VoxelGrid:
        return VoxelGrid.like(data, self)

    def __eq__(self, other):
        if not isinstance(other, VoxelGrid):
            return NotImplemented
        return (
            self.geometry == other.geometry
            and self._data.dtype == other._data.dtype
            and np.array_equal(self._data, other._data)
        )

    __hash__ = None

    def __repr__(self):
        kind = "binary" if self.binary else "fractional"
        return f"VoxelGrid({kind}, dims={self.dims}, spacing={self.spacing}, origin={self.origin})"


def check_compatible(a: VoxelGrid, b: VoxelGrid) -> None:
    if a.dims != b.dims:
        raise ShapeError(f"dimension mismatch: {a.dims} vs {b.dims}")
    if not np.allclose(a.spacing, b.spacing, rtol=0, atol=1e-9):
        raise ShapeError(f"spacing mismatch: {a.spacing} vs {b.spacing}")


def volume_subtract(a: VoxelGrid, b: VoxelGrid) -> VoxelGrid:
    """Voxelwise ``max(a - b, 0)``; set difference for binary inputs."""
    check_compatible(a, b)
    if a.binary and b.binary:
        out = (a.data.astype(bool) & ~b.data.astype(bool)).astype(np.uint8)
    else:
        out = np.maximum(a.data.astype(float) - b.data.astype(float), 0.0)
    return VoxelGrid.like(out, a)


def volume_add(a: VoxelGrid, b: VoxelGrid) -> VoxelGrid:
    """Voxelwise ``min(a + b, 1)``; set union for binary inputs."""
    check_compatible(a, b)
    if a.binary and b.binary:
        out = (a.data.astype(bool) | b.data.astype(bool)).astype(np.uint8)
    else:
        out = np.minimum(a.data.astype(float) + b.data.astype(float), 1.0)
    return VoxelGrid.like(out, a)


def volume_intersect(a: VoxelGrid, b: VoxelGrid) -> VoxelGrid:
    check_compatible(a, b)
    return VoxelGrid.like((a.mask & b.mask).astype(np.uint8), a)


def threshold_grid(grid: VoxelGrid, threshold: float = 0.5, inclusive: bool = False) -> VoxelGrid:
    """Binarize with ``>`` (default) or ``>=`` at ``threshold``."""
    d = grid.data
    out = d >= threshold if inclusive else d > threshold
    return VoxelGrid.like(out.astype(np.uint8), grid)
