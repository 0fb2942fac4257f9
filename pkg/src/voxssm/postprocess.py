"""Turn a raw subtraction result into a clean implant.

Automatic counterpart of the manual cleanup: optional erase mask, median
smoothing, morphological opening, connected-component selection.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import EmptyImplantError
from .volume.grid import VoxelGrid, check_compatible

CONNECTIVITY_RANK = {6: 1, 18: 2, 26: 3}
SELECTIONS = ("auto", "largest", "max-overlap")


@dataclass
class PostprocessConfig:
    median_kernel: int = 3
    opening_radius: int = 1
    connectivity: int = 26
    selection: str = "auto"
    erase_mask: VoxelGrid | None = None

    def __post_init__(self):
        if self.median_kernel < 1 or self.median_kernel % 2 == 0:
            raise ValueError(f"median kernel must be odd and >= 1, got {self.median_kernel}")
        if self.opening_radius < 0:
            raise ValueError("opening radius must be >= 0")
        if self.connectivity not in CONNECTIVITY_RANK:
            raise ValueError(f"connectivity must be 6, 18 or 26, got {self.connectivity}")
        if self.selection not in SELECTIONS:
            raise ValueError(f"selection must be one of {SELECTIONS}")

    def to_dict(self) -> dict:
        return {
            "median_kernel": self.median_kernel,
            "opening_radius": self.opening_radius,
            "connectivity": self.connectivity,
            "selection": self.selection,
            "erase_mask": self.erase_mask is not None,
        }


def median_filter(grid: VoxelGrid, kernel: int = 3) -> VoxelGrid:
    """Median over a ``kernel``-cubed window, zero padded at the borders."""
    if kernel < 1 or kernel % 2 == 0:
        raise ValueError(f"median kernel must be odd and >= 1, got {kernel}")
    if kernel == 1:
        return grid
    if grid.binary:
        # Binary median is a majority vote; counting is far cheaper than sorting.
        counts = ndimage.uniform_filter(
            grid.data.astype(np.float64), size=kernel, mode="constant", cval=0.0
        ) * kernel**3
        out = (np.rint(counts) > kernel**3 // 2).astype(np.uint8)
    else:
        out = ndimage.median_filter(grid.data, size=kernel, mode="constant", cval=0.0)
    return grid.with_data(out)


def ball(radius: int) -> np.ndarray:
    r = int(radius)
    ax = np.arange(-r, r + 1)
    x, y, z = np.meshgrid(ax, ax, ax, indexing="ij")
    return x * x + y * y + z * z <= r * r


def morphological_opening(grid: VoxelGrid, radius: int = 1) -> VoxelGrid:
    """Erosion then dilation with a discrete ball; radius 0 is the identity."""
    if radius < 0:
        raise ValueError("opening radius must be >= 0")
    if radius == 0:
        return grid
    se = ball(radius)
    eroded = ndimage.binary_erosion(grid.mask, structure=se, border_value=0)
    opened = ndimage.binary_dilation(eroded, structure=se)
    return grid.with_data(opened.astype(np.uint8))


@dataclass
class Components:
    labels: np.ndarray  # 0 = background, 1..n ordered by size descending
    sizes: list[int]

    @property
    def count(self) -> int:
        return len(self.sizes)

    def mask(self, label: int) -> np.ndarray:
        return self.labels == label


def connected_components(grid: VoxelGrid, connectivity: int = 26) -> Components:
    """Label foreground components, largest first; equal sizes ordered by first voxel (C order)."""
    if connectivity not in CONNECTIVITY_RANK:
        raise ValueError(f"connectivity must be 6, 18 or 26, got {connectivity}")
    structure = ndimage.generate_binary_structure(3, CONNECTIVITY_RANK[connectivity])
    raw, n = ndimage.label(grid.mask, structure=structure)
    if n == 0:
        return Components(np.zeros(grid.dims, dtype=np.int32), [])
    # ndimage numbers components in raster order of their first voxel.
    sizes = np.bincount(raw.ravel(), minlength=n + 1)[1:]
    order = sorted(range(n), key=lambda k: (-int(sizes[k]), k))
    remap = np.zeros(n + 1, dtype=np.int32)
    for new, old in enumerate(order, start=1):
        remap[old + 1] = new
    return Components(remap[raw], [int(sizes[k]) for k in order])


def _select(comps: Components, hint: np.ndarray | None, selection: str) -> np.ndarray:
    if selection == "auto":
        selection = "max-overlap" if hint is not None else "largest"
    if selection == "largest" or hint is None:
        return comps.mask(1)
    # One winner per connected piece of the hint, so multi-defect cases keep every implant.
    hint_labels, n_hint = ndimage.label(hint, structure=np.ones((3, 3, 3), dtype=bool))
    keep = np.zeros(comps.labels.shape, dtype=bool)
    for h in range(1, n_hint + 1):
        under = comps.labels[hint_labels == h]
        under = under[under > 0]
        if under.size == 0:
            continue
        counts = np.bincount(under, minlength=comps.count + 1)
        keep |= comps.labels == int(np.argmax(counts))
    return keep


def extract_implant(
    raw: VoxelGrid,
    config: PostprocessConfig | None = None,
    defect_hint: VoxelGrid | None = None,
    manifest: list | None = None,
) -> VoxelGrid:
    """Erase mask, median, opening, component selection.

    Per-stage voxel counts are appended to ``manifest`` when given. Raises
    :class:`EmptyImplantError` naming the stage that left nothing behind.
    """
    config = config or PostprocessConfig()
    log = manifest if manifest is not None else []
    grid = raw if raw.binary else raw.binarize()
    log.append({"stage": "input", "voxels": grid.count()})
    if grid.count() == 0:
        raise EmptyImplantError("input")

    if config.erase_mask is not None:
        check_compatible(grid, config.erase_mask)
        grid = grid.with_data((grid.mask & ~config.erase_mask.mask).astype(np.uint8))
        log.append({"stage": "erase", "voxels": grid.count()})
        if grid.count() == 0:
            raise EmptyImplantError("erase")
    after_erase = grid.mask

    grid = median_filter(grid, config.median_kernel)
    log.append({"stage": "median", "kernel": config.median_kernel, "voxels": grid.count()})
    if grid.count() == 0:
        raise EmptyImplantError("median")

    grid = morphological_opening(grid, config.opening_radius)
    log.append({"stage": "opening", "radius": config.opening_radius, "voxels": grid.count()})
    if grid.count() == 0:
        raise EmptyImplantError("opening")

    comps = connected_components(grid, config.connectivity)
    hint = None
    if defect_hint is not None:
        check_compatible(grid, defect_hint)
        hint = defect_hint.mask
    keep = _select(comps, hint, config.selection)
    # Smoothing may grow foreground; never emit voxels the raw subtraction lacked.
    keep &= after_erase
    log.append({"stage": "components", "connectivity": config.connectivity,
                "components": comps.count, "voxels": int(keep.sum())})
    if not keep.any():
        raise EmptyImplantError("components")
    return grid.with_data(keep.astype(np.uint8))
