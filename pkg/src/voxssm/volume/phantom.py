"""Synthetic skull-like phantoms (perturbed hollow ellipsoids) and defect carving."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from ..errors import SpecError
from .grid import GridGeometry, VoxelGrid

DEFECT_KINDS = ("sphere", "box", "multi")


@dataclass(frozen=True)
class PhantomSpec:
    """Perturbed ellipsoidal shell centred on the world origin.

    ``radii`` are outer semi-axes in mm, ``thickness`` is the shell wall in
    mm and ``amplitude`` scales the smooth radial perturbation as a fraction
    of the local radius. ``seed`` selects the perturbation field.

    Two optional features make the shell less symmetric, like a cranium:
    ``base_level`` opens the shell below ``z = base_level * radii[2]``, and
    ``face_thickness`` thickens the wall inwards on the lower +x side.
    """

    dims: tuple[int, int, int] = (64, 64, 64)
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    radii: tuple[float, float, float] = (26.0, 23.0, 20.0)
    thickness: float = 4.0
    seed: int = 0
    amplitude: float = 0.05
    base_level: float | None = None
    face_thickness: float = 0.0

    def geometry(self) -> GridGeometry:
        origin = tuple(-0.5 * (d - 1) * s for d, s in zip(self.dims, self.spacing))
        return GridGeometry(tuple(self.dims), tuple(self.spacing), origin)

    def validate(self) -> None:
        if len(self.radii) != 3 or min(self.radii) <= 0:
            raise SpecError(f"radii must be 3 positive values, got {self.radii}")
        if not 0.0 <= self.amplitude <= 0.3:
            raise SpecError(f"amplitude must lie in [0, 0.3], got {self.amplitude}")
        if self.thickness + self.face_thickness >= min(self.radii):
            raise SpecError("shell thickness must be smaller than the smallest semi-axis")
        if self.face_thickness < 0:
            raise SpecError("face thickness must be non-negative")
        if self.base_level is not None and not -1.0 < self.base_level < 1.0:
            raise SpecError("base level must lie in (-1, 1)")
        if self.thickness < max(self.spacing):
            raise SpecError(
                f"shell thickness {self.thickness} mm is below one voxel ({max(self.spacing)} mm); "
                "the voxelised shell would be degenerate"
            )
        geom = self.geometry()
        for a in range(3):
            half_extent = 0.5 * (geom.dims[a] - 1) * geom.spacing[a]
            if self.radii[a] * (1.0 + self.amplitude) > half_extent:
                raise SpecError(f"phantom does not fit the grid along axis {a}")

    def to_dict(self) -> dict:
        return {
            "dims": list(self.dims),
            "spacing": list(self.spacing),
            "radii": list(self.radii),
            "thickness": self.thickness,
            "seed": self.seed,
            "amplitude": self.amplitude,
            "base_level": self.base_level,
            "face_thickness": self.face_thickness,
        }

    @classmethod
    def from_dict(cls, d: dict) -> PhantomSpec:
        return cls(
            dims=tuple(d.get("dims", (64, 64, 64))),
            spacing=tuple(d.get("spacing", (1.0, 1.0, 1.0))),
            radii=tuple(d.get("radii", (26.0, 23.0, 20.0))),
            thickness=float(d.get("thickness", 4.0)),
            seed=int(d.get("seed", 0)),
            amplitude=float(d.get("amplitude", 0.05)),
            base_level=None if d.get("base_level") is None else float(d["base_level"]),
            face_thickness=float(d.get("face_thickness", 0.0)),
        )


@dataclass(frozen=True)
class DefectSpec:
    """Region removed from a shape.

    ``sphere`` and ``box`` take a single centre; ``multi`` is a union of
    spheres. ``sizes`` are sphere radii or box edge lengths in mm.
    """

    kind: str
    centers: Sequence[Sequence[float]]
    sizes: Sequence[float] = field(default_factory=list)

    def validate(self, spacing: Sequence[float]) -> None:
        if self.kind not in DEFECT_KINDS:
            raise SpecError(f"unknown defect kind '{self.kind}'")
        if len(self.centers) < 1 or len(self.centers) != len(self.sizes):
            raise SpecError("defect needs at least one centre and one size per centre")
        if self.kind in ("sphere", "box") and len(self.centers) != 1:
            raise SpecError(f"'{self.kind}' defects take exactly one centre; use 'multi'")
        for c in self.centers:
            if len(c) != 3:
                raise SpecError("defect centres must be 3D world coordinates")
        for s in self.sizes:
            if s < min(spacing):
                raise SpecError(f"defect size {s} mm is smaller than one voxel")

    @property
    def count(self) -> int:
        return len(self.centers)

    def to_dict(self) -> dict:
        return {
            "kind": self.kind,
            "centers": [[float(v) for v in c] for c in self.centers],
            "sizes": [float(s) for s in self.sizes],
        }

    @classmethod
    def from_dict(cls, d: dict) -> DefectSpec:
        return cls(d["kind"], [tuple(c) for c in d["centers"]], list(d["sizes"]))


def _fibonacci_sphere(n: int = 2048) -> np.ndarray:
    k = np.arange(n) + 0.5
    phi = np.arccos(1 - 2 * k / n)
    theta = np.pi * (1 + 5**0.5) * k
    return np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], axis=-1)


_EXPONENTS = [
    (i, j, k)
    for deg in (1, 2, 3)
    for i in range(deg + 1)
    for j in range(deg + 1 - i)
    for k in [deg - i - j]
]


def _monomials(u: np.ndarray) -> np.ndarray:
    return np.stack([u[..., 0] ** i * u[..., 1] ** j * u[..., 2] ** k for i, j, k in _EXPONENTS], axis=-1)


def perturbation_field(seed: int):
    """Smooth random function on the unit sphere with max |f| = 1.

    Built from monomials of degree 1 to 3 in the direction components.
    """
    rng = np.random.default_rng(seed)
    degrees = np.array([sum(e) for e in _EXPONENTS], dtype=float)
    coeffs = rng.standard_normal(len(_EXPONENTS)) / degrees
    norm = np.abs(_monomials(_fibonacci_sphere()) @ coeffs).max()
    coeffs = coeffs / norm

    def f(u: np.ndarray) -> np.ndarray:
        return _monomials(u) @ coeffs

    return f


def _radial_factor(spec: PhantomSpec, u: np.ndarray) -> np.ndarray:
    if spec.amplitude == 0:
        return np.ones(u.shape[:-1])
    return 1.0 + spec.amplitude * perturbation_field(spec.seed)(u)


def _face_weight(u: np.ndarray) -> np.ndarray:
    """Smooth 0..1 weight peaking on the front (+x), lower (-z) part of the shell."""
    front = np.clip((u[..., 0] - 0.3) / 0.4, 0.0, 1.0)
    low = np.clip((0.3 - u[..., 2]) / 0.4, 0.0, 1.0)
    return front * low


def make_phantom(spec: PhantomSpec) -> VoxelGrid:
    """Voxelise the shell described by ``spec``; deterministic per seed."""
    spec.validate()
    geom = spec.geometry()
    p = geom.world_coordinates()
    r = np.linalg.norm(p, axis=-1)
    u = p / np.where(r > 0, r, 1.0)[..., None]
    outer = np.asarray(spec.radii, dtype=float)
    wall = np.full(geom.dims, spec.thickness)
    if spec.face_thickness > 0:
        wall = wall + spec.face_thickness * _face_weight(u)
    inner = outer - wall[..., None]
    rho_out = np.linalg.norm(p / outer, axis=-1)
    rho_in = np.linalg.norm(p / inner, axis=-1)
    g = _radial_factor(spec, u)
    shell = (rho_out <= g) & (rho_in > g)
    if spec.base_level is not None:
        shell &= p[..., 2] >= spec.base_level * spec.radii[2]
    return VoxelGrid(shell.astype(np.uint8), geom.spacing, geom.origin)


def shell_point(spec: PhantomSpec, direction: Sequence[float]) -> np.ndarray:
    """World point on the mid-surface of the shell along ``direction``."""
    u = np.asarray(direction, dtype=float)
    u = u / np.linalg.norm(u)
    mid = np.asarray(spec.radii, dtype=float) - 0.5 * spec.thickness
    g = float(_radial_factor(spec, u[None, :])[0])
    return u * g / np.linalg.norm(u / mid)


def defect_region(geometry: GridGeometry, spec: DefectSpec) -> np.ndarray:
    """Boolean mask of the voxels covered by the defect."""
    spec.validate(geometry.spacing)
    p = geometry.world_coordinates()
    region = np.zeros(geometry.dims, dtype=bool)
    for center, size in zip(spec.centers, spec.sizes):
        d = p - np.asarray(center, dtype=float)
        if spec.kind == "box":
            region |= np.all(np.abs(d) <= 0.5 * size, axis=-1)
        else:
            region |= np.einsum("...i,...i->...", d, d) <= size * size
    return region


def apply_defect(grid: VoxelGrid, spec: DefectSpec) -> tuple[VoxelGrid, VoxelGrid]:
    """Split ``grid`` into (defective shape, ground-truth implant).

    The two outputs partition the foreground of ``grid`` exactly.
    """
    spec.validate(grid.spacing)
    shape = grid.mask
    region = np.zeros(grid.dims, dtype=bool)
    for center, size in zip(spec.centers, spec.sizes):
        kind = "box" if spec.kind == "box" else "sphere"
        part = defect_region(grid.geometry, DefectSpec(kind, [center], [size]))
        if not np.any(part & shape):
            raise SpecError(f"defect at {tuple(center)} does not intersect the shape")
        region |= part
    implant = shape & region
    defective = shape & ~region
    return VoxelGrid.like(defective.astype(np.uint8), grid), VoxelGrid.like(implant.astype(np.uint8), grid)


def removed_fraction(grid: VoxelGrid, spec: DefectSpec) -> float:
    region = defect_region(grid.geometry, spec)
    total = grid.count()
    return float(np.count_nonzero(region & grid.mask)) / total if total else 0.0


def size_for_fraction(
    grid: VoxelGrid,
    kind: str,
    centers: Sequence[Sequence[float]],
    fraction: float,
    iterations: int = 40,
) -> DefectSpec:
    """Bisect a common defect size so the removed share of ``grid`` matches ``fraction``."""
    if not 0.0 < fraction < 1.0:
        raise SpecError(f"defect fraction must lie in (0, 1), got {fraction}")
    geom = grid.geometry
    lo = min(geom.spacing)
    hi = float(np.linalg.norm(np.asarray(geom.dims) * np.asarray(geom.spacing)))
    if kind == "box":
        hi *= 2.0
    n = len(centers)

    def build(size: float) -> DefectSpec:
        return DefectSpec(kind, [tuple(c) for c in centers], [size] * n)

    for _ in range(iterations):
        mid = 0.5 * (lo + hi)
        if removed_fraction(grid, build(mid)) < fraction:
            lo = mid
        else:
            hi = mid
    # Voxel counts are step functions of size; keep whichever side lands closer.
    best = min((lo, hi), key=lambda s: abs(removed_fraction(grid, build(s)) - fraction))
    return build(best)

