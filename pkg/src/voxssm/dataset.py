"""Seeded synthetic datasets: complete training phantoms and defective test cases."""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from scipy import ndimage

from .errors import SpecError
from .registration import SimilarityTransform, rotation_from_axis_angle, warp
from .volume.grid import VoxelGrid
from .volume.phantom import (
    DefectSpec,
    PhantomSpec,
    apply_defect,
    make_phantom,
    removed_fraction,
    shell_point,
    size_for_fraction,
)


# Thin, mildly varying, cranium-like shells: an open base and a thicker
# frontal wall break the symmetries that confuse shape registration.
DEFAULT_PHANTOM = PhantomSpec(amplitude=0.02, base_level=-0.4, face_thickness=3.0)


@dataclass(frozen=True)
class PoseJitter:
    """Bounds of the random similarity pose given to each generated phantom."""

    max_rotation_deg: float = 5.0
    max_translation_mm: float = 2.0
    max_log_scale: float = 0.03

    def sample(self, rng: np.random.Generator, spec: PhantomSpec) -> SimilarityTransform:
        axis = rng.standard_normal(3)
        angle = rng.uniform(0.0, self.max_rotation_deg)
        direction = rng.standard_normal(3)
        direction /= np.linalg.norm(direction)
        shift = direction * self.max_translation_mm * rng.uniform(0.0, 1.0) ** (1 / 3)
        scale = float(np.exp(rng.uniform(-self.max_log_scale, self.max_log_scale)))
        return SimilarityTransform(scale, rotation_from_axis_angle(axis, angle), shift, spec.geometry())

    @classmethod
    def from_dict(cls, d: dict | None) -> PoseJitter:
        d = d or {}
        return cls(
            float(d.get("max_rotation_deg", 5.0)),
            float(d.get("max_translation_mm", 2.0)),
            float(d.get("max_log_scale", 0.03)),
        )

    def to_dict(self) -> dict:
        return {
            "max_rotation_deg": self.max_rotation_deg,
            "max_translation_mm": self.max_translation_mm,
            "max_log_scale": self.max_log_scale,
        }


def posed_phantom(spec: PhantomSpec, pose: SimilarityTransform | None) -> VoxelGrid:
    grid = make_phantom(spec)
    if pose is None:
        return grid
    return warp(grid, pose)


@dataclass
class TestCase:
    case_id: str
    complete: VoxelGrid
    defective: VoxelGrid
    implant: VoxelGrid
    defect: DefectSpec
    phantom: PhantomSpec
    pose: SimilarityTransform | None
    requested_fraction: float | None
    achieved_fraction: float

    def manifest(self) -> dict:
        return {
            "case_id": self.case_id,
            "phantom": self.phantom.to_dict(),
            "pose": self.pose.to_dict() if self.pose is not None else None,
            "defect": self.defect.to_dict(),
            "requested_fraction": self.requested_fraction,
            "achieved_fraction": self.achieved_fraction,
        }


MULTI_SEPARATION_DEG = 100.0


def defect_directions(
    rng: np.random.Generator, count: int, min_separation_deg: float = 70.0, max_restarts: int = 1000
) -> list[np.ndarray]:
    """Random directions with z >= 0.35, pairwise at least ``min_separation_deg`` apart.

    An early pick can leave no room for the rest, so the whole set is redrawn
    after repeated misses.
    """
    cos_sep = np.cos(np.radians(min_separation_deg))
    for _ in range(max_restarts):
        out: list[np.ndarray] = []
        misses = 0
        while len(out) < count and misses < 200:
            v = rng.standard_normal(3)
            v /= np.linalg.norm(v)
            if v[2] >= 0.35 and all(float(v @ w) < cos_sep for w in out):
                out.append(v)
            else:
                misses += 1
        if len(out) == count:
            return out
    raise SpecError(f"cannot place {count} defect directions {min_separation_deg} degrees apart")


def carve(
    complete: VoxelGrid,
    spec: PhantomSpec,
    pose: SimilarityTransform | None,
    kind: str,
    fraction: float,
    directions: list[np.ndarray],
) -> tuple[DefectSpec, VoxelGrid, VoxelGrid, float]:
    centers = [shell_point(spec, d) for d in directions]
    if pose is not None:
        centers = [pose.apply(c) for c in centers]
    if kind in ("sphere", "box") and len(centers) != 1:
        raise ValueError(f"'{kind}' defects take a single direction")
    defect = size_for_fraction(complete, kind, centers, fraction)
    defective, implant = apply_defect(complete, defect)
    if kind == "multi":
        _, pieces = ndimage.label(implant.mask, structure=np.ones((3, 3, 3), dtype=bool))
        if pieces != len(centers):
            raise SpecError(f"multi defect of {len(centers)} spheres produced {pieces} implant pieces; spread them further")
    return defect, defective, implant, removed_fraction(complete, defect)


def make_test_case(
    case_id: str,
    spec: PhantomSpec,
    pose: SimilarityTransform | None,
    kind: str,
    fraction: float,
    directions: list[np.ndarray],
) -> TestCase:
    complete = posed_phantom(spec, pose)
    defect, defective, implant, achieved = carve(complete, spec, pose, kind, fraction, directions)
    return TestCase(case_id, complete, defective, implant, defect, spec, pose, fraction, achieved)


def case_from_defect(
    case_id: str, spec: PhantomSpec, pose: SimilarityTransform | None, defect: DefectSpec
) -> TestCase:
    """Test case with an explicit defect, given in the posed phantom's world frame."""
    complete = posed_phantom(spec, pose)
    defective, implant = apply_defect(complete, defect)
    return TestCase(case_id, complete, defective, implant, defect, spec, pose, None,
                    removed_fraction(complete, defect))


@dataclass
class Dataset:
    training: list[tuple[str, VoxelGrid]]
    training_specs: list[PhantomSpec]
    training_poses: list[SimilarityTransform | None]
    cases: list[TestCase]
    config: dict = field(default_factory=dict)

    def manifest(self) -> dict:
        return {
            "config": self.config,
            "training": [
                {"id": name, "phantom": s.to_dict(), "pose": p.to_dict() if p is not None else None}
                for (name, _), s, p in zip(self.training, self.training_specs, self.training_poses)
            ],
            "cases": [c.manifest() for c in self.cases],
        }


def build_dataset(
    base: PhantomSpec,
    n_train: int,
    n_test: int,
    seed: int = 0,
    defect_kind: str = "sphere",
    fraction: float | tuple[float, float] = (0.1, 0.3),
    n_defects: int = 1,
    jitter: PoseJitter | None = PoseJitter(),
    pose_reference: bool = False,
) -> Dataset:
    """Deterministic synthetic dataset.

    Training member 0 is left unposed (unless ``pose_reference``) so it can
    serve as the reference shape. ``fraction`` is a fixed defect share or a
    (low, high) range sampled per case. ``multi`` defects split the share
    across ``n_defects`` spheres.
    """
    rng = np.random.default_rng(seed)
    child = rng.integers(0, 2**31 - 1, size=n_train + n_test)
    training, specs, poses = [], [], []
    for i in range(n_train):
        spec = replace(base, seed=int(child[i]))
        pose = None
        if jitter is not None and (i > 0 or pose_reference):
            pose = jitter.sample(rng, spec)
        training.append((f"train_{i:03d}", posed_phantom(spec, pose)))
        specs.append(spec)
        poses.append(pose)

    cases = []
    for j in range(n_test):
        spec = replace(base, seed=int(child[n_train + j]))
        pose = jitter.sample(rng, spec) if jitter is not None else None
        frac = fraction if np.isscalar(fraction) else float(rng.uniform(*fraction))
        count = n_defects if defect_kind == "multi" else 1
        dirs = defect_directions(rng, count, MULTI_SEPARATION_DEG if count > 1 else 70.0)
        cases.append(make_test_case(f"case_{j:03d}", spec, pose, defect_kind, frac, dirs))

    config = {
        "base_phantom": base.to_dict(),
        "n_train": n_train,
        "n_test": n_test,
        "seed": seed,
        "defect_kind": defect_kind,
        "fraction": list(fraction) if not np.isscalar(fraction) else fraction,
        "n_defects": n_defects,
        "pose_jitter": jitter.to_dict() if jitter is not None else None,
    }
    return Dataset(training, specs, poses, cases, config)
