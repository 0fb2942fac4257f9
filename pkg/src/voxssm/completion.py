"""Shape completion by template subtraction or SSM reconstruction.

Every method follows the same skeleton: register the defective shape into
reference space, obtain a complete shape there, take the clamped
difference as the implant, and map the completed shape back through the
inverse transform.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import ShapeError
from .registration import (
    RegistrationConfig,
    RegistrationReport,
    SimilarityTransform,
    estimate_transform,
    inverse,
    warp,
)
from .ssm import ShapeModel, WeightVector, mean_shape, project, reconstruct
from .volume.grid import VoxelGrid, threshold_grid, volume_add, volume_subtract

METHODS = ("template-single", "template-mean", "ssm", "ssm-external")


@dataclass(frozen=True)
class Template:
    grid: VoxelGrid
    provenance: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.grid.binary:
            raise ValueError("templates must be binary")


def make_template(
    source: VoxelGrid | Sequence[VoxelGrid],
    threshold: float = 0.5,
    ids: Sequence[str] | None = None,
) -> Template:
    """Single-shape template (passed through) or mean of K shapes kept where mean >= threshold."""
    if isinstance(source, VoxelGrid):
        grid = source if source.binary else threshold_grid(source, threshold, inclusive=True)
        return Template(grid, {"kind": "single", "ids": list(ids or [])})
    if len(source) == 0:
        raise ValueError("make_template needs at least one shape")
    if not 0.0 < threshold < 1.0:
        raise ValueError(f"threshold must lie in (0, 1), got {threshold}")
    mean = mean_shape(source)
    grid = threshold_grid(mean, threshold, inclusive=True)
    kind = "single" if len(source) == 1 else "mean"
    return Template(grid, {"kind": kind, "ids": list(ids or []), "k": len(source), "threshold": threshold})


@dataclass
class CompletionResult:
    completed_reference_space: VoxelGrid
    implant_reference_space: VoxelGrid
    completed_original_space: VoxelGrid
    implant_original_space: VoxelGrid
    warped_input: VoxelGrid
    transform: SimilarityTransform
    method: str
    registration: RegistrationReport | None = None
    weights: WeightVector | None = None

    def manifest(self) -> dict:
        out = {
            "method": self.method,
            "transform": self.transform.to_dict(),
            "voxels": {
                "warped_input": self.warped_input.count(),
                "implant_reference_space": self.implant_reference_space.count(),
                "completed_reference_space": self.completed_reference_space.count(),
                "completed_original_space": self.completed_original_space.count(),
                "implant_original_space": self.implant_original_space.count(),
            },
        }
        if self.registration is not None:
            out["registration"] = {
                "residual_mm": self.registration.residual,
                "iterations": self.registration.iterations,
                "converged": self.registration.converged,
            }
        if self.weights is not None:
            out["weights"] = self.weights.to_dict()
        return out


def _finish(
    defective: VoxelGrid,
    warped: VoxelGrid,
    complete_ref: VoxelGrid,
    report: RegistrationReport,
    method: str,
    weights: WeightVector | None = None,
) -> CompletionResult:
    implant = volume_subtract(complete_ref, warped)
    completed = volume_add(implant, warped)
    back = inverse(report.transform, defective.geometry)
    completed_orig = warp(completed, back)
    implant_orig = volume_subtract(warp(implant, back), defective)
    return CompletionResult(
        completed_reference_space=completed,
        implant_reference_space=implant,
        completed_original_space=completed_orig,
        implant_original_space=implant_orig,
        warped_input=warped,
        transform=report.transform,
        method=method,
        registration=report,
        weights=weights,
    )


def _check_defective(defective: VoxelGrid) -> VoxelGrid:
    if not defective.binary:
        defective = threshold_grid(defective)
    return defective


def complete_by_template(
    defective: VoxelGrid,
    template: Template,
    config: RegistrationConfig | None = None,
    method: str | None = None,
) -> CompletionResult:
    """Implant = template minus the registered defective shape."""
    defective = _check_defective(defective)
    report = estimate_transform(defective, template.grid, config)
    warped = warp(defective, report.transform)
    if method is None:
        method = "template-mean" if template.provenance.get("kind") == "mean" else "template-single"
    return _finish(defective, warped, template.grid, report, method)


def complete_by_ssm(
    defective: VoxelGrid,
    model: ShapeModel,
    external: VoxelGrid | None = None,
    external_space: str = "original",
    registration_target: VoxelGrid | None = None,
    config: RegistrationConfig | None = None,
    minmax_weights: bool = False,
) -> CompletionResult:
    """Complete via ``mean + weights . modes`` binarised at 0.5.

    Weights come from the registered defective shape itself, or from an
    externally completed version of it (``external``, given either in the
    defective shape's original space or already in reference space).
    Registration targets the binarised mean unless ``registration_target``
    is supplied. ``minmax_weights`` reconstructs with min-max rescaled
    weights used verbatim.
    """
    defective = _check_defective(defective)
    target = registration_target
    if target is None:
        target = threshold_grid(model.mean, 0.5, inclusive=True)
    if not target.geometry.same_lattice(model.reference):
        raise ShapeError("registration target must live in the model's reference space")
    report = estimate_transform(defective, target, config)
    t = report.transform
    warped = warp(defective, t)

    if external is None:
        source = warped
        method = "ssm"
    else:
        if external_space == "original":
            if external.dims != defective.dims:
                raise ShapeError(
                    f"external completion dims {external.dims} differ from the defective input {defective.dims}"
                )
            source = warp(external, t)
        elif external_space == "reference":
            if external.dims != model.reference.dims:
                raise ShapeError(
                    f"external completion dims {external.dims} differ from the reference {model.reference.dims}"
                )
            source = external
        else:
            raise ValueError(f"external_space must be 'original' or 'reference', got {external_space!r}")
        method = "ssm-external"

    weights = project(model, source, rescale=minmax_weights)
    complete = reconstruct(model, weights, binarize=True, literal=minmax_weights)
    return _finish(defective, warped, complete, report, method, weights)


def implant_fraction(result: CompletionResult, reference: VoxelGrid) -> float:
    """Implant foreground as a share of ``reference`` foreground."""
    total = reference.count()
    return result.implant_reference_space.count() / total if total else float(np.nan)
