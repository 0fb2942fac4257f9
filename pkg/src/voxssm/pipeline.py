"""Glue shared by the CLI and the experiment tests: register, build, complete."""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence, TypeVar

from .completion import CompletionResult, Template, complete_by_ssm, complete_by_template, make_template
from .errors import SpecError
from .registration import RegistrationConfig, RegistrationReport, estimate_transform, warp
from .ssm import ShapeModel, fit_modes
from .volume.grid import VoxelGrid

T = TypeVar("T")
R = TypeVar("R")


def parallel_map(fn: Callable[[T], R], items: Sequence[T], jobs: int = 1) -> list[R]:
    """Order-preserving map with at most ``jobs`` workers."""
    if jobs <= 1 or len(items) <= 1:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, items))


def register_to_reference(
    reference: VoxelGrid,
    shapes: Sequence[VoxelGrid],
    config: RegistrationConfig | None = None,
    jobs: int = 1,
) -> list[tuple[VoxelGrid, RegistrationReport | None]]:
    """Warp every shape into the reference grid; the reference itself passes through."""

    def one(shape: VoxelGrid):
        if shape is reference or shape == reference:
            return reference, None
        report = estimate_transform(shape, reference, config)
        return warp(shape, report.transform), report

    return parallel_map(one, list(shapes), jobs)


@dataclass
class BuiltModel:
    model: ShapeModel
    templates: dict[str, Template]
    warped: list[tuple[str, VoxelGrid]]
    reports: dict[str, RegistrationReport | None] = field(default_factory=dict)


def parse_template_mode(mode: str, n_train: int) -> int:
    """``single`` -> 1, ``mean-K`` -> K, ``mean`` -> every training shape."""
    if mode == "single":
        return 1
    if mode == "mean":
        return n_train
    if mode.startswith("mean-"):
        try:
            k = int(mode[5:])
        except ValueError:
            raise SpecError(f"bad template mode {mode!r}") from None
        if not 1 <= k <= n_train:
            raise SpecError(f"template mode {mode!r} needs 1..{n_train} shapes")
        return k
    raise SpecError(f"template mode must be 'single', 'mean' or 'mean-K', got {mode!r}")


def build(
    reference_id: str,
    reference: VoxelGrid,
    training: Sequence[tuple[str, VoxelGrid]],
    num_modes: int,
    template_mode: str = "single",
    centered: bool = True,
    normalization: str = "unit",
    config: RegistrationConfig | None = None,
    jobs: int = 1,
) -> BuiltModel:
    """Register the training set to the reference, fit the SSM and form templates.

    The reference is placed first in the training list when it is not already
    part of it. The mean template uses the first K warped shapes.
    """
    items = list(training)
    if reference_id not in [name for name, _ in items]:
        items.insert(0, (reference_id, reference))
    if num_modes > len(items):
        raise SpecError(f"num_modes {num_modes} exceeds the {len(items)} training shapes")
    registered = register_to_reference(reference, [g for _, g in items], config, jobs)
    warped = [(name, w) for (name, _), (w, _) in zip(items, registered)]
    reports = {name: rep for (name, _), (_, rep) in zip(items, registered)}
    ids = [name for name, _ in warped]
    model = fit_modes([w for _, w in warped], num_modes, ids, centered=centered, normalization=normalization)
    k = parse_template_mode(template_mode, len(warped))
    templates = {"single": make_template(reference, ids=[reference_id])}
    if k > 1 or template_mode != "single":
        templates[template_mode] = make_template([w for _, w in warped[:k]], ids=ids[:k])
    return BuiltModel(model, templates, warped, reports)


def complete(
    method: str,
    defective: VoxelGrid,
    model: ShapeModel | None = None,
    template: Template | None = None,
    external: VoxelGrid | None = None,
    registration_target: VoxelGrid | None = None,
    config: RegistrationConfig | None = None,
    minmax_weights: bool = False,
) -> CompletionResult:
    """Dispatch one completion by method name."""
    if method in ("template-single", "template-mean"):
        if template is None:
            raise SpecError(f"method {method!r} needs a template")
        return complete_by_template(defective, template, config, method=method)
    if method in ("ssm", "ssm-external"):
        if model is None:
            raise SpecError(f"method {method!r} needs a shape model")
        if method == "ssm-external" and external is None:
            raise SpecError("method 'ssm-external' needs an external completion")
        return complete_by_ssm(
            defective,
            model,
            external=external if method == "ssm-external" else None,
            registration_target=registration_target,
            config=config,
            minmax_weights=minmax_weights,
        )
    raise SpecError(f"unknown completion method {method!r}")
