"""Statistical shape model built directly on registered binary volumes.

Shapes are flattened voxel vectors in a common reference space. The model
is ``S = mean + sum_i w_i * phi_i`` with the modes ``phi_i`` taken from a
PCA of the training vectors.
"""
from __future__ import annotations

import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import DegenerateWeightsError, ShapeError
from .volume.grid import GridGeometry, VoxelGrid
from .volume.nrrd import read_nrrd, write_nrrd

NORMALIZATIONS = ("unit", "pinv")
RANK_TOL = 1e-10
MODES_FILE = "modes.bin"
MEAN_FILE = "mean.nrrd"
META_FILE = "model.json"


@dataclass(frozen=True)
class WeightVector:
    values: np.ndarray
    rescaled: bool = False
    rescale_bounds: tuple[float, float] | None = None

    def __post_init__(self):
        v = np.array(self.values, dtype=float).reshape(-1)
        v.setflags(write=False)
        object.__setattr__(self, "values", v)
        if self.rescaled:
            if self.rescale_bounds is None or not self.rescale_bounds[0] < self.rescale_bounds[1]:
                raise ValueError("rescaled weights need bounds with min < max")

    def __len__(self):
        return len(self.values)

    def raw(self) -> np.ndarray:
        """Weights on the projection scale (undoes min-max rescaling)."""
        if not self.rescaled:
            return self.values
        lo, hi = self.rescale_bounds
        return self.values * (hi - lo) + lo

    def to_dict(self) -> dict:
        return {
            "values": [float(v) for v in self.values],
            "rescaled": self.rescaled,
            "rescale_bounds": list(self.rescale_bounds) if self.rescale_bounds else None,
        }


def rescale_weights(values: Sequence[float]) -> WeightVector:
    """Min-max normalise weights into [0, 1], remembering the bounds."""
    v = np.asarray(values, dtype=float)
    lo, hi = float(v.min()), float(v.max())
    if not hi > lo:
        raise DegenerateWeightsError("cannot rescale weights whose min equals max")
    return WeightVector((v - lo) / (hi - lo), True, (lo, hi))


@dataclass
class ShapeModel:
    """Mean shape plus ``num_modes`` variation modes (rows of ``modes``).

    ``normalization`` is ``"unit"`` for orthonormal PCA directions or
    ``"pinv"`` for modes rebuilt as ``scores @ pinv(X)`` from the training
    matrix. ``centered`` controls whether projection subtracts the mean.
    """

    mean: VoxelGrid
    modes: np.ndarray
    singular_values: np.ndarray
    training_ids: list[str] = field(default_factory=list)
    centered: bool = True
    normalization: str = "unit"

    def __post_init__(self):
        self.modes = np.asarray(self.modes, dtype=np.float64)
        if self.modes.ndim != 2 or self.modes.shape[1] != self.mean.geometry.size:
            raise ShapeError("modes must be num_modes x voxel_count")
        if self.normalization not in NORMALIZATIONS:
            raise ValueError(f"unknown normalization '{self.normalization}'")

    @property
    def num_modes(self) -> int:
        return self.modes.shape[0]

    @property
    def reference(self) -> GridGeometry:
        return self.mean.geometry

    @property
    def near_zero(self) -> np.ndarray:
        """Per-mode flag: singular value below ``RANK_TOL`` times the largest."""
        sv = np.asarray(self.singular_values, dtype=float)[: self.num_modes]
        top = float(np.max(self.singular_values, initial=0.0))
        if top == 0.0:
            return np.ones(self.num_modes, dtype=bool)
        return sv < RANK_TOL * top

    @property
    def rank(self) -> int:
        return int(np.count_nonzero(~self.near_zero))


def _stack(grids: Sequence[VoxelGrid]) -> np.ndarray:
    if len(grids) == 0:
        raise ValueError("need at least one grid")
    ref = grids[0]
    for g in grids[1:]:
        if g.dims != ref.dims:
            raise ShapeError(f"dimension mismatch: {g.dims} vs {ref.dims}")
    return np.stack([g.data.astype(np.float64).ravel() for g in grids])


def mean_shape(warped: Sequence[VoxelGrid]) -> VoxelGrid:
    """Voxelwise arithmetic mean of shapes already in reference space."""
    X = _stack(warped)
    return VoxelGrid(X.mean(axis=0).reshape(warped[0].dims), warped[0].spacing, warped[0].origin)


def _orient(v: np.ndarray) -> np.ndarray:
    """Flip ``v`` so its largest-magnitude entry is positive (first such entry on ties)."""
    a = np.abs(v)
    top = a.max()
    if top == 0:
        return v
    k = int(np.argmax(a >= top * (1 - 1e-9)))
    return -v if v[k] < 0 else v


def fit_modes(
    warped: Sequence[VoxelGrid],
    num_modes: int,
    training_ids: Sequence[str] | None = None,
    centered: bool = True,
    normalization: str = "unit",
) -> ShapeModel:
    """PCA of the registered training shapes via the N x N Gram matrix.

    Only the small sample-by-sample product is decomposed; the modes are
    lifted to voxel space afterwards, so no voxel-by-voxel covariance is
    ever formed. Directions whose singular value falls below
    ``RANK_TOL`` times the largest are returned as zero rows.
    """
    n = len(warped)
    if num_modes < 1 or num_modes > n:
        raise ValueError(f"num_modes must lie in [1, {n}], got {num_modes}")
    if normalization not in NORMALIZATIONS:
        raise ValueError(f"unknown normalization '{normalization}'")
    X = _stack(warped)
    mu = X.mean(axis=0)
    Xc = X - mu

    gram = Xc @ Xc.T
    w, U = np.linalg.eigh(gram)
    order = np.argsort(w)[::-1]
    w, U = w[order], U[:, order]
    sv = np.sqrt(np.clip(w, 0.0, None))
    top = sv[0]

    modes = np.zeros((num_modes, X.shape[1]))
    for k in range(num_modes):
        if top > 0 and sv[k] >= RANK_TOL * top:
            modes[k] = _orient(U[:, k] @ Xc / sv[k])

    if normalization == "pinv":
        scores = modes @ Xc.T  # num_modes x N, the transformed training set
        modes = scores @ np.linalg.pinv(X @ X.T, hermitian=True) @ X

    ids = list(training_ids) if training_ids is not None else [str(i) for i in range(n)]
    mean = VoxelGrid(mu.reshape(warped[0].dims), warped[0].spacing, warped[0].origin)
    return ShapeModel(mean, modes, sv, ids, centered, normalization)


def _check_shape(model: ShapeModel, shape: VoxelGrid) -> None:
    if shape.dims != model.reference.dims:
        raise ShapeError(f"shape dims {shape.dims} do not match model reference {model.reference.dims}")


def project(model: ShapeModel, shape: VoxelGrid, rescale: bool = False) -> WeightVector:
    """Mode weights of ``shape``: ``modes @ (shape - mean)`` (or of the raw shape when uncentered)."""
    _check_shape(model, shape)
    y = shape.data.astype(np.float64).ravel()
    if model.centered:
        y = y - model.mean.data.ravel()
    lam = model.modes @ y
    return rescale_weights(lam) if rescale else WeightVector(lam)


def _coefficients(model: ShapeModel, weights: WeightVector | Sequence[float], literal: bool) -> np.ndarray:
    if not isinstance(weights, WeightVector):
        weights = WeightVector(weights)
    if len(weights) != model.num_modes:
        raise ValueError(f"expected {model.num_modes} weights, got {len(weights)}")
    return weights.values if literal else weights.raw()


def _finish(model: ShapeModel, s: np.ndarray, binarize: bool) -> VoxelGrid:
    ref = model.reference
    s = s.reshape(ref.dims)
    if binarize:
        return VoxelGrid((s >= 0.5).astype(np.uint8), ref.spacing, ref.origin)
    return VoxelGrid(s, ref.spacing, ref.origin)


def combine_modes(model: ShapeModel, coeffs: np.ndarray, form: str = "matrix") -> np.ndarray:
    """``sum_i coeffs[i] * modes[i]`` as an explicit loop or as a row-wise reduction.

    Both forms accumulate in mode order, so they agree bit for bit.
    """
    if form == "sum":
        acc = np.zeros(model.modes.shape[1])
        for c, phi in zip(coeffs, model.modes):
            acc += c * phi
        return acc
    if form == "matrix":
        return np.add.reduce(np.asarray(coeffs)[:, None] * model.modes, axis=0, initial=0.0)
    raise ValueError(f"unknown form '{form}'")


def reconstruct(
    model: ShapeModel,
    weights: WeightVector | Sequence[float],
    binarize: bool = False,
    literal: bool = False,
    form: str = "matrix",
) -> VoxelGrid:
    """``mean + weights . modes``.

    Rescaled weights are mapped back to their raw scale first unless
    ``literal`` asks for the [0, 1] values to be used as they are.
    ``binarize`` thresholds the result at 0.5 (inclusive).
    """
    coeffs = _coefficients(model, weights, literal)
    s = model.mean.data.ravel() + combine_modes(model, coeffs, form)
    return _finish(model, s, binarize)


def modes_only_reconstruct(
    model: ShapeModel,
    weights: WeightVector | Sequence[float] | str = "unit",
    binarize: bool = False,
    literal: bool = False,
) -> VoxelGrid:
    """``weights . modes`` without the mean; ``"unit"`` sets every weight to 1."""
    if isinstance(weights, str):
        if weights != "unit":
            raise ValueError(f"unknown weight preset '{weights}'")
        weights = np.ones(model.num_modes)
    coeffs = _coefficients(model, weights, literal)
    return _finish(model, combine_modes(model, coeffs), binarize)


@dataclass
class ModeReport:
    weight_mean: np.ndarray
    weight_min: np.ndarray
    weight_max: np.ndarray
    energy_fraction: np.ndarray | None
    weights: np.ndarray  # num_shapes x num_modes

    def rows(self) -> list[dict]:
        out = []
        for i in range(len(self.weight_mean)):
            row = {
                "mode": i + 1,
                "weight_mean": float(self.weight_mean[i]),
                "weight_min": float(self.weight_min[i]),
                "weight_max": float(self.weight_max[i]),
            }
            if self.energy_fraction is not None:
                row["roi_energy_fraction"] = float(self.energy_fraction[i])
            out.append(row)
        return out


def roi_energy_fraction(model: ShapeModel, roi: VoxelGrid) -> np.ndarray:
    """Share of each mode's squared norm lying inside ``roi`` (NaN for zero modes)."""
    _check_shape(model, roi)
    inside = roi.mask.ravel()
    sq = model.modes**2
    total = sq.sum(axis=1)
    part = sq[:, inside].sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(total > 0, part / np.where(total > 0, total, 1.0), np.nan)


def mode_report(
    model: ShapeModel,
    test_shapes: Sequence[VoxelGrid],
    roi: VoxelGrid | None = None,
) -> ModeReport:
    """Per-mode weight statistics over ``test_shapes`` and optional ROI energy split."""
    if len(test_shapes) == 0:
        raise ValueError("mode_report needs at least one test shape")
    W = np.stack([project(model, s).values for s in test_shapes])
    energy = roi_energy_fraction(model, roi) if roi is not None else None
    return ModeReport(W.mean(axis=0), W.min(axis=0), W.max(axis=0), energy, W)


def save_model(model: ShapeModel, directory: str | os.PathLike) -> None:
    """Persist as ``mean.nrrd``, ``modes.bin`` (little-endian float64, row-major) and ``model.json``."""
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    write_nrrd(model.mean, d / MEAN_FILE)
    (d / MODES_FILE).write_bytes(model.modes.astype("<f8").tobytes(order="C"))
    meta = {
        "num_modes": model.num_modes,
        "voxel_count": int(model.modes.shape[1]),
        "voxel_order": "C-order over array axes (i, j, k); axis i is the first NRRD axis",
        "dtype": "float64-le",
        "centered": model.centered,
        "normalization": model.normalization,
        "singular_values": [float(s) for s in model.singular_values],
        "rank": model.rank,
        "training_ids": list(model.training_ids),
        "reference": model.reference.to_dict(),
    }
    (d / META_FILE).write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n")


def load_model(directory: str | os.PathLike) -> ShapeModel:
    d = Path(directory)
    meta = json.loads((d / META_FILE).read_text())
    mean = read_nrrd(d / MEAN_FILE)
    if mean.binary:
        mean = VoxelGrid(mean.data.astype(np.float64), mean.spacing, mean.origin)
    raw = np.frombuffer((d / MODES_FILE).read_bytes(), dtype="<f8")
    if raw.size != meta["num_modes"] * meta["voxel_count"]:
        raise ShapeError("modes file size does not match the sidecar metadata")
    modes = raw.reshape(meta["num_modes"], meta["voxel_count"]).astype(np.float64)
    return ShapeModel(
        mean,
        modes,
        np.asarray(meta["singular_values"], dtype=float),
        list(meta["training_ids"]),
        bool(meta["centered"]),
        meta["normalization"],
    )
