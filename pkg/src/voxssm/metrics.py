"""Overlap and surface-distance metrics: DSC, boundary DSC and HD95."""
from __future__ import annotations

import csv
import io
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy import ndimage

from .errors import UndefinedMetricError
from .registration import surface_mask
from .volume.grid import VoxelGrid, check_compatible

DEFAULT_BDSC_TOLERANCE_MM = 1.0


def dsc(a: VoxelGrid, b: VoxelGrid) -> float:
    """``2|A and B| / (|A| + |B|)``; two empty volumes score 1."""
    check_compatible(a, b)
    ma, mb = a.mask, b.mask
    inter = int(np.count_nonzero(ma & mb))
    total = int(np.count_nonzero(ma)) + int(np.count_nonzero(mb))
    if total == 0:
        return 1.0
    return 2 * inter / total


def boundary(grid: VoxelGrid) -> np.ndarray:
    """Foreground voxels with a 6-connected background neighbour (outside the grid is background)."""
    return surface_mask(grid.mask)


def _distance_to(target: np.ndarray, spacing) -> np.ndarray:
    """Exact Euclidean distance (mm) from every voxel to the nearest ``target`` voxel."""
    return ndimage.distance_transform_edt(~target, sampling=spacing)


def _directed(src: np.ndarray, dst: np.ndarray, spacing) -> np.ndarray:
    return _distance_to(dst, spacing)[src]


def bdsc(a: VoxelGrid, b: VoxelGrid, tolerance_mm: float = DEFAULT_BDSC_TOLERANCE_MM) -> float:
    """Surface Dice: boundary voxels within ``tolerance_mm`` of the other boundary count as matched."""
    check_compatible(a, b)
    if tolerance_mm < 0:
        raise ValueError("tolerance must be non-negative")
    ba, bb = boundary(a), boundary(b)
    na, nb = int(ba.sum()), int(bb.sum())
    if na + nb == 0:
        return 1.0
    if na == 0 or nb == 0:
        return 0.0
    matched_a = int(np.count_nonzero(_directed(ba, bb, a.spacing) <= tolerance_mm))
    matched_b = int(np.count_nonzero(_directed(bb, ba, a.spacing) <= tolerance_mm))
    return (matched_a + matched_b) / (na + nb)


def surface_distances(a: VoxelGrid, b: VoxelGrid) -> np.ndarray:
    """Pooled boundary-to-boundary distances in both directions (mm)."""
    check_compatible(a, b)
    ba, bb = boundary(a), boundary(b)
    if not ba.any() or not bb.any():
        raise UndefinedMetricError("surface distance needs two nonempty volumes")
    return np.concatenate([_directed(ba, bb, a.spacing), _directed(bb, ba, a.spacing)])


def hd95(a: VoxelGrid, b: VoxelGrid) -> float:
    """95th percentile (linear interpolation) of the pooled symmetric surface distances."""
    return float(np.percentile(surface_distances(a, b), 95, method="linear"))


@dataclass
class MetricsReport:
    dsc: float
    bdsc: float
    hd95: float | None
    bdsc_tolerance: float = DEFAULT_BDSC_TOLERANCE_MM
    case_id: str = ""
    target: str = "implant"
    provenance: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def compare(
    pred: VoxelGrid,
    gt: VoxelGrid,
    tolerance_mm: float = DEFAULT_BDSC_TOLERANCE_MM,
    case_id: str = "",
    target: str = "implant",
    provenance: dict | None = None,
) -> MetricsReport:
    """All three metrics for one pair; an empty side scores DSC 0, bDSC 0 and no HD95."""
    check_compatible(pred, gt)
    p_empty, g_empty = not pred.mask.any(), not gt.mask.any()
    if p_empty or g_empty:
        both = p_empty and g_empty
        score = 1.0 if both else 0.0
        return MetricsReport(score, score, None, tolerance_mm, case_id, target, provenance or {})
    return MetricsReport(
        dsc(pred, gt),
        bdsc(pred, gt, tolerance_mm),
        hd95(pred, gt),
        tolerance_mm,
        case_id,
        target,
        provenance or {},
    )


def evaluate_case(
    pred_implant: VoxelGrid,
    gt_implant: VoxelGrid,
    pred_skull: VoxelGrid | None = None,
    gt_skull: VoxelGrid | None = None,
    tolerance_mm: float = DEFAULT_BDSC_TOLERANCE_MM,
    case_id: str = "",
    provenance: dict | None = None,
) -> list[MetricsReport]:
    """Implant report, followed by a skull report when both skulls are given."""
    reports = [compare(pred_implant, gt_implant, tolerance_mm, case_id, "implant", provenance)]
    if pred_skull is not None and gt_skull is not None:
        reports.append(compare(pred_skull, gt_skull, tolerance_mm, case_id, "skull", provenance))
    return reports


CSV_COLUMNS = ("case", "dsc", "bdsc", "hd95", "bdsc_tolerance_mm")


def _stat(values: list[float], fn) -> float | None:
    vals = [v for v in values if v is not None and not math.isnan(v)]
    return float(fn(vals)) if vals else None


def aggregate(reports: Sequence[MetricsReport]) -> dict:
    """Mean and median per metric; missing HD95 values are skipped and counted."""
    out = {"n": len(reports)}
    for key in ("dsc", "bdsc", "hd95"):
        vals = [getattr(r, key) for r in reports]
        out[key] = {"mean": _stat(vals, np.mean), "median": _stat(vals, np.median)}
    out["hd95"]["missing"] = sum(1 for r in reports if r.hd95 is None)
    return out


def _cell(v) -> str:
    return "" if v is None else repr(float(v))


def aggregate_csv(reports: Sequence[MetricsReport]) -> str:
    """Per-case rows ordered by case id, then ``mean`` and ``median`` rows."""
    rows = sorted(reports, key=lambda r: r.case_id)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in rows:
        w.writerow([r.case_id, _cell(r.dsc), _cell(r.bdsc), _cell(r.hd95), _cell(r.bdsc_tolerance)])
    agg = aggregate(rows)
    tol = rows[0].bdsc_tolerance if rows else DEFAULT_BDSC_TOLERANCE_MM
    for stat in ("mean", "median"):
        w.writerow([stat, _cell(agg["dsc"][stat]), _cell(agg["bdsc"][stat]), _cell(agg["hd95"][stat]), _cell(tol)])
    return buf.getvalue()
