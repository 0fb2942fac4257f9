"""Similarity registration of binary volumes and warping between image spaces.

A :class:`SimilarityTransform` maps world points of the moving image into
the world frame of a fixed image, ``x -> scale * R @ x + translation``,
and remembers the fixed lattice so :func:`warp` knows where to resample.
"""
from __future__ import annotations

import itertools
import json
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .errors import DegenerateInputError
from .volume.grid import GridGeometry, VoxelGrid

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class SimilarityTransform:
    scale: float
    rotation: np.ndarray
    translation: np.ndarray
    fixed_grid: GridGeometry

    def __post_init__(self):
        R = np.array(self.rotation, dtype=float).reshape(3, 3)
        t = np.array(self.translation, dtype=float).reshape(3)
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-9) or abs(np.linalg.det(R) - 1) > 1e-9:
            raise ValueError("rotation must be orthonormal with determinant +1")
        R.setflags(write=False)
        t.setflags(write=False)
        object.__setattr__(self, "scale", float(self.scale))
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls, fixed_grid: GridGeometry) -> SimilarityTransform:
        return cls(1.0, np.eye(3), np.zeros(3), fixed_grid)

    def apply(self, points: np.ndarray) -> np.ndarray:
        """Map moving-frame world points (..., 3) into the fixed frame."""
        return self.scale * np.asarray(points, dtype=float) @ self.rotation.T + self.translation

    def apply_inverse(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points, dtype=float) - self.translation) @ self.rotation / self.scale

    def matrix(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.scale * self.rotation
        m[:3, 3] = self.translation
        return m

    def rotation_angle_deg(self) -> float:
        c = np.clip((np.trace(self.rotation) - 1.0) / 2.0, -1.0, 1.0)
        return float(np.degrees(np.arccos(c)))

    def to_dict(self) -> dict:
        return {
            "scale": self.scale,
            "rotation": [float(v) for v in self.rotation.ravel()],
            "translation": [float(v) for v in self.translation],
            "fixed_grid": self.fixed_grid.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> SimilarityTransform:
        R = np.asarray(d["rotation"], dtype=float).reshape(3, 3)
        # JSON round-off can leave R a hair off SO(3); snap it back.
        U, _, Vt = np.linalg.svd(R)
        return cls(d["scale"], U @ Vt, d["translation"], GridGeometry.from_dict(d["fixed_grid"]))

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> SimilarityTransform:
        return cls.from_dict(json.loads(text))


def compose(t2: SimilarityTransform, t1: SimilarityTransform) -> SimilarityTransform:
    """Transform applying ``t1`` first, then ``t2``; resamples onto ``t2.fixed_grid``."""
    return SimilarityTransform(
        t2.scale * t1.scale,
        t2.rotation @ t1.rotation,
        t2.scale * t2.rotation @ t1.translation + t2.translation,
        t2.fixed_grid,
    )


def inverse(t: SimilarityTransform, original_grid: GridGeometry) -> SimilarityTransform:
    """Analytic inverse; the result resamples onto ``original_grid``."""
    Rt = t.rotation.T
    return SimilarityTransform(1.0 / t.scale, Rt, -Rt @ t.translation / t.scale, original_grid)


def rotation_from_euler(angles_deg) -> np.ndarray:
    """Rotation ``Rz @ Ry @ Rx`` from x/y/z angles in degrees."""
    ax, ay, az = np.radians(angles_deg)
    cx, sx, cy, sy, cz, sz = np.cos(ax), np.sin(ax), np.cos(ay), np.sin(ay), np.cos(az), np.sin(az)
    Rx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    Ry = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    Rz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return Rz @ Ry @ Rx


def rotation_from_axis_angle(axis, angle_deg: float) -> np.ndarray:
    k = np.asarray(axis, dtype=float)
    k = k / np.linalg.norm(k)
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    a = np.radians(angle_deg)
    return np.eye(3) + np.sin(a) * K + (1 - np.cos(a)) * K @ K


def warp(
    moving: VoxelGrid,
    t: SimilarityTransform,
    binary: bool | None = None,
    threshold: float = 0.5,
) -> VoxelGrid:
    """Resample ``moving`` onto ``t.fixed_grid`` by inverse mapping.

    Trilinear interpolation with zero fill outside the moving grid. Binary
    inputs are thresholded (``>= threshold``) unless ``binary=False``;
    fractional inputs stay fractional.
    """
    if binary is None:
        binary = moving.binary
    geom = t.fixed_grid
    src = moving.data.astype(np.float64)
    src_origin = np.asarray(moving.origin)
    src_spacing = np.asarray(moving.spacing)
    out = np.empty(geom.dims, dtype=np.float64)
    ax1 = geom.origin[1] + geom.spacing[1] * np.arange(geom.dims[1])
    ax2 = geom.origin[2] + geom.spacing[2] * np.arange(geom.dims[2])
    g1, g2 = np.meshgrid(ax1, ax2, indexing="ij")
    # Slab-wise so peak memory stays proportional to one slice.
    for i in range(geom.dims[0]):
        q = np.stack([np.full_like(g1, geom.origin[0] + geom.spacing[0] * i), g1, g2], axis=-1)
        idx = (t.apply_inverse(q) - src_origin) / src_spacing
        out[i] = ndimage.map_coordinates(
            src, np.moveaxis(idx, -1, 0), order=1, mode="constant", cval=0.0, prefilter=False
        )
    if binary:
        return VoxelGrid((out >= threshold).astype(np.uint8), geom.spacing, geom.origin)
    return VoxelGrid(np.clip(out, 0.0, 1.0), geom.spacing, geom.origin)


@dataclass
class RegistrationConfig:
    tol: float = 1e-4
    max_iterations: int = 100
    trim_fraction: float = 0.8
    refine_candidates: int = 3
    neighbours: int = 8
    min_normal_cos: float = 0.5

    def to_dict(self) -> dict:
        return {
            "tol": self.tol,
            "max_iterations": self.max_iterations,
            "trim_fraction": self.trim_fraction,
            "refine_candidates": self.refine_candidates,
            "neighbours": self.neighbours,
            "min_normal_cos": self.min_normal_cos,
        }

    @classmethod
    def from_dict(cls, d: dict | None) -> RegistrationConfig:
        d = d or {}
        return cls(
            tol=float(d.get("tol", 1e-4)),
            max_iterations=int(d.get("max_iterations", 100)),
            trim_fraction=float(d.get("trim_fraction", 0.8)),
            refine_candidates=int(d.get("refine_candidates", 3)),
            neighbours=int(d.get("neighbours", 8)),
            min_normal_cos=float(d.get("min_normal_cos", 0.5)),
        )


@dataclass
class RegistrationReport:
    transform: SimilarityTransform
    residual: float
    iterations: int
    converged: bool
    candidates: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "transform": self.transform.to_dict(),
            "residual": self.residual,
            "iterations": self.iterations,
            "converged": self.converged,
        }


def surface_mask(mask: np.ndarray) -> np.ndarray:
    """Foreground voxels with at least one 6-connected background neighbour.

    Voxels on the grid border count as touching background.
    """
    mask = np.asarray(mask, dtype=bool)
    eroded = ndimage.binary_erosion(mask, structure=ndimage.generate_binary_structure(3, 1), border_value=0)
    return mask & ~eroded


def _world_points(grid: VoxelGrid, mask: np.ndarray) -> np.ndarray:
    return grid.geometry.index_to_world(np.argwhere(mask))


def _moments(points: np.ndarray):
    c = points.mean(axis=0)
    d = points - c
    cov = d.T @ d / len(points)
    w, v = np.linalg.eigh(cov)
    order = np.argsort(w)[::-1]
    return c, cov, v[:, order]


def _umeyama(src: np.ndarray, dst: np.ndarray):
    """Least-squares similarity ``dst ~ s R src + t`` (Umeyama 1991)."""
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    xs = src - mu_s
    xd = dst - mu_d
    cov = xd.T @ xs / len(src)
    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    var_s = (xs * xs).sum() / len(src)
    s = float(np.trace(np.diag(D) @ S) / var_s)
    t = mu_d - s * R @ mu_s
    return s, R, t


def _overlap(moving_pts: np.ndarray, fixed: VoxelGrid, s, R, t) -> float:
    idx = np.rint(fixed.geometry.world_to_index(s * moving_pts @ R.T + t)).astype(int)
    dims = np.asarray(fixed.dims)
    ok = np.all((idx >= 0) & (idx < dims), axis=1)
    hits = fixed.mask[tuple(idx[ok].T)]
    return float(np.count_nonzero(hits)) / len(moving_pts)


def _surface_points(grid: VoxelGrid, sigma_vox: float = 1.0):
    """World positions and outward unit normals of the boundary voxels."""
    mask = grid.mask
    surf = surface_mask(mask)
    smooth = ndimage.gaussian_filter(mask.astype(np.float64), sigma_vox, mode="constant")
    grads = np.gradient(smooth, *grid.spacing)
    idx = np.nonzero(surf)
    normals = -np.stack([g[idx] for g in grads], axis=-1)
    length = np.linalg.norm(normals, axis=-1, keepdims=True)
    normals = normals / np.where(length > 0, length, 1.0)
    return grid.geometry.index_to_world(np.argwhere(surf)), normals


def _match(tree, dst_normals, moved, moved_normals, k: int, min_cos: float):
    """Nearest fixed point whose normal agrees with the moving normal.

    Shells have an inner and an outer wall a few voxels apart; without the
    normal check an inner wall happily locks onto an outer one.
    """
    d, j = tree.query(moved, k=k)
    ok = np.einsum("nkc,nc->nk", dst_normals[j], moved_normals) >= min_cos
    first = np.argmax(ok, axis=1)
    found = ok[np.arange(len(moved)), first]
    rows = np.arange(len(moved))
    return d[rows, first], j[rows, first], found


def _icp(src, src_normals, dst_tree, dst_pts, dst_normals, s, R, t,
         config: RegistrationConfig, patience: int = 5):
    """Trimmed, normal-compatible ICP from (s, R, t); returns the best pose seen.

    Stops when the trimmed residual changes by less than ``tol`` relative,
    or has not improved on its best for ``patience`` iterations (trimming
    makes the residual jitter as the kept subset changes).
    """
    prev = None
    best = (np.inf, s, R, t)
    stale = 0
    converged = False
    it = 0
    for it in range(1, config.max_iterations + 1):
        moved = s * src @ R.T + t
        d, j, found = _match(dst_tree, dst_normals, moved, src_normals @ R.T, config.neighbours, config.min_normal_cos)
        cand = np.flatnonzero(found)
        if len(cand) < 3:
            break
        n_keep = max(3, int(np.ceil(config.trim_fraction * len(cand))))
        if n_keep < len(cand):
            keep = cand[np.argpartition(d[cand], n_keep - 1)[:n_keep]]
        else:
            keep = cand
        # Unmatched points count at the worst kept distance so that poses
        # matching little of the surface are not rewarded.
        worst = float(d[keep].max())
        residual = float((d[keep].sum() + worst * (len(src) - len(cand))) / (len(keep) + len(src) - len(cand)))
        if residual < best[0]:
            best = (residual, s, R, t)
            stale = 0
        else:
            stale += 1
        if residual == 0.0 or stale >= patience:
            converged = True
            break
        if prev is not None and abs(prev - residual) <= config.tol * max(prev, 1e-12):
            converged = True
            break
        prev = residual
        s, R, t = _umeyama(src[keep], dst_pts[j[keep]])
    residual, s, R, t = best
    # Untrimmed score for ranking candidates: trimming can favour a wrong pose
    # that simply discards the worst-fitting fifth of the surface.
    full = float(dst_tree.query(s * src @ R.T + t)[0].mean())
    return s, R, t, residual, it, converged, full


def _plane_polish(src, src_normals, dst_tree, dst_pts, dst_normals, s, R, t,
                  config: RegistrationConfig, max_iterations: int = 30):
    """Point-to-plane refinement of a similarity pose.

    Voxel-centre point pairs stall on quantisation plateaus; distances along
    the fixed surface normal let the pose slide tangentially to its optimum.
    Each step solves the linearised problem for a small rotation, scale
    change and shift about the centroid of the moved points.
    """
    best = None
    for _ in range(max_iterations):
        moved = s * src @ R.T + t
        d, j, found = _match(dst_tree, dst_normals, moved, src_normals @ R.T, config.neighbours, config.min_normal_cos)
        cand = np.flatnonzero(found)
        if len(cand) < 7:
            break
        n_keep = max(7, int(np.ceil(config.trim_fraction * len(cand))))
        keep = cand[np.argpartition(d[cand], n_keep - 1)[:n_keep]] if n_keep < len(cand) else cand
        x, q, n = moved[keep], dst_pts[j[keep]], dst_normals[j[keep]]
        c = x.mean(axis=0)
        xc = x - c
        A = np.column_stack([np.cross(xc, n), np.einsum("ij,ij->i", n, xc), n])
        b = -np.einsum("ij,ij->i", n, x - q)
        score = float(np.sqrt(np.mean(b * b)))
        if best is None or score < best[0]:
            best = (score, s, R, t)
        sol, *_ = np.linalg.lstsq(A, b, rcond=None)
        w, delta, tau = sol[:3], sol[3], sol[4:]
        angle = float(np.linalg.norm(w))
        dR = np.eye(3) if angle == 0.0 else rotation_from_axis_angle(w, np.degrees(angle))
        ds = 1.0 + delta
        # x -> ds * dR (x - c) + c + tau, composed onto the current pose.
        s, R, t = ds * s, dR @ R, ds * dR @ (t - c) + c + tau
        if angle < 1e-6 and abs(delta) < 1e-6 and np.linalg.norm(tau) < 1e-5:
            break
    if best is None:
        return s, R, t
    moved = s * src @ R.T + t
    d, j, found = _match(dst_tree, dst_normals, moved, src_normals @ R.T, config.neighbours, config.min_normal_cos)
    _, bs, bR, bt = best
    return (s, R, t) if found.any() else (bs, bR, bt)


def estimate_transform(
    moving: VoxelGrid,
    fixed: VoxelGrid,
    config: RegistrationConfig | None = None,
) -> RegistrationReport:
    """Similarity transform aligning the foreground of ``moving`` to ``fixed``.

    Initial guesses are ranked by foreground overlap: moment-based poses
    (centroids, principal axes under the four proper sign choices or no
    rotation, scale from the ratio of radii of gyration) and the untouched
    input pose. The best ``refine_candidates`` are refined by trimmed
    point-to-point ICP between surface voxels, matching only points with
    compatible surface normals. The result with the lowest untrimmed
    moving-to-fixed surface distance wins and is polished with a
    point-to-plane fit.
    """
    config = config or RegistrationConfig()
    m_mask, f_mask = moving.mask, fixed.mask
    if not m_mask.any() or not f_mask.any():
        raise DegenerateInputError("registration needs a nonempty foreground in both volumes")

    m_all = _world_points(moving, m_mask)
    f_all = _world_points(fixed, f_mask)
    cm, cov_m, Em = _moments(m_all)
    cf, cov_f, Ef = _moments(f_all)
    s0 = float(np.sqrt(np.trace(cov_f) / np.trace(cov_m))) if np.trace(cov_m) > 0 else 1.0

    rotations = []
    for signs in itertools.product((1.0, -1.0), repeat=3):
        R = Ef @ np.diag(signs) @ Em.T
        if np.linalg.det(R) > 0:
            rotations.append(("principal-axes", R))
    rotations.append(("moments-unrotated", np.eye(3)))

    step = max(1, len(m_all) // 20000)
    probe = m_all[::step]
    candidates = []
    for name, R in rotations:
        t = cf - s0 * R @ cm
        candidates.append((_overlap(probe, fixed, s0, R, t), name, s0, R, t))
    # Inputs that already share a scanner frame start best from the raw pose;
    # moments of a defective shape are biased by the missing part.
    candidates.append((_overlap(probe, fixed, 1.0, np.eye(3), np.zeros(3)), "as-is", 1.0, np.eye(3), np.zeros(3)))
    # Stable order: best overlap first, ties resolved by generation order.
    order = sorted(range(len(candidates)), key=lambda k: -candidates[k][0])

    src, src_n = _surface_points(moving)
    dst, dst_n = _surface_points(fixed)
    tree = cKDTree(dst)

    best = None
    tried = []
    for k in order[: max(1, config.refine_candidates)]:
        ov, name, s_init, R, t = candidates[k]
        result = _icp(src, src_n, tree, dst, dst_n, s_init, R, t, config)
        tried.append(
            {"init": name, "overlap": ov, "trimmed_residual": result[3], "residual": result[6], "iterations": result[4]}
        )
        if best is None or result[6] < best[6] - 1e-12:
            best = result
    s, R, t, _, iterations, converged, _ = best
    s, R, t = _plane_polish(src, src_n, tree, dst, dst_n, s, R, t, config)
    # Re-orthonormalise against accumulated round-off.
    U, _, Vt = np.linalg.svd(R)
    R = U @ Vt
    transform = SimilarityTransform(s, R, t, fixed.geometry)

    moved = transform.apply(src)
    d_mf, _ = tree.query(moved)
    d_fm, _ = cKDTree(moved).query(dst)
    residual = float((d_mf.sum() + d_fm.sum()) / (len(d_mf) + len(d_fm)))
    if not converged:
        log.warning("registration stopped after %d iterations without converging", iterations)
    return RegistrationReport(transform, residual, iterations, converged, tried)
