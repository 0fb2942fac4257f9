from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from voxssm.errors import DegenerateInputError
from voxssm.metrics import dsc
from voxssm.registration import (
    RegistrationConfig,
    SimilarityTransform,
    compose,
    estimate_transform,
    inverse,
    rotation_from_axis_angle,
    rotation_from_euler,
    warp,
)
from voxssm.volume import GridGeometry, VoxelGrid, make_phantom

from conftest import SMALL

GEOM = GridGeometry((10, 12, 14), (1.0, 0.5, 2.0), (-3.0, 2.0, 1.0))

transforms = st.builds(
    lambda s, axis, angle, t: SimilarityTransform(s, rotation_from_axis_angle(axis, angle), t, GEOM),
    st.floats(0.5, 2.0),
    st.tuples(*[st.floats(-1, 1)] * 3).filter(lambda v: np.linalg.norm(v) > 0.1),
    st.floats(-180, 180),
    st.tuples(*[st.floats(-20, 20)] * 3),
)


def _close(a: SimilarityTransform, b: SimilarityTransform, tol: float) -> bool:
    return (
        abs(a.scale - b.scale) <= tol
        and np.allclose(a.rotation, b.rotation, atol=tol)
        and np.allclose(a.translation, b.translation, atol=tol)
    )


def test_validation():
    with pytest.raises(ValueError):
        SimilarityTransform(0.0, np.eye(3), np.zeros(3), GEOM)
    with pytest.raises(ValueError):
        SimilarityTransform(1.0, np.diag([1.0, 1.0, -1.0]), np.zeros(3), GEOM)
    with pytest.raises(ValueError):
        SimilarityTransform(1.0, 1.1 * np.eye(3), np.zeros(3), GEOM)


def test_rotation_helpers_agree():
    assert np.allclose(rotation_from_euler((0, 0, 90)), rotation_from_axis_angle((0, 0, 1), 90))
    R = rotation_from_euler((10, -20, 35))
    assert np.allclose(R.T @ R, np.eye(3)) and np.isclose(np.linalg.det(R), 1)


def test_inverse_of_identity():
    ident = SimilarityTransform.identity(GEOM)
    assert _close(inverse(ident, GEOM), ident, 0.0)


@settings(max_examples=100, deadline=None)
@given(transforms)
def test_inverse_algebra(t):
    inv = inverse(t, GEOM)
    assert _close(inverse(inv, GEOM), t, 1e-9)
    assert _close(compose(t, inv), SimilarityTransform.identity(GEOM), 1e-6)
    assert _close(compose(inv, t), SimilarityTransform.identity(GEOM), 1e-6)
    pts = np.random.default_rng(0).uniform(-30, 30, size=(3, 3))
    assert np.allclose(compose(t, inv).apply(pts), pts, atol=1e-6)
    assert np.allclose(t.apply_inverse(t.apply(pts)), pts, atol=1e-9)
    assert np.allclose(t.matrix() @ np.append(pts[0], 1.0), np.append(t.apply(pts[0]), 1.0))


@settings(max_examples=50, deadline=None)
@given(transforms, transforms)
def test_compose_order(t1, t2):
    pts = np.random.default_rng(1).uniform(-10, 10, size=(4, 3))
    assert np.allclose(compose(t2, t1).apply(pts), t2.apply(t1.apply(pts)), atol=1e-9)


def test_json_round_trip():
    t = SimilarityTransform(1.3, rotation_from_euler((5, 10, -15)), [1.0, -2.0, 3.5], GEOM)
    doc = t.to_dict()
    assert set(doc) == {"scale", "rotation", "translation", "fixed_grid"}
    assert len(doc["rotation"]) == 9
    back = SimilarityTransform.from_json(t.to_json())
    assert _close(back, t, 1e-12)
    assert back.fixed_grid == GEOM


def test_warp_identity_is_bitwise(small_phantom):
    out = warp(small_phantom, SimilarityTransform.identity(small_phantom.geometry))
    assert out == small_phantom


def test_warp_identity_onto_other_grid(small_phantom):
    # Same lattice, grid cropped by two voxels on each side.
    g = small_phantom.geometry
    origin = tuple(o + 2 * s for o, s in zip(g.origin, g.spacing))
    target = GridGeometry(tuple(d - 4 for d in g.dims), g.spacing, origin)
    out = warp(small_phantom, SimilarityTransform.identity(target))
    assert np.array_equal(out.data, small_phantom.data[2:-2, 2:-2, 2:-2])


def test_integer_translation_is_exact_shift(small_phantom):
    shift = np.array([2.0, -3.0, 1.0])
    out = warp(small_phantom, SimilarityTransform(1.0, np.eye(3), shift, small_phantom.geometry))
    expected = np.zeros_like(small_phantom.data)
    expected[2:, :-3, 1:] = small_phantom.data[:-2, 3:, :-1]
    assert np.array_equal(out.data, expected)


def test_fractional_warp_stays_fractional():
    g = VoxelGrid(np.linspace(0, 1, 27).reshape(3, 3, 3))
    out = warp(g, SimilarityTransform(1.0, np.eye(3), [0.5, 0, 0], g.geometry))
    assert not out.binary
    assert np.isclose(out.data[1, 1, 1], 0.5 * (g.data[0, 1, 1] + g.data[1, 1, 1]))


@pytest.fixture(scope="module")
def phantom64():
    spec = replace(SMALL, dims=(64, 64, 64), radii=(26.0, 23.0, 20.0), thickness=4.0, face_thickness=3.0)
    return make_phantom(spec)


def test_warp_round_trip(phantom64):
    t = SimilarityTransform(1.1, rotation_from_euler((8, -5, 12)), [2.0, -1.0, 1.5], phantom64.geometry)
    there = warp(phantom64, t)
    back = warp(there, inverse(t, phantom64.geometry))
    assert dsc(back, phantom64) >= 0.95


def _equivariance_dsc(g: VoxelGrid) -> float:
    t1 = SimilarityTransform(1.05, rotation_from_euler((6, 0, -4)), [1.0, 0.5, -1.0], g.geometry)
    t2 = SimilarityTransform(0.97, rotation_from_euler((-3, 7, 2)), [-0.5, 1.5, 0.0], g.geometry)
    return dsc(warp(g, compose(t2, t1)), warp(warp(g, t1), t2))


def test_warp_equivariance_thick_wall():
    # Two binarised resamplings lose sub-voxel position once per boundary, so
    # the agreement is set by the surface-to-volume ratio; 0.98 needs a wall
    # of about 16 voxels.
    g = make_phantom(replace(SMALL, dims=(64, 64, 64), radii=(26.0, 23.0, 20.0), thickness=16.0, face_thickness=0.0))
    assert _equivariance_dsc(g) >= 0.98


def test_warp_equivariance_thin_shell(phantom64):
    assert _equivariance_dsc(phantom64) >= 0.94


def test_self_registration(small_phantom):
    rep = estimate_transform(small_phantom, small_phantom)
    t = rep.transform
    assert abs(t.scale - 1) <= 1e-3
    assert np.allclose(t.rotation, np.eye(3), atol=1e-3)
    assert np.allclose(t.translation, 0, atol=1e-3)
    assert rep.residual >= 0 and rep.iterations <= RegistrationConfig().max_iterations


def test_translation_recovery(phantom64):
    moving = warp(phantom64, SimilarityTransform(1.0, np.eye(3), [5.0, -3.0, 2.0], phantom64.geometry))
    t = estimate_transform(moving, phantom64).transform
    assert np.allclose(t.translation, [-5.0, 3.0, -2.0], atol=0.5)


def test_scale_recovery():
    spec = replace(SMALL, dims=(48, 48, 48))
    fixed = make_phantom(spec)
    moving = warp(fixed, SimilarityTransform(1.2, np.eye(3), np.zeros(3), fixed.geometry))
    t = estimate_transform(moving, fixed).transform
    assert 1 / 1.25 <= t.scale <= 1 / 1.15


def test_recovers_rotation_and_scale(phantom64):
    truth = SimilarityTransform(0.9, rotation_from_axis_angle((1, 2, -1), 25), [4.0, -6.0, 3.0], phantom64.geometry)
    moving = warp(phantom64, truth)
    est = estimate_transform(moving, phantom64).transform
    expected = inverse(truth, phantom64.geometry)
    err = SimilarityTransform(1.0, est.rotation @ expected.rotation.T, np.zeros(3), GEOM).rotation_angle_deg()
    assert abs(est.scale - expected.scale) <= 0.03
    assert err <= 3.0
    assert np.all(np.abs(est.translation - expected.translation) <= 1.0)


def test_empty_input_is_degenerate(small_phantom):
    empty = VoxelGrid.zeros(small_phantom.geometry)
    with pytest.raises(DegenerateInputError):
        estimate_transform(empty, small_phantom)
    with pytest.raises(DegenerateInputError):
        estimate_transform(small_phantom, empty)


def test_non_convergence_is_reported(small_phantom):
    moved = warp(small_phantom, SimilarityTransform(1.0, rotation_from_euler((0, 0, 10)), [1.0, 0, 0],
                                                    small_phantom.geometry))
    rep = estimate_transform(moved, small_phantom, RegistrationConfig(max_iterations=1, tol=0.0))
    assert rep.iterations <= 1
    assert isinstance(rep.converged, bool)


def test_config_round_trip():
    cfg = RegistrationConfig(tol=1e-3, max_iterations=7, trim_fraction=0.9, refine_candidates=2)
    assert RegistrationConfig.from_dict(cfg.to_dict()) == cfg
    assert RegistrationConfig.from_dict(None) == RegistrationConfig()
