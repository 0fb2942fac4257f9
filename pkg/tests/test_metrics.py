import csv
import io

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from voxssm.errors import ShapeError, UndefinedMetricError
from voxssm.metrics import (
    CSV_COLUMNS,
    MetricsReport,
    aggregate,
    aggregate_csv,
    bdsc,
    boundary,
    compare,
    dsc,
    hd95,
    surface_distances,
)

from conftest import grid
from oracles import oracle_boundary, oracle_metrics, random_pair


def test_metrics_match_brute_force():
    rng = np.random.default_rng(0)
    for _ in range(100):
        a, b, spacing = random_pair(rng)
        tol = float(rng.choice([0.0, 1.0, 1.6, 3.0]))
        ga = grid(a.astype(np.uint8), spacing)
        gb = grid(b.astype(np.uint8), spacing)
        d, bd, h = oracle_metrics(a, b, np.asarray(spacing), tol)
        assert np.array_equal(boundary(ga), oracle_boundary(a))
        assert abs(dsc(ga, gb) - d) < 1e-9
        assert abs(bdsc(ga, gb, tol) - bd) < 1e-9
        assert abs(hd95(ga, gb) - h) < 1e-9


def test_dsc_half_overlap():
    a = np.zeros((4, 4, 4), dtype=np.uint8)
    b = np.zeros_like(a)
    a[0:2, 0:2, 0:2] = 1
    b[1:3, 0:2, 0:2] = 1
    assert dsc(grid(a), grid(b)) == 0.5


def test_single_voxels_ten_apart():
    a = np.zeros((12, 1, 1), dtype=np.uint8)
    b = np.zeros_like(a)
    a[0] = 1
    b[10] = 1
    assert hd95(grid(a), grid(b)) == 10.0
    assert dsc(grid(a), grid(b)) == 0.0
    assert bdsc(grid(a), grid(b), 9.9) == 0.0
    assert bdsc(grid(a), grid(b), 10.0) == 1.0


def test_anisotropic_spacing():
    a = np.zeros((6, 6, 6), dtype=np.uint8)
    b = np.zeros_like(a)
    a[1:3, 1:3, 1:3] = 1
    b[1:3, 1:3, 2:4] = 1
    ga, gb = grid(a, (1, 1, 3)), grid(b, (1, 1, 3))
    # Shifting one slice along the 3 mm axis moves the far faces 3 mm.
    assert hd95(ga, gb) == pytest.approx(3.0)
    assert dsc(ga, gb) == 0.5


def test_tolerance_covering_the_grid_matches_everything():
    rng = np.random.default_rng(1)
    a, b, spacing = random_pair(rng)
    diag = float(np.linalg.norm(np.asarray(a.shape) * spacing))
    assert bdsc(grid(a.astype(np.uint8), spacing), grid(b.astype(np.uint8), spacing), diag) == 1.0


def test_identical_volumes_score_perfectly():
    a = np.zeros((5, 5, 5), dtype=np.uint8)
    a[1:4, 1:4, 1:4] = 1
    r = compare(grid(a), grid(a))
    assert (r.dsc, r.bdsc, r.hd95) == (1.0, 1.0, 0.0)


masks = arrays(np.uint8, (4, 3, 3), elements=st.integers(0, 1)).filter(lambda m: m.any())


@settings(max_examples=60, deadline=None)
@given(masks, masks, st.integers(0, 4), st.integers(0, 4), st.integers(0, 4))
def test_symmetry_and_translation_invariance(a, b, dx, dy, dz):
    ga, gb = grid(a), grid(b)
    assert dsc(ga, gb) == dsc(gb, ga)
    assert bdsc(ga, gb) == bdsc(gb, ga)
    assert hd95(ga, gb) == hd95(gb, ga)
    # Embed both in a larger grid at the same offset, away from the border
    # so the padded shapes keep their boundaries.
    big_a = np.zeros((10, 9, 9), dtype=np.uint8)
    big_b = np.zeros_like(big_a)
    big_a[dx + 1:dx + 5, dy + 1:dy + 4, dz + 1:dz + 4] = a
    big_b[dx + 1:dx + 5, dy + 1:dy + 4, dz + 1:dz + 4] = b
    pa = np.pad(a, 1)
    pb = np.pad(b, 1)
    ref = (dsc(grid(pa), grid(pb)), bdsc(grid(pa), grid(pb)), hd95(grid(pa), grid(pb)))
    got = (dsc(grid(big_a), grid(big_b)), bdsc(grid(big_a), grid(big_b)), hd95(grid(big_a), grid(big_b)))
    assert got == pytest.approx(ref, abs=1e-12)


def test_empty_policy():
    empty = grid(np.zeros((3, 3, 3), dtype=np.uint8))
    full = grid(np.ones((3, 3, 3), dtype=np.uint8))
    assert dsc(empty, empty) == 1.0
    with pytest.raises(UndefinedMetricError):
        hd95(empty, full)
    with pytest.raises(UndefinedMetricError):
        surface_distances(full, empty)
    r = compare(full, empty)
    assert (r.dsc, r.bdsc, r.hd95) == (0.0, 0.0, None)
    r = compare(empty, empty)
    assert (r.dsc, r.bdsc, r.hd95) == (1.0, 1.0, None)


def test_shape_mismatch():
    with pytest.raises(ShapeError):
        dsc(grid(np.zeros((2, 2, 2), dtype=np.uint8)), grid(np.zeros((2, 2, 3), dtype=np.uint8)))
    with pytest.raises(ShapeError):
        dsc(grid(np.zeros((2, 2, 2), dtype=np.uint8)), grid(np.zeros((2, 2, 2), dtype=np.uint8), (2, 1, 1)))
    with pytest.raises(ValueError):
        bdsc(grid(np.ones((2, 2, 2), dtype=np.uint8)), grid(np.ones((2, 2, 2), dtype=np.uint8)), -1.0)


def test_aggregate_and_csv():
    reports = [MetricsReport(1.0, 1.0, 0.0, case_id="b"), MetricsReport(0.5, 0.25, None, case_id="a")]
    agg = aggregate(reports)
    assert agg["dsc"]["mean"] == 0.75 and agg["dsc"]["median"] == 0.75
    assert agg["hd95"] == {"mean": 0.0, "median": 0.0, "missing": 1}
    rows = list(csv.reader(io.StringIO(aggregate_csv(reports))))
    assert tuple(rows[0]) == CSV_COLUMNS
    assert [r[0] for r in rows[1:]] == ["a", "b", "mean", "median"]
    assert rows[1][3] == ""  # missing HD95 stays blank
    assert float(rows[3][1]) == 0.75
