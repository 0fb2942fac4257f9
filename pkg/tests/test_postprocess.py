import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy import ndimage

from voxssm.errors import EmptyImplantError
from voxssm.postprocess import (
    PostprocessConfig,
    ball,
    connected_components,
    extract_implant,
    median_filter,
    morphological_opening,
)

from conftest import grid


def cube(dims, lo, hi):
    a = np.zeros(dims, dtype=np.uint8)
    a[lo:hi, lo:hi, lo:hi] = 1
    return a


def test_median_examples():
    rng = np.random.default_rng(0)
    g = grid((rng.random((6, 6, 6)) < 0.5).astype(np.uint8))
    assert median_filter(g, 1) is g
    single = np.zeros((5, 5, 5), dtype=np.uint8)
    single[2, 2, 2] = 1
    assert median_filter(grid(single), 3).count() == 0
    c = median_filter(grid(cube((9, 9, 9), 2, 7)), 3)
    assert c.count() >= 27
    assert np.all(c.data[3:6, 3:6, 3:6] == 1)
    with pytest.raises(ValueError):
        median_filter(g, 2)


@settings(max_examples=40, deadline=None)
@given(arrays(np.uint8, (5, 4, 4), elements=st.integers(0, 1)))
def test_binary_median_matches_sorting_median(a):
    expected = ndimage.median_filter(a, size=3, mode="constant", cval=0)
    assert np.array_equal(median_filter(grid(a), 3).data, expected)


def test_opening_examples():
    rng = np.random.default_rng(1)
    g = grid((rng.random((6, 6, 6)) < 0.5).astype(np.uint8))
    assert morphological_opening(g, 0) is g
    single = np.zeros((5, 5, 5), dtype=np.uint8)
    single[2, 2, 2] = 1
    assert morphological_opening(grid(single), 1).count() == 0
    a = cube((11, 11, 11), 2, 9)
    opened = morphological_opening(grid(a), 1).mask
    assert np.all(opened[3:8, 3:8, 3:8])
    assert not np.any(opened & ~a.astype(bool))
    with pytest.raises(ValueError):
        morphological_opening(g, -1)


def test_ball():
    assert ball(0).sum() == 1
    assert ball(1).sum() == 7
    assert ball(2).sum() == 33


@settings(max_examples=40, deadline=None)
@given(arrays(np.uint8, (6, 6, 5), elements=st.integers(0, 1)), st.integers(1, 2))
def test_opening_is_idempotent_and_anti_extensive(a, r):
    once = morphological_opening(grid(a), r)
    twice = morphological_opening(once, r)
    assert np.array_equal(once.data, twice.data)
    assert not np.any(once.mask & ~a.astype(bool))


def test_components():
    empty = connected_components(grid(np.zeros((3, 3, 3), dtype=np.uint8)))
    assert empty.count == 0 and not empty.labels.any()
    a = np.zeros((8, 8, 8), dtype=np.uint8)
    a[0:2, 0:2, 0:2] = 1          # 8 voxels
    a[5:8, 5:8, 5:8] = 1          # 27 voxels
    comps = connected_components(grid(a))
    assert comps.sizes == [27, 8]
    assert comps.mask(1)[6, 6, 6] and comps.mask(2)[0, 0, 0]
    diag = np.zeros((3, 3, 3), dtype=np.uint8)
    diag[0, 0, 0] = diag[1, 1, 1] = 1
    assert connected_components(grid(diag), 6).count == 2
    assert connected_components(grid(diag), 18).count == 2
    assert connected_components(grid(diag), 26).count == 1
    # Equal sizes keep raster order of their first voxel.
    tie = np.zeros((5, 1, 1), dtype=np.uint8)
    tie[0] = tie[3] = 1
    t = connected_components(grid(tie))
    assert t.sizes == [1, 1] and t.mask(1)[0, 0, 0]
    with pytest.raises(ValueError):
        connected_components(grid(diag), 8)


def test_config_validation():
    for bad in ({"median_kernel": 4}, {"opening_radius": -1}, {"connectivity": 4}, {"selection": "x"}):
        with pytest.raises(ValueError):
            PostprocessConfig(**bad)


def test_extract_removes_noise():
    a = cube((16, 16, 16), 3, 10)
    rng = np.random.default_rng(2)
    noisy = a.copy()
    free = np.argwhere(np.pad(a, 0) == 0)
    for idx in free[rng.choice(len(free), 5, replace=False)]:
        noisy[tuple(idx)] = 1
    log = []
    out = extract_implant(grid(noisy), manifest=log)
    assert np.array_equal(out.mask, morphological_opening(grid(a), 1).mask)
    assert [e["stage"] for e in log] == ["input", "median", "opening", "components"]


def test_two_defects_keep_a_piece_each():
    a = np.zeros((24, 12, 12), dtype=np.uint8)
    a[1:7, 3:9, 3:9] = 1
    a[15:19, 3:7, 3:7] = 1   # smaller piece
    a[10:12, 0:2, 0:2] = 1   # debris, removed by opening
    hint = np.zeros_like(a)
    hint[0:8, :, :] = 1
    hint[14:20, :, :] = 1
    out = extract_implant(grid(a), defect_hint=grid(hint))
    assert connected_components(out).count == 2
    largest = extract_implant(grid(a), PostprocessConfig(selection="largest"), defect_hint=grid(hint))
    assert connected_components(largest).count == 1


def test_erase_mask_cuts_a_bridge():
    a = np.zeros((20, 8, 8), dtype=np.uint8)
    a[1:7, 1:7, 1:7] = 1
    a[13:19, 1:7, 1:7] = 1
    a[7:13, 3:5, 3:5] = 1    # thin bridge
    erase = np.zeros_like(a)
    erase[9:11] = 1
    cfg = PostprocessConfig(opening_radius=0, median_kernel=1, erase_mask=grid(erase))
    out = extract_implant(grid(a), cfg)
    assert connected_components(out).count == 1
    assert not np.any(out.mask & erase.astype(bool))


def test_empty_stage_is_named():
    with pytest.raises(EmptyImplantError) as e:
        extract_implant(grid(np.zeros((4, 4, 4), dtype=np.uint8)))
    assert e.value.stage == "input"
    single = np.zeros((5, 5, 5), dtype=np.uint8)
    single[2, 2, 2] = 1
    with pytest.raises(EmptyImplantError) as e:
        extract_implant(grid(single))
    assert e.value.stage == "median"
    with pytest.raises(EmptyImplantError) as e:
        extract_implant(grid(single), PostprocessConfig(erase_mask=grid(single)))
    assert e.value.stage == "erase"
    bar = np.zeros((7, 7, 7), dtype=np.uint8)
    bar[1:6, 2:4, 2:4] = 1
    with pytest.raises(EmptyImplantError) as e:
        extract_implant(grid(bar), PostprocessConfig(median_kernel=1, opening_radius=1))
    assert e.value.stage == "opening"


@settings(max_examples=40, deadline=None)
@given(
    arrays(np.uint8, (8, 8, 6), elements=st.integers(0, 1)),
    arrays(np.uint8, (8, 8, 6), elements=st.integers(0, 1)),
)
def test_output_within_raw_minus_erase(raw, erase):
    cfg = PostprocessConfig(opening_radius=0, erase_mask=grid(erase))
    try:
        out = extract_implant(grid(raw), cfg)
    except EmptyImplantError:
        return
    assert not np.any(out.mask & ~(raw.astype(bool) & ~erase.astype(bool)))
