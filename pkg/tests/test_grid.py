import itertools

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from voxssm.errors import ShapeError
from voxssm.volume import (
    GridGeometry,
    VoxelGrid,
    threshold_grid,
    volume_add,
    volume_intersect,
    volume_subtract,
)

from conftest import grid


def test_geometry_validation():
    with pytest.raises(ValueError):
        GridGeometry((0, 2, 2), (1, 1, 1), (0, 0, 0))
    with pytest.raises(ValueError):
        GridGeometry((2, 2, 2), (1, 0, 1), (0, 0, 0))
    with pytest.raises(ValueError):
        GridGeometry((2, 2), (1, 1, 1), (0, 0, 0))


def test_index_world_round_trip():
    g = GridGeometry((4, 5, 6), (0.5, 1.0, 2.5), (-3.0, 1.0, 7.0))
    idx = np.array([[0, 0, 0], [3, 4, 5], [1, 2, 3]], dtype=float)
    world = g.index_to_world(idx)
    assert np.allclose(world[1], [-3.0 + 1.5, 1.0 + 4.0, 7.0 + 12.5])
    assert np.allclose(g.world_to_index(world), idx)
    assert g.world_coordinates().shape == (4, 5, 6, 3)
    assert GridGeometry.from_dict(g.to_dict()) == g


def test_binary_flag_and_immutability():
    b = grid(np.ones((2, 2, 2), dtype=np.uint8))
    assert b.binary and b.count() == 8
    f = grid(np.full((2, 2, 2), 0.25))
    assert not f.binary
    with pytest.raises(ValueError):
        b.data[0, 0, 0] = 0
    with pytest.raises(ValueError):
        grid(np.full((2, 2, 2), 2, dtype=np.uint8))


def test_subtract_examples():
    a = grid(np.ones((2, 2, 2), dtype=np.uint8))
    assert volume_subtract(a, a).count() == 0
    corner = np.zeros((2, 2, 2), dtype=np.uint8)
    corner[0, 0, 0] = 1
    assert volume_subtract(a, grid(corner)).count() == 7
    # Clamped: 0 - 1 stays 0.
    out = volume_subtract(grid(corner), a)
    assert out.data.min() == 0 and out.binary


def test_add_examples():
    a = np.zeros((3, 3, 3), dtype=np.uint8)
    b = np.zeros((3, 3, 3), dtype=np.uint8)
    a[0, 0, 0] = 1
    b[2, 2, 2] = 1
    assert volume_add(grid(a), grid(b)).count() == 2
    assert volume_add(grid(a), grid(a)) == grid(a)


def test_mismatch_raises():
    with pytest.raises(ShapeError):
        volume_add(grid(np.zeros((2, 2, 2))), grid(np.zeros((2, 2, 3))))
    with pytest.raises(ShapeError):
        volume_subtract(grid(np.zeros((2, 2, 2))), grid(np.zeros((2, 2, 2)), spacing=(1, 1, 2)))


def _from_bits(bits: int, shape) -> np.ndarray:
    n = int(np.prod(shape))
    return ((bits >> np.arange(n)) & 1).astype(np.uint8).reshape(shape)


@pytest.mark.parametrize("shape", [(1, 1, 1), (2, 1, 1), (2, 2, 1)])
def test_set_algebra_exhaustive(shape):
    n = int(np.prod(shape))
    for ba, bb in itertools.product(range(2**n), repeat=2):
        a, b = grid(_from_bits(ba, shape)), grid(_from_bits(bb, shape))
        diff = volume_subtract(a, b)
        union = volume_add(a, b)
        inter = volume_intersect(a, b)
        # Bitwise oracle on the integer encodings.
        assert diff == grid(_from_bits(ba & ~bb, shape))
        assert union == grid(_from_bits(ba | bb, shape))
        assert inter == grid(_from_bits(ba & bb, shape))
        assert volume_add(diff, inter) == a


binary_volumes = st.tuples(st.integers(1, 4), st.integers(1, 4), st.integers(1, 4)).flatmap(
    lambda s: st.tuples(
        arrays(np.uint8, s, elements=st.integers(0, 1)),
        arrays(np.uint8, s, elements=st.integers(0, 1)),
    )
)


@settings(max_examples=200, deadline=None)
@given(binary_volumes)
def test_set_algebra_properties(pair):
    a, b = grid(pair[0]), grid(pair[1])
    assert volume_add(volume_subtract(a, b), volume_intersect(a, b)) == a
    assert volume_add(a, b) == volume_add(b, a)
    assert not (volume_subtract(a, b).mask & b.mask).any()
    # Add after subtract restores a when b is inside a.
    inner = volume_intersect(a, b)
    assert volume_add(volume_subtract(a, inner), inner) == a


def test_fractional_clamped_arithmetic():
    a = grid(np.array([0.2, 0.7, 1.0, 0.0]).reshape(4, 1, 1))
    b = grid(np.array([0.5, 0.5, 0.5, 0.5]).reshape(4, 1, 1))
    assert np.allclose(volume_subtract(a, b).data.ravel(), [0.0, 0.2, 0.5, 0.0])
    assert np.allclose(volume_add(a, b).data.ravel(), [0.7, 1.0, 1.0, 0.5])


def test_threshold():
    g = grid(np.array([0.4, 0.5, 0.6]).reshape(3, 1, 1))
    assert threshold_grid(g).data.ravel().tolist() == [0, 0, 1]
    assert threshold_grid(g, inclusive=True).data.ravel().tolist() == [0, 1, 1]
    assert VoxelGrid.like(np.zeros((3, 1, 1), dtype=np.uint8), g).count() == 0
