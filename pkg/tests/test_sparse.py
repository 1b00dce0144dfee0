import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from pointslice.check import random_sparse
from pointslice.errors import (
    ComponentOverflow,
    DuplicateCoordinate,
    OracleSizeExceeded,
    OutOfBounds,
    ShapeMismatch,
)
from pointslice.sparse import (
    empty,
    from_coords,
    from_dense,
    pack_key,
    pack_keys,
    to_dense,
    unpack_key,
    unpack_keys,
)


def test_from_coords_empty():
    t = from_coords(np.zeros((0, 4), int), np.zeros((0, 3), np.float32), (4, 4, 4), 1)
    assert t.n_active == 0
    assert t.spatial_shape == (4, 4, 4)


def test_from_coords_single_site():
    t = from_coords([(0, 1, 2, 3)], np.ones((1, 8)), (4, 4, 4), 1)
    assert t.n_active == 1
    assert t.channels == 8
    assert t.coords.dtype == np.int32 and t.features.dtype == np.float32


def test_from_coords_duplicate():
    with pytest.raises(DuplicateCoordinate) as exc:
        from_coords([(0, 0, 0, 0), (0, 0, 0, 0)], np.ones((2, 1)), (4, 4, 4), 1)
    assert exc.value.row == 1


def test_duplicate_reports_first_offending_row():
    coords = [(0, 1, 1), (0, 2, 2), (0, 3, 3), (0, 2, 2), (0, 1, 1)]
    with pytest.raises(DuplicateCoordinate) as exc:
        from_coords(coords, np.ones((5, 1)), (4, 4), 1)
    assert exc.value.row == 3


def test_out_of_bounds_reports_coord_and_bound():
    with pytest.raises(OutOfBounds) as exc:
        from_coords([(0, 0, 4, 0)], np.ones((1, 1)), (4, 4, 4), 1)
    assert tuple(exc.value.coord) == (0, 0, 4, 0)
    assert tuple(exc.value.bound) == (1, 4, 4, 4)
    with pytest.raises(OutOfBounds):
        from_coords([(1, 0, 0)], np.ones((1, 1)), (4, 4), 1)
    with pytest.raises(OutOfBounds):
        from_coords([(0, -1, 0)], np.ones((1, 1)), (4, 4), 1)


def test_shape_mismatch():
    with pytest.raises(ShapeMismatch):
        from_coords([(0, 0, 0)], np.ones((2, 1)), (4, 4), 1)
    with pytest.raises(ShapeMismatch):
        from_coords([(0, 0, 0)], np.ones((1, 1)), (4, 4, 4), 1)
    with pytest.raises(ShapeMismatch):
        from_coords([(0, 0, 0)], np.ones((1, 1)), (0, 4), 1)
    with pytest.raises(ShapeMismatch):
        from_coords([(0, 0, 0)], np.ones((1, 1)), (4, 4), 3, slice_height=2)


def test_coords_are_sorted_and_features_follow():
    coords = [(0, 3, 1), (0, 0, 2), (1, 0, 0), (0, 0, 1)]
    feats = np.arange(4, dtype=np.float32)[:, None]
    t = from_coords(coords, feats, (4, 4), 2)
    assert t.coords.tolist() == [[0, 0, 1], [0, 0, 2], [0, 3, 1], [1, 0, 0]]
    assert t.features[:, 0].tolist() == [3, 1, 0, 2]


def test_tensor_is_immutable():
    t = from_coords([(0, 1, 1)], np.ones((1, 2)), (4, 4), 1)
    with pytest.raises(ValueError):
        t.features[0, 0] = 5
    with pytest.raises(ValueError):
        t.coords[0, 0] = 5


def test_to_dense_empty():
    a = to_dense(empty((2, 2), 1, 1))
    assert a.shape == (1, 2, 2, 1)
    assert not a.any()


def test_to_dense_single_site():
    a = to_dense(from_coords([(0, 1, 1)], [[5.0]], (2, 2), 1))
    assert np.count_nonzero(a) == 1
    assert a[0, 1, 1, 0] == 5.0


def test_to_dense_cap():
    t = empty((64, 64, 64), 1, 4)
    with pytest.raises(OracleSizeExceeded):
        to_dense(t, cap=1000)


def test_dense_roundtrip_8x8(rng):
    t = random_sparse(rng, (8, 8), 1, 0.3, 3)
    assert from_dense(to_dense(t)).equals(t)


def test_from_dense_zero_and_single():
    assert from_dense(np.zeros((1, 4, 4, 2))).n_active == 0
    a = np.zeros((1, 4, 4, 2))
    a[0, 3, 2, 0] = 1.5
    t = from_dense(a)
    assert t.coords.tolist() == [[0, 3, 2]]


def test_dense_sparse_dense_100_random_arrays(rng):
    for _ in range(100):
        shape = (int(rng.integers(1, 3)), *rng.integers(1, 7, int(rng.integers(2, 4))), int(rng.integers(1, 4)))
        a = rng.standard_normal(shape).astype(np.float32)
        a[rng.random(shape[:-1]) < 0.7] = 0
        assert np.array_equal(to_dense(from_dense(a)), a)


def test_sparse_dense_sparse_random(rng):
    for _ in range(50):
        nd = int(rng.integers(2, 4))
        t = random_sparse(rng, tuple(rng.integers(1, 9, nd)), int(rng.integers(1, 4)),
                          float(rng.uniform(0.01, 0.5)), int(rng.integers(1, 5)))
        # rows whose features happen to be all zero would vanish; N(0,1) makes that measure-zero
        assert from_dense(to_dense(t)).equals(t)


def test_pack_key_examples():
    assert pack_key((0, 0, 0, 0)) == 0
    assert unpack_key(pack_key((3, 7, 1, 9)), 4) == (3, 7, 1, 9)
    assert unpack_key(pack_key((5, 100, 200)), 3) == (5, 100, 200)


def test_pack_key_overflow():
    with pytest.raises(ComponentOverflow):
        pack_key((0, 1 << 16, 0, 0))
    with pytest.raises(ComponentOverflow):
        pack_key((0, -1, 0, 0))
    with pytest.raises(ComponentOverflow):
        pack_key((1 << 22, 0, 0))
    with pytest.raises(ComponentOverflow):
        pack_keys(np.array([[0, 0, 1 << 21]]))


def test_pack_key_no_collisions_1e5(rng):
    for d, hi in ((4, [1 << 16] * 4), (3, [1 << 22, 1 << 21, 1 << 21])):
        coords = np.column_stack([rng.integers(0, h, 100_000) for h in hi])
        coords = np.unique(coords, axis=0)
        keys = pack_keys(coords)
        assert np.unique(keys).size == coords.shape[0]
        assert np.array_equal(unpack_keys(keys, d), coords)


def test_pack_keys_order_is_lexicographic(rng):
    coords = rng.integers(0, 50, (500, 4))
    keys = pack_keys(coords)
    order = np.lexsort(coords.T[::-1])
    assert np.all(np.diff(keys[order].astype(np.float64)) >= 0)


@given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 5), st.integers(0, 5)), min_size=1,
                max_size=30), st.data())
def test_construction_rejects_every_violation(sites, data):
    """Fuzz: add a duplicate or out-of-range row; construction must fail."""
    sites = list(dict.fromkeys(sites))
    kind = data.draw(st.sampled_from(["dup", "oob"]))
    if kind == "dup":
        sites.insert(data.draw(st.integers(0, len(sites))), data.draw(st.sampled_from(sites)))
        exc = DuplicateCoordinate
    else:
        axis = data.draw(st.integers(0, 2))
        bad = list(sites[0])
        bad[axis] = data.draw(st.sampled_from([-1, (2, 6, 6)[axis], 100]))
        sites.append(tuple(bad))
        exc = OutOfBounds
    with pytest.raises(exc):
        from_coords(sites, np.ones((len(sites), 1)), (6, 6), 2)


@given(st.lists(st.tuples(st.integers(0, 1), st.integers(0, 5), st.integers(0, 5)),
                unique=True, max_size=30))
def test_valid_construction_accepted(sites):
    t = from_coords(sites, np.arange(len(sites), dtype=np.float32)[:, None], (6, 6), 2)
    assert t.n_active == len(sites)
    assert sorted(map(tuple, t.coords.tolist())) == sorted(sites)
