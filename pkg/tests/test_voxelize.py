import math

import numpy as np
import pytest

from pointslice import oracles
from pointslice.errors import ChannelMismatch, EmptyBatch, InvalidSpec, PointFileError
from pointslice.sparse import to_dense
from pointslice.spconv import ConvLayer
from pointslice.voxelize import PointCloud, VoxelGridSpec, encode_features, read_xyzi, voxelize, write_xyzi

CUBE = VoxelGridSpec((-1, -1, -1), (1, 1, 1), (0.5, 0.5, 0.5))


def test_single_point_hand_computed():
    v = voxelize([PointCloud([[0.0, 0.0, 0.0, 0.7]])], CUBE)
    assert v.coords.tolist() == [[0, 2, 2, 2]]
    f = v.features[0]
    assert f[:3].tolist() == [-0.5, -0.5, -0.5]
    assert f[3] == pytest.approx(0.7)
    assert f[4] == pytest.approx(math.log(2) / math.log(65), abs=1e-7)


def test_coincident_points_average_intensity():
    v = voxelize([PointCloud([[0.1, 0.1, 0.1, 0.2], [0.1, 0.1, 0.1, 0.8]])], CUBE)
    assert v.n_active == 1
    assert v.features[0, 3] == pytest.approx(0.5)
    assert v.features[0, 4] == pytest.approx(math.log(3) / math.log(65), abs=1e-7)


def test_count_term_clamped():
    pts = np.tile([[0.1, 0.1, 0.1, 0.5]], (200, 1))
    assert voxelize([PointCloud(pts)], CUBE).features[0, 4] == 1.0


def test_upper_boundary_dropped_lower_kept():
    pts = [[1.0, 0.0, 0.0, 0], [0.0, 1.0, 0.0, 0], [0.0, 0.0, 1.0, 0], [-1.0, -1.0, -1.0, 0]]
    v = voxelize([PointCloud(pts)], CUBE)
    assert v.coords.tolist() == [[0, 0, 0, 0]]


def test_empty_batch_and_empty_cloud():
    with pytest.raises(EmptyBatch):
        voxelize([], CUBE)
    v = voxelize([PointCloud(np.zeros((0, 4)))], CUBE)
    assert v.n_active == 0 and v.channels == 5


def test_invalid_spec():
    with pytest.raises(InvalidSpec):
        VoxelGridSpec((0, 0, 0), (1, 1, 0), (0.1, 0.1, 0.1))
    with pytest.raises(InvalidSpec):
        VoxelGridSpec((0, 0, 0), (1, 1, 1), (0.1, 0, 0.1))
    with pytest.raises(InvalidSpec):
        VoxelGridSpec((0, 0, math.nan), (1, 1, 1), (0.1, 0.1, 0.1))


def test_point_cloud_rejects_nan():
    with pytest.raises(PointFileError):
        PointCloud([[0, 0, math.inf, 0]])


def test_waymo_grid_dims():
    assert VoxelGridSpec().grid_dims == (40, 1888, 1888)
    assert VoxelGridSpec().as_pillars().grid_dims == (1, 1888, 1888)


def test_matches_scalar_oracle_1e4(rng):
    spec = VoxelGridSpec((-3, -3, -1), (3, 3, 1), (0.2, 0.2, 0.25))
    clouds = [PointCloud(np.column_stack([rng.uniform(-3.5, 3.5, (10_000, 3)), rng.uniform(0, 1, 10_000)]))
              for _ in range(2)]
    v = voxelize(clouds, spec)
    bins = oracles.scalar_voxelize([c.points for c in clouds], spec.range_min, spec.range_max,
                                   spec.voxel_size, spec.axis_dims)
    assert [tuple(c) for c in v.coords.tolist()] == sorted(bins)
    ref = np.array([[a[0] / a[4], a[1] / a[4], a[2] / a[4], a[3] / a[4],
                     min(math.log1p(a[4]) / math.log1p(64), 1.0)] for a in (bins[k] for k in sorted(bins))])
    assert np.array_equal(v.features, ref.astype(np.float32))


def test_coords_in_bounds(rng):
    spec = VoxelGridSpec((-2, -2, -2), (2, 2, 2), (0.3, 0.3, 0.3))
    v = voxelize([PointCloud(np.column_stack([rng.uniform(-3, 3, (5000, 3)), rng.random(5000)]))], spec)
    h, w, l = spec.grid_dims
    assert (v.coords[:, 1] < h).all() and (v.coords[:, 2] < w).all() and (v.coords[:, 3] < l).all()
    assert (v.coords >= 0).all()


def test_permutation_invariance(rng):
    pts = np.column_stack([rng.normal(0, 0.6, (4000, 3)), rng.random(4000)])
    a = voxelize([PointCloud(pts)], CUBE)
    b = voxelize([PointCloud(pts[rng.permutation(len(pts))])], CUBE)
    assert np.array_equal(a.coords, b.coords)
    assert np.abs(a.features - b.features).max() <= 1e-6


def _enc(w, b):
    return ConvLayer("enc", np.asarray(w, np.float32).reshape(1, 1, 1, *np.shape(w)), b)


def test_encode_identity(rng):
    pts = np.column_stack([rng.uniform(-1, 1, (300, 3)), rng.random(300)])
    raw = voxelize([PointCloud(pts)], CUBE)
    raw = raw.replace_features(np.abs(raw.features))
    out = encode_features(raw, _enc(np.eye(5), np.zeros(5)))
    assert out.equals(raw)


def test_encode_zero_keeps_sites(rng):
    raw = voxelize([PointCloud(np.column_stack([rng.uniform(-1, 1, (300, 3)), rng.random(300)]))], CUBE)
    out = encode_features(raw, _enc(np.zeros((5, 7)), -np.ones(7)))
    assert np.array_equal(out.coords, raw.coords)
    assert out.channels == 7 and not out.features.any()


def test_encode_matches_dense_oracle(rng):
    raw = voxelize([PointCloud(np.column_stack([rng.uniform(-1, 1, (500, 3)), rng.random(500)]))], CUBE)
    w, b = rng.standard_normal((5, 6)), rng.standard_normal(6)
    enc = _enc(w, b)
    out = encode_features(raw, enc)
    ref = np.maximum(oracles.dense_conv(to_dense(raw), enc.weights, enc.bias), 0)
    ref *= oracles.active_mask(raw)[..., None]
    got = to_dense(out)
    assert np.allclose(got, ref, rtol=1e-6, atol=1e-6)


def test_encode_channel_mismatch():
    raw = voxelize([PointCloud([[0, 0, 0, 0.5]])], CUBE)
    with pytest.raises(ChannelMismatch):
        encode_features(raw, _enc(np.zeros((4, 3)), None))


def test_xyzi_roundtrip(tmp_path, rng):
    pts = np.column_stack([rng.uniform(-5, 5, (100, 3)), rng.random(100)]).astype(np.float32)
    p = tmp_path / "a.xyzi"
    write_xyzi(p, PointCloud(pts))
    assert p.stat().st_size == 1600
    assert np.array_equal(read_xyzi(p).points, pts.astype(np.float64))


def test_xyzi_bad_length(tmp_path):
    p = tmp_path / "bad.xyzi"
    p.write_bytes(b"\0" * 20)
    with pytest.raises(PointFileError):
        read_xyzi(p)
    (tmp_path / "empty.xyzi").write_bytes(b"")
    assert len(read_xyzi(tmp_path / "empty.xyzi")) == 0
