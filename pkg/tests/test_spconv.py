import itertools

import numpy as np
import pytest

from pointslice import kernels, oracles
from pointslice.check import _reach_mask, random_layer, random_sparse
from pointslice.errors import ChannelMismatch, EvenKernel, GeometryMismatch, MissingPairedActiveSet, ShapeMismatch
from pointslice.sparse import empty, from_coords, to_dense
from pointslice.spconv import (
    STRIDED,
    TRANSPOSED,
    ConvLayer,
    build_rulebook_strided,
    build_rulebook_subm,
    conv_forward,
    transposed_conv_forward,
    workers,
)


def test_subm_single_site_one_center_pair():
    t = from_coords([(0, 3, 3)], [[1.0]], (8, 8), 1)
    for k in (1, 3, 5):
        rb = build_rulebook_subm(t, (k, k))
        assert rb.pair_set() == {((k * k) // 2, 0, 0)}


def test_subm_two_adjacent_sites_four_pairs():
    t = from_coords([(0, 2, 2), (0, 2, 3)], np.ones((2, 1)), (8, 8), 1)
    rb = build_rulebook_subm(t, (3, 3))
    assert rb.n_pairs == 4
    assert {(o, i, j) for o, i, j in rb.pair_set() if o == 4} == {(4, 0, 0), (4, 1, 1)}
    assert np.array_equal(rb.output_coords, t.coords)


def test_subm_even_kernel_rejected():
    t = from_coords([(0, 1, 1)], [[1.0]], (4, 4), 1)
    with pytest.raises(EvenKernel):
        build_rulebook_subm(t, (2, 3))
    with pytest.raises(EvenKernel):
        ConvLayer("bad", np.zeros((2, 2, 1, 1)))


def test_subm_pairs_match_brute_force(rng):
    for _ in range(20):
        t = random_sparse(rng, (8, 8), int(rng.integers(1, 3)), float(rng.uniform(0.05, 0.5)), 1)
        k = (int(rng.choice([1, 3, 5])), int(rng.choice([1, 3])))
        assert build_rulebook_subm(t, k).pair_set() == oracles.brute_force_subm_pairs(t.coords, k)


def test_rulebook_invariants(rng):
    t = random_sparse(rng, (6, 7, 8), 2, 0.2, 1)
    for rb in (build_rulebook_subm(t, (3, 3, 3)), build_rulebook_strided(t, (3, 3, 3), (2, 2, 2))):
        assert (rb.in_rows < t.n_active).all()
        assert (rb.out_rows < rb.output_coords.shape[0]).all()
        assert len(rb.pair_set()) == rb.n_pairs
        for o in range(rb.n_offsets):
            assert (np.diff(rb.pairs(o)[1]) > 0).all()


def test_strided_empty_input():
    rb = build_rulebook_strided(empty((16, 16), 1, 1), (3, 3), (2, 2))
    assert rb.n_pairs == 0 and rb.output_coords.shape == (0, 3)
    assert rb.output_shape == (8, 8)


def test_strided_single_site_example():
    t = from_coords([(0, 5, 3)], [[1.0]], (16, 16), 1)
    rb = build_rulebook_strided(t, (3, 3), (2, 2))
    assert rb.output_coords.tolist() == [[0, 2, 1], [0, 2, 2], [0, 3, 1], [0, 3, 2]]
    assert rb.output_shape == (8, 8)
    mask = _reach_mask(oracles.active_mask(t), (3, 3), (2, 2))
    assert sorted(map(tuple, np.argwhere(mask).tolist())) == [tuple(c) for c in rb.output_coords.tolist()]


def test_strided_random_10x10_vs_dense(rng):
    for _ in range(20):
        t = random_sparse(rng, (10, 10), 1, float(rng.uniform(0.02, 0.3)), 3)
        layer = random_layer(rng, (3, 3), 3, 2, STRIDED, (2, 2))
        out = conv_forward(t, layer)
        mask = _reach_mask(oracles.active_mask(t), (3, 3), (2, 2))
        assert np.array_equal(oracles.active_mask(out), mask)
        ref = oracles.dense_conv(to_dense(t), layer.weights, layer.bias, stride=(2, 2))
        assert np.abs(to_dense(out) - ref * mask[..., None]).max() <= 1e-5


def test_identity_kernel_is_identity(rng):
    t = random_sparse(rng, (6, 6, 6), 2, 0.2, 4)
    w = np.zeros((3, 3, 3, 4, 4), np.float32)
    w[1, 1, 1] = np.eye(4)
    assert conv_forward(t, ConvLayer("id", w)).equals(t)


def test_all_ones_two_sites():
    t = from_coords([(0, 2, 2), (0, 2, 3)], np.ones((2, 1)), (6, 6), 1)
    out = conv_forward(t, ConvLayer("ones", np.ones((3, 3, 1, 1))))
    assert out.features[:, 0].tolist() == [2.0, 2.0]


def test_channel_and_geometry_errors(rng):
    t = random_sparse(rng, (6, 6), 1, 0.2, 3)
    with pytest.raises(ChannelMismatch):
        conv_forward(t, random_layer(rng, (3, 3), 4, 2))
    with pytest.raises(GeometryMismatch):
        conv_forward(t, random_layer(rng, (3, 3, 3), 3, 2))
    with pytest.raises(ShapeMismatch):
        ConvLayer("s", np.zeros((3, 3, 1, 1)), stride=(2, 2))


@pytest.mark.parametrize("nd", [2, 3])
def test_subm_vs_dense(rng, nd):
    for _ in range(20):
        t = random_sparse(rng, tuple(rng.integers(3, 10, nd)), 2, float(rng.uniform(0.02, 0.3)), 3)
        layer = random_layer(rng, (3,) * nd, 3, 5)
        out = conv_forward(t, layer)
        assert np.array_equal(out.coords, t.coords)
        mask = oracles.active_mask(t)
        ref = oracles.dense_conv(to_dense(t), layer.weights, layer.bias) * mask[..., None]
        assert np.abs(to_dense(out) - ref).max() <= 1e-4


def test_transposed_restores_single_site():
    t = from_coords([(0, 5, 3)], [[1.0]], (16, 16), 1)
    down = ConvLayer("d", np.ones((3, 3, 1, 1)), None, (2, 2), STRIDED, "k")
    w = np.zeros((3, 3, 1, 1), np.float32)
    w[1, 1] = 1.0
    up = ConvLayer("u", w, None, (2, 2), TRANSPOSED, "k")
    coarse = conv_forward(t, down)
    restored = transposed_conv_forward(coarse, up)
    assert np.array_equal(restored.coords, t.coords)
    zero = transposed_conv_forward(coarse, ConvLayer("z", np.zeros((3, 3, 1, 2)), None, (2, 2), TRANSPOSED, "k"))
    assert np.array_equal(zero.coords, t.coords) and not zero.features.any()


def test_transposed_needs_paired_rulebook(rng):
    t = random_sparse(rng, (8, 8), 1, 0.2, 2)
    up = random_layer(rng, (3, 3), 2, 2, TRANSPOSED, (2, 2), indice_key="never")
    with pytest.raises(MissingPairedActiveSet):
        transposed_conv_forward(t, up)


@pytest.mark.parametrize("nd", [2, 3])
def test_transposed_vs_dense(rng, nd):
    for _ in range(20):
        t = random_sparse(rng, tuple(rng.integers(3, 10, nd)), 1, float(rng.uniform(0.05, 0.3)), 2)
        st = tuple(int(s) for s in rng.integers(1, 3, nd))
        down = random_layer(rng, (3,) * nd, 2, 3, STRIDED, st, indice_key="p")
        up = random_layer(rng, (3,) * nd, 3, 2, TRANSPOSED, st, indice_key="p")
        coarse = conv_forward(t, down)
        out = transposed_conv_forward(coarse, up)
        ref = oracles.dense_conv_transpose(to_dense(coarse), up.weights, st, t.spatial_shape, up.bias)
        assert np.array_equal(out.coords, t.coords)
        assert np.abs(to_dense(out) - ref * oracles.active_mask(t)[..., None]).max() <= 1e-4


def test_linearity(rng):
    t1 = random_sparse(rng, (8, 8, 8), 1, 0.15, 4)
    t2 = t1.replace_features(rng.standard_normal(t1.features.shape).astype(np.float32))
    layer = random_layer(rng, (3, 3, 3), 4, 3)
    layer = ConvLayer("nb", layer.weights)
    a = 1.7
    lhs = conv_forward(t1.replace_features(a * t1.features + t2.features), layer).features
    rhs = a * conv_forward(t1, layer).features + conv_forward(t2, layer).features
    assert np.abs(lhs - rhs).max() <= 1e-5


def test_bit_identical_across_workers_and_backends(rng):
    t = random_sparse(rng, (10, 20, 20), 2, 0.1, 8)
    layers = [random_layer(rng, (3, 3, 3), 8, 8), random_layer(rng, (3, 3, 3), 8, 8, STRIDED, (2, 2, 2))]
    ref = [conv_forward(t, l).features for l in layers]
    for n, b in itertools.product((1, 2, 4), kernels.available_backends()):
        with workers(n), kernels.use_backend(b):
            for l, r in zip(layers, ref):
                assert conv_forward(t, l).features.tobytes() == r.tobytes()


def test_slice_height_follows_stride(rng):
    t = random_sparse(rng, (8, 6, 6), 1, 0.3, 2)
    out = conv_forward(t, random_layer(rng, (3, 3, 3), 2, 2, STRIDED, (2, 2, 2)))
    assert out.spatial_shape == (4, 3, 3)
