"""Acceptance suite: one test per criterion, named ``test_criterion_<N>_*``.

The terminal summary prints a PASS/FAIL line for each (see conftest.py).
"""

import math
import subprocess
import sys
import time
from fractions import Fraction

import numpy as np
import pytest
from shapely.geometry import Polygon

from pointslice import oracles
from pointslice.bench import run_bench
from pointslice.blocks import BackboneConfig, backbone_features, backbone_layer_specs, make_layers
from pointslice.check import (
    _reach_mask,
    check_depth1,
    check_encode_decode,
    check_sin,
    nms_violation,
    random_detections,
    random_layer,
    random_sparse,
)
from pointslice.head import HeadSpec, box_corners, nms_bev, rotated_iou
from pointslice.scene import SceneSpec
from pointslice.slicing import slice_tensor, unslice_tensor
from pointslice.sparse import to_dense
from pointslice.spconv import STRIDED, TRANSPOSED, conv_forward, transposed_conv_forward, workers
from pointslice.weights import count_params, init_weights


def test_criterion_1_slice_bijection(note):
    rng = np.random.default_rng(1)
    t0 = time.perf_counter()
    sites = 0
    for _ in range(1000):
        shape = (int(rng.integers(1, 33)), int(rng.integers(1, 65)), int(rng.integers(1, 65)))
        t = random_sparse(rng, shape, int(rng.integers(1, 5)), float(rng.uniform(0.001, 0.05)), 4)
        s = slice_tensor(t)
        assert s.n_active == t.n_active
        back = unslice_tensor(s)
        assert back.equals(t)
        assert back.features.tobytes() == t.features.tobytes()
        sites += t.n_active
    elapsed = time.perf_counter() - t0
    note(f"{sites} sites, {elapsed:.2f} s")
    assert elapsed < 10


def _dense_case(rng, kind):
    nd = int(rng.integers(2, 4))
    shape = tuple(int(s) for s in rng.integers(3, 17, nd))
    cin, cout = int(rng.integers(1, 17)), int(rng.integers(1, 17))
    t = random_sparse(rng, shape, int(rng.integers(1, 3)), float(rng.uniform(0.01, 0.1)), cin)
    if kind == "submanifold":
        layer = random_layer(rng, (int(rng.choice([1, 3, 5])),) * nd, cin, cout)
        ref = oracles.dense_conv(to_dense(t), layer.weights, layer.bias)
        mask = oracles.active_mask(t)
        out = conv_forward(t, layer)
        assert np.array_equal(out.coords, t.coords)
    elif kind == "strided":
        kd = tuple(int(k) for k in rng.choice([1, 2, 3], nd))
        st = tuple(int(s) for s in rng.integers(1, 3, nd))
        layer = random_layer(rng, kd, cin, cout, STRIDED, st)
        ref = oracles.dense_conv(to_dense(t), layer.weights, layer.bias, stride=st)
        mask = _reach_mask(oracles.active_mask(t), kd, st)
        out = conv_forward(t, layer)
    else:
        st = tuple(int(s) for s in rng.integers(1, 3, nd))
        mid = int(rng.integers(1, 17))
        down = random_layer(rng, (3,) * nd, cin, mid, STRIDED, st, indice_key="k")
        layer = random_layer(rng, (3,) * nd, mid, cout, TRANSPOSED, st, indice_key="k")
        coarse = conv_forward(t, down)
        coarse = coarse.replace_features(rng.standard_normal(coarse.features.shape).astype(np.float32))
        ref = oracles.dense_conv_transpose(to_dense(coarse), layer.weights, st, t.spatial_shape, layer.bias)
        mask = oracles.active_mask(t)
        out = transposed_conv_forward(coarse, layer)
    assert np.array_equal(oracles.active_mask(out), mask)
    return float(np.abs(to_dense(out) - ref * mask[..., None]).max(initial=0.0))


def test_criterion_2_dense_oracle_equivalence(note):
    rng = np.random.default_rng(2)
    t0 = time.perf_counter()
    worst = {k: max(_dense_case(rng, k) for _ in range(100)) for k in ("submanifold", "strided", "transposed")}
    elapsed = time.perf_counter() - t0
    note(", ".join(f"{k} {v:.1e}" for k, v in worst.items()) + f", {elapsed:.1f} s")
    assert max(worst.values()) <= 1e-4
    assert elapsed < 60


def test_criterion_3_depth1_slicing(note):
    rng = np.random.default_rng(3)
    worst = max(check_depth1(rng) for _ in range(100))
    note(f"worst {worst:.1e}")
    assert worst <= 1e-5


def test_criterion_4_sin_soundness(note):
    rng = np.random.default_rng(4)
    strided = max(check_sin(rng, True) for _ in range(100))
    subm = max(check_sin(rng, False) for _ in range(100))
    note(f"strided {strided:.1e}, submanifold {subm:.1e}")
    assert strided <= 1e-4 and subm <= 1e-4


def _impulse_response(cfg, t, row, rng):
    weights = make_layers(backbone_layer_specs(cfg), init_weights(cfg, HeadSpec(), 5))
    base = backbone_features(t, cfg, weights)
    bump = t.features.copy()
    bump[row] += 10.0 * np.abs(rng.standard_normal(t.channels)).astype(np.float32)
    hit = backbone_features(t.replace_features(bump), cfg, weights)
    assert np.array_equal(hit.coords, base.coords)
    moved = np.abs(hit.features - base.features).max(axis=1) > 0
    v = unslice_tensor(base)
    return v.coords[moved], v


def test_criterion_5_slice_isolation(note):
    rng = np.random.default_rng(5)
    chans = (8, 8, 8, 8)
    t = random_sparse(rng, (40, 64, 64), 1, 0.01, chans[0])
    # impulse on a site with an active vertical neighbour
    keys = {tuple(c) for c in t.coords.tolist()}
    row = next(i for i, (b, z, y, x) in enumerate(t.coords.tolist()) if (b, z + 1, y, x) in keys)
    z0 = int(t.coords[row, 1])

    plain = BackboneConfig(sin_positions=(), down_positions=(2, 4, 8), channels=chans)
    assert not plain.edb_sin
    resp, v = _impulse_response(plain, t, row, rng)
    assert v.spatial_shape[0] == 40
    assert len(resp) > 0
    isolated = set(resp[:, 1].tolist())
    assert isolated == {z0}

    resp, v = _impulse_response(BackboneConfig(channels=chans), t, row, rng)
    levels = sorted(set(resp[:, 1].tolist()))
    note(f"no SIN: response in z {sorted(isolated)}; default SIN: z levels {levels} of {v.spatial_shape[0]}")
    assert len(levels) >= 2
    assert any(b - a == 1 for a, b in zip(levels, levels[1:]))


def test_criterion_6_parameter_ratio(note):
    head = HeadSpec()
    checked = 0
    for cfg in (BackboneConfig(), BackboneConfig(kernel_size=5)):
        full = {r: count_params(init_weights(cfg, head, 0, r))[1] for r in ("slice", "voxel3d")}
        bb = {r: sum(s.n_params for s in backbone_layer_specs(cfg, r)) for r in ("slice", "voxel3d")}
        ratio = full["slice"] / full["voxel3d"]
        if cfg.kernel_size == 3:
            note(f"{full['slice']:,} / {full['voxel3d']:,} = {ratio:.3f}")
        assert ratio < 0.85
        assert bb["slice"] / bb["voxel3d"] < 0.85

        s2 = {s.name: s for s in backbone_layer_specs(cfg, "slice")}
        s3 = {s.name: s for s in backbone_layer_specs(cfg, "voxel3d")}
        for name, a in s2.items():
            b = s3.get(name)
            if b is None or len(a.kernel_dims) != 2:
                continue
            assert len(b.kernel_dims) == 3 and (a.cin, a.cout) == (b.cin, b.cout)
            k = b.kernel_dims[0]
            wa = math.prod(a.kernel_dims) * a.cin * a.cout
            wb = math.prod(b.kernel_dims) * b.cin * b.cout
            assert Fraction(wa, wb) == Fraction(1, k)
            checked += 1
    assert checked > 0


@pytest.fixture(scope="module")
def default_bench():
    scene = SceneSpec()
    t0 = time.perf_counter()
    with workers(1):
        report = run_bench(scene, BackboneConfig(), representations=("slice", "voxel3d"))
    return report, time.perf_counter() - t0


def test_criterion_7_runtime_direction(default_bench, note):
    report, elapsed = default_bench
    s, v = report.results["slice"], report.results["voxel3d"]
    assert s.input_voxels == v.input_voxels >= 50_000
    speedup = report.ratios()["slice"]["backbone_speedup"]
    note(f"{s.input_voxels} voxels, backbone median {s.backbone_median_ms:.0f} vs "
         f"{v.backbone_median_ms:.0f} ms, speedup {speedup:.2f}x, bench {elapsed:.0f} s")
    assert report.workers == 1
    assert speedup > 1.0
    assert elapsed < 300


def test_criterion_8_memory_proxy(default_bench, note):
    report, _ = default_bench
    s, v = report.results["slice"], report.results["voxel3d"]
    ratio = report.ratios()["slice"]["memory_proxy_ratio"]
    note(f"peak feature bytes {s.peak_feature_bytes:,} vs {v.peak_feature_bytes:,}, ratio {ratio:.3f}")
    assert s.peak_feature_bytes <= v.peak_feature_bytes


def _shapely_iou(a, b):
    pa, pb = Polygon(box_corners(*a)), Polygon(box_corners(*b))
    inter = pa.intersection(pb).area
    return inter / (pa.area + pb.area - inter)


def test_criterion_9_head_properties(note):
    rng = np.random.default_rng(9)
    for _ in range(1000):
        thr = float(rng.uniform(0.05, 0.7))
        kept = nms_bev(random_detections(rng, int(rng.integers(0, 40)), spread=8.0), thr)
        assert nms_violation(kept, thr) == 0.0

    dec = max(check_encode_decode(rng) for _ in range(1000))
    assert dec <= 1e-5

    def dyadic(lo, hi):
        return float(rng.integers(lo * 64, hi * 64)) / 64

    exact = 0
    for _ in range(100):
        a = (*rng.uniform(-4, 4, 2), *rng.uniform(0.5, 5, 2), 0.0)
        b = (*rng.uniform(-4, 4, 2), *rng.uniform(0.5, 5, 2), 0.0)
        assert rotated_iou(a, b) == oracles.axis_aligned_iou(a[:4], b[:4])
        # on a dyadic lattice every area is exact, so the polygon clip must agree bit for bit
        p = (dyadic(-1, 1), dyadic(-1, 1), dyadic(0.5, 5), dyadic(0.5, 5), 0.0)
        q = (dyadic(-1, 1), dyadic(-1, 1), dyadic(0.5, 5), dyadic(0.5, 5), 0.0)
        assert rotated_iou(p, q) == _shapely_iou(p, q)
        exact += rotated_iou(p, q) > 0

    worst = 0.0
    for _ in range(100):
        a = (*rng.uniform(-3, 3, 2), *rng.uniform(0.5, 5, 2), float(rng.uniform(-math.pi, math.pi)))
        b = (*rng.uniform(-3, 3, 2), *rng.uniform(0.5, 5, 2), float(rng.uniform(-math.pi, math.pi)))
        worst = max(worst, abs(rotated_iou(a, b) - _shapely_iou(a, b)))
    note(f"decode/encode {dec:.1e}, {exact} overlapping exact cases, rotated worst {worst:.1e}")
    assert worst <= 1e-6


def _cli(*args, cwd):
    out = subprocess.run([sys.executable, "-m", "pointslice.cli", *args], cwd=cwd,
                         capture_output=True, timeout=600)
    assert out.returncode == 0, out.stderr.decode()
    return out.stdout


def test_criterion_10_end_to_end_determinism(tmp_path, note):
    (tmp_path / "default.cfg").write_text("")
    _cli("gen", "scene.xyzi", "--ground-points", "20000", cwd=tmp_path)
    _cli("init", "default.cfg", "w.psw", "--seed", "3", cwd=tmp_path)
    runs = [_cli("infer", "scene.xyzi", "w.psw", "default.cfg", cwd=tmp_path) for _ in range(2)]
    runs += [_cli("--workers", str(n), "infer", "scene.xyzi", "w.psw", "default.cfg", cwd=tmp_path)
             for n in (2, 4)]
    n_lines = runs[0].count(b"\n")
    note(f"{n_lines} detections, {len(runs)} runs identical")
    assert n_lines > 0
    assert all(r == runs[0] for r in runs)
