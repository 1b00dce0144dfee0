"""Oracle and property checks on small random instances.

Each check draws its own cases from a seeded generator, compares the sparse
machinery against the dense references in :mod:`pointslice.oracles` and
returns the worst error it saw. :func:`run_checks` drives them all and is
what ``pointslice check`` prints.
"""

from __future__ import annotations

import math
from typing import Callable

import numpy as np

from . import kernels, oracles
from .blocks import afd_diffuse, sin_forward
from .head import Detection, HeadSpec, decode, encode_box, nms_bev, rotated_iou
from .slicing import slice_tensor, unslice_tensor
from .sparse import SparseTensor, from_coords, to_dense
from .spconv import STRIDED, SUBMANIFOLD, TRANSPOSED, ConvLayer, conv_forward, transposed_conv_forward
from .voxelize import PointCloud, VoxelGridSpec, voxelize
from .weights import parse_weights, serialize_weights


def random_sparse(rng, spatial_shape, batch_size=1, occupancy=0.1, channels=4,
                  slice_height=None) -> SparseTensor:
    """Uniformly placed active sites (at least one) with N(0, 1) features."""
    total = batch_size * int(np.prod(spatial_shape))
    n = min(total, max(1, int(round(occupancy * total))))
    flat = rng.choice(total, size=n, replace=False)
    coords = np.stack(np.unravel_index(flat, (batch_size, *spatial_shape)), axis=1)
    feats = rng.standard_normal((n, channels)).astype(np.float32)
    return from_coords(coords, feats, spatial_shape, batch_size, slice_height)


def random_layer(rng, kernel_dims, cin, cout, kind=SUBMANIFOLD, stride=None, indice_key=None,
                 name="rand") -> ConvLayer:
    w = rng.uniform(-1, 1, (*kernel_dims, cin, cout)).astype(np.float32)
    b = rng.uniform(-0.5, 0.5, cout).astype(np.float32)
    return ConvLayer(name, w, b, stride, kind, indice_key)


def _random_case(rng, nd, max_side=8, max_c=6):
    shape = tuple(int(s) for s in rng.integers(3, max_side + 1, nd))
    t = random_sparse(rng, shape, int(rng.integers(1, 3)), float(rng.uniform(0.02, 0.3)),
                      int(rng.integers(1, max_c + 1)))
    return t


def _masked_error(sparse_out: SparseTensor, dense_ref, mask) -> float:
    got = to_dense(sparse_out).astype(np.float64)
    if not np.array_equal(oracles.active_mask(sparse_out), mask):
        return math.inf
    return float(np.abs(got - dense_ref * mask[..., None]).max(initial=0.0))


def _reach_mask(mask, kernel_dims, stride):
    """Output sites of a regular conv: any active input in the receptive field."""
    ones = np.ones((*kernel_dims, 1, 1))
    return oracles.dense_conv(mask[..., None].astype(np.float64), ones, stride=stride)[..., 0] > 0


def check_slice_roundtrip(rng) -> float:
    t = _random_case(rng, 3)
    s = slice_tensor(t)
    back = unslice_tensor(s)
    return 0.0 if back.equals(t) and s.n_active == t.n_active else math.inf


def check_subm(rng, nd: int) -> float:
    t = _random_case(rng, nd)
    k = int(rng.choice([1, 3, 5]))
    layer = random_layer(rng, (k,) * nd, t.channels, int(rng.integers(1, 6)))
    ref = oracles.dense_conv(to_dense(t), layer.weights, layer.bias)
    return _masked_error(conv_forward(t, layer), ref, oracles.active_mask(t))


def check_strided(rng, nd: int) -> float:
    t = _random_case(rng, nd)
    kd = tuple(int(k) for k in rng.choice([1, 2, 3], nd))
    st = tuple(int(s) for s in rng.integers(1, 3, nd))
    layer = random_layer(rng, kd, t.channels, int(rng.integers(1, 6)), STRIDED, st)
    ref = oracles.dense_conv(to_dense(t), layer.weights, layer.bias, stride=st)
    return _masked_error(conv_forward(t, layer), ref, _reach_mask(oracles.active_mask(t), kd, st))


def check_transposed(rng, nd: int) -> float:
    t = _random_case(rng, nd)
    kd = (3,) * nd
    st = tuple(int(s) for s in rng.integers(1, 3, nd))
    c_mid = int(rng.integers(1, 5))
    down = random_layer(rng, kd, t.channels, c_mid, STRIDED, st, indice_key="d")
    up = random_layer(rng, kd, c_mid, int(rng.integers(1, 5)), TRANSPOSED, st, indice_key="d")
    coarse = conv_forward(t, down)
    coarse = coarse.replace_features(rng.standard_normal(coarse.features.shape).astype(np.float32))
    ref = oracles.dense_conv_transpose(to_dense(coarse), up.weights, st, t.spatial_shape, up.bias)
    return _masked_error(transposed_conv_forward(coarse, up), ref, oracles.active_mask(t))


def check_depth1(rng) -> float:
    """2D conv on slices against the 1 x k x k 3D conv on voxels."""
    t = _random_case(rng, 3)
    k = int(rng.choice([3, 5]))
    layer2 = random_layer(rng, (k, k), t.channels, int(rng.integers(1, 6)))
    layer3 = ConvLayer("d3", layer2.weights[None], layer2.bias)
    a = unslice_tensor(conv_forward(slice_tensor(t), layer2))
    b = conv_forward(t, layer3)
    if not np.array_equal(a.coords, b.coords):
        return math.inf
    return float(np.abs(a.features - b.features).max(initial=0.0))


def check_sin(rng, strided: bool) -> float:
    t = _random_case(rng, 3)
    s = slice_tensor(t)
    if strided:
        st = tuple(int(x) for x in rng.integers(1, 3, 3))
        layer = random_layer(rng, (3, 3, 3), t.channels, int(rng.integers(1, 6)), STRIDED, st)
        mask = _reach_mask(oracles.active_mask(t), (3, 3, 3), st)
    else:
        st = (1, 1, 1)
        layer = random_layer(rng, (3, 3, 3), t.channels, int(rng.integers(1, 6)))
        mask = oracles.active_mask(t)
    out = sin_forward(s, layer)
    if out.slice_height is None:
        return math.inf
    ref = oracles.dense_conv(to_dense(unslice_tensor(s)), layer.weights, layer.bias, stride=st)
    return _masked_error(unslice_tensor(out), ref, mask)


def check_afd(rng) -> float:
    t = _random_case(rng, 2, max_side=12)
    k = int(rng.choice([3, 5]))
    out = afd_diffuse(t, k)
    mask = oracles.active_mask(t)
    grown = oracles.dense_dilation(mask, k)
    if not np.array_equal(oracles.active_mask(out), grown):
        return math.inf
    mean, _ = oracles.neighbour_mean(to_dense(t), mask, k)
    ref = np.where(mask[..., None], to_dense(t).astype(np.float64), mean)
    got = to_dense(out).astype(np.float64)
    return float(np.abs(got[grown] - ref[grown]).max(initial=0.0))


def check_voxelize(rng) -> float:
    spec = VoxelGridSpec((-2.0, -2.0, -1.0), (2.0, 2.0, 1.0), (0.5, 0.5, 0.25))
    clouds = []
    for _ in range(int(rng.integers(1, 3))):
        n = int(rng.integers(0, 200))
        pts = np.column_stack([rng.uniform(-2.5, 2.5, (n, 3)), rng.uniform(0, 1, n)])
        clouds.append(PointCloud(pts))
    v = voxelize(clouds, spec)
    bins = oracles.scalar_voxelize([c.points for c in clouds], spec.range_min, spec.range_max,
                                   spec.voxel_size, spec.axis_dims)
    if sorted(bins) != [tuple(int(x) for x in c) for c in v.coords]:
        return math.inf
    err = 0.0
    for row, c in enumerate(v.coords):
        acc = bins[tuple(int(x) for x in c)]
        n = acc[4]
        ref = [acc[0] / n, acc[1] / n, acc[2] / n, acc[3] / n, min(math.log1p(n) / math.log1p(64), 1.0)]
        err = max(err, float(np.abs(v.features[row] - np.array(ref)).max()))
    return err


def check_backends(rng) -> float:
    names = kernels.available_backends()
    for nd in (2, 3):
        t = _random_case(rng, nd, max_side=10)
        kd = (3,) * nd
        st = tuple(int(s) for s in rng.integers(1, 3, nd))
        shape = tuple((s + 2 - 3) // q + 1 for s, q in zip(t.spatial_shape, st))
        ref_s = kernels.subm_pairs(t.coords, t.spatial_shape, kd, backend="python")
        ref_r = kernels.strided_pairs(t.coords, shape, kd, st, (1,) * nd, backend="python")
        for name in names:
            got_s = kernels.subm_pairs(t.coords, t.spatial_shape, kd, backend=name)
            got_r = kernels.strided_pairs(t.coords, shape, kd, st, (1,) * nd, backend=name)
            if not all(np.array_equal(a, b) for a, b in zip(ref_s + ref_r, got_s + got_r)):
                return math.inf
    return 0.0


def _random_box(rng, axis_aligned=False):
    yaw = 0.0 if axis_aligned else float(rng.uniform(-math.pi, math.pi))
    return (float(rng.uniform(-4, 4)), float(rng.uniform(-4, 4)),
            float(rng.uniform(0.5, 5)), float(rng.uniform(0.5, 5)), yaw)


def check_iou(rng) -> float:
    a, b = _random_box(rng, True), _random_box(rng, True)
    exact = rotated_iou(a, b) == oracles.axis_aligned_iou(a[:4], b[:4])
    p, q = _random_box(rng), _random_box(rng)
    v = rotated_iou(p, q)
    ok = exact and 0.0 <= v <= 1.0 and v == rotated_iou(q, p) and abs(rotated_iou(p, p) - 1) < 1e-12
    return 0.0 if ok else math.inf


def random_detections(rng, n, n_classes=3, n_frames=2, spread=20.0) -> list[Detection]:
    out = []
    for _ in range(n):
        l, w = rng.uniform(0.5, 6, 2)
        out.append(Detection(
            class_id=int(rng.integers(n_classes)),
            score=float(rng.choice([rng.uniform(0.3, 1.0), 0.5])),
            center=(float(rng.uniform(-spread, spread)), float(rng.uniform(-spread, spread)), 0.0),
            size=(float(l), float(w), 1.5),
            yaw=float(rng.uniform(-math.pi, math.pi)),
            batch=int(rng.integers(n_frames)),
        ))
    return out


def nms_violation(kept, threshold) -> float:
    """Largest same-frame, same-class IoU above ``threshold`` among kept boxes (0 if none)."""
    worst = 0.0
    for i in range(len(kept)):
        for j in range(i + 1, len(kept)):
            a, b = kept[i], kept[j]
            if a.class_id == b.class_id and a.batch == b.batch:
                iou = rotated_iou(a.bev, b.bev)
                if iou > threshold:
                    worst = max(worst, iou)
    return worst


def check_nms(rng) -> float:
    thr = float(rng.uniform(0.05, 0.7))
    return nms_violation(nms_bev(random_detections(rng, int(rng.integers(0, 40))), thr), thr)


def check_encode_decode(rng) -> float:
    spec = HeadSpec(score_threshold=0.1)
    g = spec.grid
    w = g.grid_dims[1] // spec.bev_stride
    site = (int(rng.integers(w)), int(rng.integers(w)))
    cell = g.voxel_size[0] * spec.bev_stride
    det = Detection(
        0, 0.9,
        (g.range_min[0] + (site[1] + rng.uniform(0, 1)) * cell,
         g.range_min[1] + (site[0] + rng.uniform(0, 1)) * cell, float(rng.uniform(-1, 2))),
        tuple(float(x) for x in rng.uniform(0.5, 6, 3)),
        float(rng.uniform(-math.pi, math.pi)),
    )
    reg = encode_box(det, site, spec)
    coords = np.array([[0, *site]])
    shape = (g.grid_dims[1] // spec.bev_stride, g.grid_dims[2] // spec.bev_stride)
    heat = from_coords(coords, np.array([[0.9]]), shape, 1)
    regt = from_coords(coords, reg[None].astype(np.float32), shape, 1)
    got = decode(heat, regt, spec)[0]
    dyaw = abs(math.remainder(got.yaw - det.yaw, 2 * math.pi))
    return max(max(abs(a - b) for a, b in zip(got.center, det.center)),
               max(abs(a - b) for a, b in zip(got.size, det.size)), dyaw)


def check_weights_roundtrip(rng) -> float:
    ws = {f"t{i}.weight": rng.standard_normal(tuple(rng.integers(1, 4, int(rng.integers(1, 5)))))
          .astype(np.float32) for i in range(int(rng.integers(0, 5)))}
    back = parse_weights(serialize_weights(ws))
    same = back.keys() == ws.keys() and all(
        back[k].shape == ws[k].shape and back[k].tobytes() == ws[k].tobytes() for k in ws
    )
    return 0.0 if same else math.inf


CHECKS: list[tuple[str, Callable, float]] = [
    ("slice roundtrip", check_slice_roundtrip, 0.0),
    ("submanifold 2D vs dense", lambda r: check_subm(r, 2), 1e-4),
    ("submanifold 3D vs dense", lambda r: check_subm(r, 3), 1e-4),
    ("strided 2D vs dense", lambda r: check_strided(r, 2), 1e-4),
    ("strided 3D vs dense", lambda r: check_strided(r, 3), 1e-4),
    ("transposed 2D vs dense", lambda r: check_transposed(r, 2), 1e-4),
    ("transposed 3D vs dense", lambda r: check_transposed(r, 3), 1e-4),
    ("depth-1 slicing", check_depth1, 1e-5),
    ("SIN submanifold vs dense", lambda r: check_sin(r, False), 1e-4),
    ("SIN strided vs dense", lambda r: check_sin(r, True), 1e-4),
    ("AFD vs dilation oracle", check_afd, 1e-6),
    ("voxelize vs scalar oracle", check_voxelize, 1e-6),
    ("rulebook backends agree", check_backends, 0.0),
    ("rotated IoU properties", check_iou, 0.0),
    ("NMS invariant", check_nms, 0.0),
    ("decode/encode identity", check_encode_decode, 1e-5),
    ("weights roundtrip", check_weights_roundtrip, 0.0),
]


def run_checks(cases: int = 10, seed: int = 0, out: Callable[[str], None] = print) -> bool:
    ok = True
    for i, (name, fn, tol) in enumerate(CHECKS):
        rng = np.random.default_rng([seed, i])
        worst = max((fn(rng) for _ in range(cases)), default=0.0)
        passed = worst <= tol
        ok &= passed
        out(f"{'PASS' if passed else 'FAIL'}  {name:<28} worst={worst:.3g} tol={tol:g}")
    return ok
