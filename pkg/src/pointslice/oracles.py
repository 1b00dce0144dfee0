"""Slow, independent reference implementations.

None of these touch the rulebook machinery; they work on dense arrays or
plain Python loops and exist only to cross-check the sparse path.
"""

from __future__ import annotations

import itertools
import math

import numpy as np


def dense_conv(x, w, bias=None, stride=None):
    """Cross-correlation of ``x`` (B, *S, Cin) with ``w`` (*K, Cin, Cout),
    zero padding ``K // 2`` per axis."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    kdims = w.shape[:-2]
    nsp = len(kdims)
    stride = (1,) * nsp if stride is None else tuple(stride)
    pad = [k // 2 for k in kdims]
    S = x.shape[1:-1]
    O = [(s + 2 * p - k) // st + 1 for s, p, k, st in zip(S, pad, kdims, stride)]
    xp = np.pad(x, [(0, 0)] + [(p, p) for p in pad] + [(0, 0)])
    out = np.zeros((x.shape[0], *O, w.shape[-1]))
    for k in itertools.product(*(range(kk) for kk in kdims)):
        sl = (slice(None),) + tuple(
            slice(k[a], k[a] + stride[a] * (O[a] - 1) + 1, stride[a]) for a in range(nsp)
        )
        out += xp[sl] @ w[k]
    if bias is not None:
        out += np.asarray(bias, dtype=np.float64)
    return out


def dense_conv_transpose(x, w, stride, out_shape, bias=None):
    """Transposed counterpart of :func:`dense_conv`: scatters coarse site
    ``q`` to fine site ``q * stride + k - pad``, cropped to ``out_shape``."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    kdims = w.shape[:-2]
    nsp = len(kdims)
    pad = [k // 2 for k in kdims]
    O = x.shape[1:-1]
    full = [max((o - 1) * s + k, p + n) for o, s, k, p, n in zip(O, stride, kdims, pad, out_shape)]
    buf = np.zeros((x.shape[0], *full, w.shape[-1]))
    for k in itertools.product(*(range(kk) for kk in kdims)):
        sl = (slice(None),) + tuple(
            slice(k[a], k[a] + stride[a] * (O[a] - 1) + 1, stride[a]) for a in range(nsp)
        )
        buf[sl] += x @ w[k]
    crop = (slice(None),) + tuple(slice(p, p + n) for p, n in zip(pad, out_shape))
    out = buf[crop]
    if bias is not None:
        out = out + np.asarray(bias, dtype=np.float64)
    return out


def active_mask(t):
    """Boolean (B, *S) mask of a sparse tensor's active sites."""
    m = np.zeros((t.batch_size, *t.spatial_shape), dtype=bool)
    if t.n_active:
        m[tuple(t.coords.T)] = True
    return m


def brute_force_subm_pairs(coords, kernel_dims):
    """Set of (offset, in_row, out_row) by exhaustive search."""
    coords = [tuple(int(v) for v in c) for c in coords]
    half = [k // 2 for k in kernel_dims]
    taps = list(itertools.product(*(range(k) for k in kernel_dims)))
    pairs = set()
    for j, cj in enumerate(coords):
        for o, k in enumerate(taps):
            target = (cj[0],) + tuple(cj[a + 1] + k[a] - half[a] for a in range(len(k)))
            for i, ci in enumerate(coords):
                if ci == target:
                    pairs.add((o, i, j))
    return pairs


def dense_dilation(mask, kernel):
    """Binary dilation of a (B, *S) mask by a centered ``kernel``^nd box,
    never crossing batch entries."""
    r = kernel // 2
    nsp = mask.ndim - 1
    out = np.zeros_like(mask)
    padded = np.pad(mask, [(0, 0)] + [(r, r)] * nsp)
    S = mask.shape[1:]
    for k in itertools.product(range(kernel), repeat=nsp):
        sl = (slice(None),) + tuple(slice(k[a], k[a] + S[a]) for a in range(nsp))
        out |= padded[sl]
    return out


def neighbour_mean(dense, mask, kernel):
    """Per-site mean of active neighbours within a centered box."""
    r = kernel // 2
    nsp = mask.ndim - 1
    pd = np.pad(dense.astype(np.float64), [(0, 0)] + [(r, r)] * nsp + [(0, 0)])
    pm = np.pad(mask, [(0, 0)] + [(r, r)] * nsp)
    S = mask.shape[1:]
    total = np.zeros(dense.shape, dtype=np.float64)
    count = np.zeros(mask.shape, dtype=np.int64)
    for k in itertools.product(range(kernel), repeat=nsp):
        sl = (slice(None),) + tuple(slice(k[a], k[a] + S[a]) for a in range(nsp))
        total += pd[sl] * pm[sl][..., None]
        count += pm[sl]
    with np.errstate(invalid="ignore", divide="ignore"):
        return total / count[..., None], count


def scalar_voxelize(clouds, range_min, range_max, voxel_size, dims):
    """Dict {(b, z, y, x): (sum_dx, sum_dy, sum_dz, sum_i, n)} built one point
    at a time. Offsets are in voxel units relative to the voxel centre."""
    bins = {}
    for b, pts in enumerate(clouds):
        for x, y, z, inten in np.asarray(pts, dtype=np.float64).tolist():
            p = (x, y, z)
            if not all(range_min[a] <= p[a] < range_max[a] for a in range(3)):
                continue
            idx = []
            offs = []
            for a in range(3):
                i = math.floor((p[a] - range_min[a]) / voxel_size[a])
                i = min(i, dims[a] - 1)
                idx.append(i)
                centre = range_min[a] + (i + 0.5) * voxel_size[a]
                offs.append((p[a] - centre) / voxel_size[a])
            key = (b, idx[2], idx[1], idx[0])
            acc = bins.setdefault(key, [0.0, 0.0, 0.0, 0.0, 0])
            acc[0] += offs[0]
            acc[1] += offs[1]
            acc[2] += offs[2]
            acc[3] += inten
            acc[4] += 1
    return bins


def axis_aligned_iou(a, b):
    """IoU of two yaw-0 boxes given as (cx, cy, l, w)."""
    ax0, ax1 = a[0] - a[2] / 2, a[0] + a[2] / 2
    ay0, ay1 = a[1] - a[3] / 2, a[1] + a[3] / 2
    bx0, bx1 = b[0] - b[2] / 2, b[0] + b[2] / 2
    by0, by1 = b[1] - b[3] / 2, b[1] + b[3] / 2
    iw = max(0.0, min(ax1, bx1) - max(ax0, bx0))
    ih = max(0.0, min(ay1, by1) - max(ay0, by0))
    inter = iw * ih
    union = a[2] * a[3] + b[2] * b[3] - inter
    return inter / union if union > 0 else 0.0
