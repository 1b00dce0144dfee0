"""Folding voxel tensors into batched 2D slices and back.

A voxel at ``(b, z, y, x)`` in a grid of height ``H`` becomes the slice
site ``(b * H + z, y, x)``. Because batch leads z in the lexicographic
order, the fold keeps rows already sorted and features are never
reordered.
"""

from __future__ import annotations

import numpy as np

from . import kernels
from .errors import IndivisibleBatch, MissingSliceHeight, ShapeMismatch
from .sparse import COORD_DTYPE, SparseTensor, _make, pack_keys


def slice_tensor(t: SparseTensor) -> SparseTensor:
    if t.ndim != 3:
        raise ShapeMismatch(f"slice expects a voxel tensor, got {t.ndim} spatial axes")
    h, w, l = t.spatial_shape
    c = t.coords
    coords = np.empty((t.n_active, 3), dtype=COORD_DTYPE)
    coords[:, 0] = c[:, 0] * h + c[:, 1]
    coords[:, 1:] = c[:, 2:]
    return _make(t.features, coords, (w, l), t.batch_size * h, h, t.indice_dict)


def unslice_tensor(t: SparseTensor) -> SparseTensor:
    h = t.slice_height
    if h is None:
        raise MissingSliceHeight("tensor carries no slice height")
    if t.ndim != 2:
        raise ShapeMismatch(f"unslice expects a slice tensor, got {t.ndim} spatial axes")
    if t.batch_size % h:
        raise IndivisibleBatch(f"batch size {t.batch_size} not divisible by slice height {h}")
    c = t.coords
    coords = np.empty((t.n_active, 4), dtype=COORD_DTYPE)
    coords[:, 0] = c[:, 0] // h
    coords[:, 1] = c[:, 0] % h
    coords[:, 2:] = c[:, 1:]
    return _make(t.features, coords, (h, *t.spatial_shape), t.batch_size // h, None, t.indice_dict)


def collapse_slices(t: SparseTensor) -> SparseTensor:
    """Max-reduce every z level of a frame into one BEV map.

    Accepts either a slice tensor or a voxel tensor; returns a 2D tensor
    with one batch entry per frame and no slice height.
    """
    if t.ndim == 2:
        t = unslice_tensor(t)
    elif t.ndim != 3:
        raise ShapeMismatch(f"cannot collapse a tensor with {t.ndim} spatial axes")
    c = t.coords
    bev = np.ascontiguousarray(c[:, [0, 2, 3]])
    keys = pack_keys(bev)
    order = np.argsort(keys, kind="stable")
    sk = keys[order]
    if sk.size:
        starts = np.concatenate(([0], np.nonzero(sk[1:] != sk[:-1])[0] + 1))
        feats = kernels.segment_max(t.features, order, starts)
        coords = bev[order][starts]
    else:
        feats = t.features[:0]
        coords = bev[:0]
    return _make(np.ascontiguousarray(feats), np.ascontiguousarray(coords),
                 t.spatial_shape[1:], t.batch_size)
