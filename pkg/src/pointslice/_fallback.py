"""Pure-numpy versions of the compiled kernels in ``_kernels.pyx``."""

from __future__ import annotations

import numpy as np


def _linear(b, cols, extents):
    key = b.astype(np.int64)
    for col, ext in zip(cols, extents):
        key = key * int(ext) + col
    return key


def _offsets(kernel_dims):
    return np.array(list(np.ndindex(*kernel_dims)), dtype=np.int64).reshape(-1, len(kernel_dims))


def subm_pairs(coords, shape, kernel_dims):
    coords = np.asarray(coords, dtype=np.int64)
    n = coords.shape[0]
    ext = np.asarray(shape, dtype=np.int64)
    half = np.asarray(kernel_dims, dtype=np.int64) // 2
    offsets = _offsets(kernel_dims) - half
    b = coords[:, 0]
    sp = coords[:, 1:]
    keys = _linear(b, sp.T, ext)  # sorted because coords are lexicographic
    rows = np.arange(n, dtype=np.int64)
    ins, outs, ptr = [], [], [0]
    for off in offsets:
        nb = sp + off
        valid = ((nb >= 0) & (nb < ext)).all(axis=1)
        nk = _linear(b[valid], nb[valid].T, ext)
        pos = np.searchsorted(keys, nk)
        pos_c = np.minimum(pos, max(n - 1, 0))
        found = (pos < n) & (keys[pos_c] == nk) if n else np.zeros(0, bool)
        ins.append(pos[found])
        outs.append(rows[valid][found])
        ptr.append(ptr[-1] + int(found.sum()))
    empty = np.zeros(0, np.int64)
    return (
        np.concatenate(ins) if ins else empty,
        np.concatenate(outs) if outs else empty,
        np.asarray(ptr, dtype=np.int64),
    )


def strided_candidates(coords, out_shape, kernel_dims, stride, pad):
    coords = np.asarray(coords, dtype=np.int64)
    n = coords.shape[0]
    oext = np.asarray(out_shape, dtype=np.int64)
    st = np.asarray(stride, dtype=np.int64)
    pd = np.asarray(pad, dtype=np.int64)
    b = coords[:, 0]
    sp = coords[:, 1:]
    rows = np.arange(n, dtype=np.int64)
    ins, cand, ptr = [], [], [0]
    for k in _offsets(kernel_dims):
        t = sp + pd - k
        valid = ((t >= 0) & (t % st == 0)).all(axis=1)
        q = t[valid] // st
        inside = (q < oext).all(axis=1)
        q = q[inside]
        ins.append(rows[valid][inside])
        cand.append(_linear(b[valid][inside], q.T, oext))
        ptr.append(ptr[-1] + int(q.shape[0]))
    in_rows = np.concatenate(ins)
    keys = np.concatenate(cand)
    # first-seen numbering to mirror the compiled hash-table insertion order
    uniq, first, inverse = np.unique(keys, return_index=True, return_inverse=True)
    order = np.argsort(first, kind="stable")
    rank = np.empty_like(order)
    rank[order] = np.arange(order.size)
    return uniq[order], in_rows, rank[inverse].astype(np.int64), np.asarray(ptr, dtype=np.int64)


def scatter_add(out, rows, vals):
    out[rows] += vals


def gather_rows(src, rows, out):
    np.take(src, rows, axis=0, out=out[: rows.shape[0]])


def segment_max(vals, order, starts):
    if starts.size == 0:
        return np.zeros((0, vals.shape[1]), dtype=np.float32)
    return np.maximum.reduceat(vals[order], starts, axis=0)
