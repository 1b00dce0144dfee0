"""Backend selection for the neighbour-search kernels.

The compiled extension is used when it imports; set
``POINTSLICE_PURE_PYTHON=1`` to force the numpy fallback.
"""

from __future__ import annotations

import os
from contextlib import contextmanager
from types import ModuleType

import numpy as np

from . import _fallback

_compiled: ModuleType | None
try:
    from . import _kernels as _compiled
except ImportError:  # extension not built
    _compiled = None

if _compiled is not None and os.environ.get("POINTSLICE_PURE_PYTHON", "0") in ("", "0"):
    _active: ModuleType = _compiled
    BACKEND = "compiled"
else:
    _active = _fallback
    BACKEND = "python"


def available_backends() -> list[str]:
    return ["python"] + (["compiled"] if _compiled is not None else [])


def get_backend(name: str | None = None) -> ModuleType:
    if name is None:
        return _active
    if name == "python":
        return _fallback
    if name == "compiled":
        if _compiled is None:
            raise ImportError("compiled kernels are not built")
        return _compiled
    raise ValueError(f"unknown backend {name!r}")


@contextmanager
def use_backend(name: str):
    """Route every kernel call without an explicit backend to ``name``."""
    global _active, BACKEND
    prev = _active, BACKEND
    _active, BACKEND = get_backend(name), name
    try:
        yield
    finally:
        _active, BACKEND = prev


def subm_pairs(coords, shape, kernel_dims, backend=None):
    """(in_rows, out_rows, offset_ptr) with pairs of offset ``o`` in
    ``[ptr[o], ptr[o+1])``, ascending by output row."""
    impl = get_backend(backend)
    coords = np.ascontiguousarray(coords, dtype=np.int32)
    return impl.subm_pairs(coords, tuple(int(s) for s in shape), tuple(int(k) for k in kernel_dims))


def strided_pairs(coords, out_shape, kernel_dims, stride, pad, backend=None):
    """Regular-conv rulebook in canonical form.

    Returns ``(out_coords, in_rows, out_rows, offset_ptr)``: output sites in
    lexicographic order, pairs offset-major and ascending by output row.
    """
    impl = get_backend(backend)
    coords = np.ascontiguousarray(coords, dtype=np.int32)
    d = coords.shape[1]
    out_shape = tuple(int(s) for s in out_shape)
    keys, in_rows, tmp_rows, ptr = impl.strided_candidates(
        coords, out_shape, tuple(int(k) for k in kernel_dims),
        tuple(int(s) for s in stride), tuple(int(p) for p in pad),
    )
    order = np.argsort(keys, kind="stable")
    rank = np.empty_like(order)
    rank[order] = np.arange(order.size)
    out_rows = rank[tmp_rows] if tmp_rows.size else tmp_rows
    # within one offset input rows ascend; output rows follow the same order
    # for stride >= 1, but sort anyway to make the contract explicit
    seg = np.repeat(np.arange(ptr.size - 1), np.diff(ptr))
    perm = np.lexsort((out_rows, seg))
    return (
        _delinearize(keys[order], out_shape, d),
        np.ascontiguousarray(in_rows[perm]),
        np.ascontiguousarray(out_rows[perm]),
        ptr,
    )


def _delinearize(keys, shape, d):
    out = np.empty((keys.shape[0], d), dtype=np.int32)
    rem = keys.astype(np.int64)
    for axis in range(d - 1, 0, -1):
        ext = shape[axis - 1]
        out[:, axis] = rem % ext
        rem = rem // ext
    out[:, 0] = rem
    return out


def scatter_add(out, rows, vals, backend=None):
    """``out[rows] += vals`` in place; ``rows`` must be distinct."""
    if rows.size:
        get_backend(backend).scatter_add(out, rows, np.ascontiguousarray(vals, dtype=np.float32))


def gather_rows(src, rows, out, backend=None):
    """Copy ``src[rows]`` into the leading rows of ``out``; returns that view."""
    get_backend(backend).gather_rows(src, rows, out)
    return out[: rows.shape[0]]


def segment_max(vals, order, starts, backend=None):
    """Max of ``vals[order]`` over consecutive segments starting at ``starts``."""
    vals = np.ascontiguousarray(vals, dtype=np.float32)
    return get_backend(backend).segment_max(vals, order.astype(np.int64), starts.astype(np.int64))
