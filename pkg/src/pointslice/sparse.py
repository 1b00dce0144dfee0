"""COO sparse feature tensors.

Coordinates are stored as int32 rows ``(b, z, y, x)`` for voxel tensors and
``(b, y, x)`` for slice/BEV tensors. The z axis corresponds to the grid
height, y to the width and x to the length. Rows are always kept in
lexicographic order so that two tensors with the same content compare equal
row by row.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from types import MappingProxyType
from typing import Mapping, Sequence

import numpy as np

from .errors import (
    ComponentOverflow,
    DuplicateCoordinate,
    OracleSizeExceeded,
    OutOfBounds,
    ShapeMismatch,
)

FEATURE_DTYPE = np.float32
COORD_DTYPE = np.int32

ORACLE_CAP = 1 << 24

# Bits per coordinate component, most significant first (batch leads).
KEY_BITS = {
    4: (16, 16, 16, 16),
    3: (22, 21, 21),
}

_EMPTY_DICT: Mapping = MappingProxyType({})


def _key_layout(ndim: int):
    try:
        bits = KEY_BITS[ndim]
    except KeyError:
        raise ComponentOverflow(f"no key layout for {ndim}-component coordinates") from None
    shifts = []
    acc = 0
    for b in reversed(bits):
        shifts.append(acc)
        acc += b
    return bits, tuple(reversed(shifts))


def pack_key(coord: Sequence[int]) -> int:
    """Pack one coordinate tuple into a 64-bit integer key.

    Keys preserve lexicographic order: ``pack_key(a) < pack_key(b)`` iff
    ``tuple(a) < tuple(b)``.
    """
    bits, shifts = _key_layout(len(coord))
    key = 0
    for c, b, s in zip(coord, bits, shifts):
        c = int(c)
        if c < 0 or c >= (1 << b):
            raise ComponentOverflow(f"component {c} does not fit in {b} bits")
        key |= c << s
    return key


def unpack_key(key: int, ndim: int) -> tuple[int, ...]:
    bits, shifts = _key_layout(ndim)
    key = int(key)
    return tuple((key >> s) & ((1 << b) - 1) for b, s in zip(bits, shifts))


def pack_keys(coords: np.ndarray) -> np.ndarray:
    """Vectorized :func:`pack_key` over the rows of ``coords``; returns uint64."""
    coords = np.asarray(coords)
    ndim = coords.shape[1]
    bits, shifts = _key_layout(ndim)
    keys = np.zeros(coords.shape[0], dtype=np.uint64)
    for axis, (b, s) in enumerate(zip(bits, shifts)):
        col = coords[:, axis].astype(np.int64)
        if col.size and (col.min() < 0 or col.max() >= (1 << b)):
            raise ComponentOverflow(f"axis {axis} component does not fit in {b} bits")
        keys |= col.astype(np.uint64) << np.uint64(s)
    return keys


def unpack_keys(keys: np.ndarray, ndim: int) -> np.ndarray:
    bits, shifts = _key_layout(ndim)
    keys = np.asarray(keys, dtype=np.uint64)
    out = np.empty((keys.shape[0], ndim), dtype=COORD_DTYPE)
    for axis, (b, s) in enumerate(zip(bits, shifts)):
        out[:, axis] = ((keys >> np.uint64(s)) & np.uint64((1 << b) - 1)).astype(COORD_DTYPE)
    return out


def check_key_domain(spatial_shape: Sequence[int], batch_size: int) -> None:
    bits, _ = _key_layout(len(spatial_shape) + 1)
    for extent, b in zip((batch_size, *spatial_shape), bits):
        if extent > (1 << b):
            raise ComponentOverflow(f"extent {extent} exceeds {b}-bit key field")


def _readonly(a: np.ndarray) -> np.ndarray:
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class SparseTensor:
    features: np.ndarray
    coords: np.ndarray
    spatial_shape: tuple[int, ...]
    batch_size: int
    slice_height: int | None = None
    # Rulebooks of earlier strided convs, keyed by layer indice_key; lets a
    # transposed conv restore the finer active set.
    indice_dict: Mapping = field(default=_EMPTY_DICT, repr=False)

    @property
    def n_active(self) -> int:
        return int(self.coords.shape[0])

    @property
    def channels(self) -> int:
        return int(self.features.shape[1])

    @property
    def ndim(self) -> int:
        """Number of spatial axes (3 for voxels, 2 for slices/BEV)."""
        return len(self.spatial_shape)

    @property
    def nbytes(self) -> int:
        return self.n_active * self.channels * 4

    def keys(self) -> np.ndarray:
        return pack_keys(self.coords)

    def replace_features(self, features: np.ndarray) -> "SparseTensor":
        """Same active set and metadata, new feature matrix."""
        features = np.ascontiguousarray(features, dtype=FEATURE_DTYPE)
        if features.ndim != 2 or features.shape[0] != self.n_active:
            raise ShapeMismatch(
                f"feature rows {features.shape[0] if features.ndim else '?'} != {self.n_active}"
            )
        return _make(features, self.coords, self.spatial_shape, self.batch_size,
                     self.slice_height, self.indice_dict)

    def with_indice(self, key: str, rulebook) -> "SparseTensor":
        d = dict(self.indice_dict)
        d[key] = rulebook
        return _make(self.features, self.coords, self.spatial_shape, self.batch_size,
                     self.slice_height, MappingProxyType(d))

    def equals(self, other: "SparseTensor") -> bool:
        """Bit-exact equality of geometry, coordinates and features."""
        return (
            self.spatial_shape == other.spatial_shape
            and self.batch_size == other.batch_size
            and self.slice_height == other.slice_height
            and np.array_equal(self.coords, other.coords)
            and self.features.shape == other.features.shape
            and np.array_equal(self.features.view(np.uint32), other.features.view(np.uint32))
        )


def _make(features, coords, spatial_shape, batch_size, slice_height=None, indice_dict=_EMPTY_DICT):
    """Trusted constructor: inputs are already canonical."""
    return SparseTensor(
        features=_readonly(features),
        coords=_readonly(coords),
        spatial_shape=tuple(int(s) for s in spatial_shape),
        batch_size=int(batch_size),
        slice_height=None if slice_height is None else int(slice_height),
        indice_dict=indice_dict,
    )


def from_coords(coords, features, spatial_shape, batch_size, slice_height=None) -> SparseTensor:
    """Validate and canonicalize a coordinate list with its feature rows.

    Duplicate coordinates are rejected rather than merged.
    """
    spatial_shape = tuple(int(s) for s in spatial_shape)
    if not spatial_shape or any(s <= 0 for s in spatial_shape):
        raise ShapeMismatch(f"spatial shape must be positive, got {spatial_shape}")
    if batch_size <= 0:
        raise ShapeMismatch(f"batch size must be positive, got {batch_size}")
    d = len(spatial_shape) + 1
    coords = np.asarray(coords)
    features = np.asarray(features)
    if coords.size == 0:
        coords = coords.reshape(0, d).astype(COORD_DTYPE)
    if features.ndim == 1 and features.size == 0:
        features = features.reshape(0, 0)
    if coords.ndim != 2 or coords.shape[1] != d:
        raise ShapeMismatch(f"coords must be N x {d}, got {coords.shape}")
    if features.ndim != 2 or features.shape[0] != coords.shape[0]:
        raise ShapeMismatch(
            f"features {features.shape} do not match {coords.shape[0]} coordinate rows"
        )
    if not np.issubdtype(coords.dtype, np.integer):
        raise ShapeMismatch(f"coords must be integer, got {coords.dtype}")
    if slice_height is not None:
        if slice_height <= 0 or batch_size % slice_height:
            raise ShapeMismatch(
                f"batch size {batch_size} not divisible by slice height {slice_height}"
            )
    check_key_domain(spatial_shape, batch_size)

    bound = np.array((batch_size, *spatial_shape), dtype=np.int64)
    c64 = coords.astype(np.int64)
    bad = np.nonzero(((c64 < 0) | (c64 >= bound)).any(axis=1))[0]
    if bad.size:
        raise OutOfBounds(coords[bad[0]], bound)

    coords = np.ascontiguousarray(coords, dtype=COORD_DTYPE)
    features = np.ascontiguousarray(features, dtype=FEATURE_DTYPE)
    keys = pack_keys(coords)
    order = np.argsort(keys, kind="stable")
    sorted_keys = keys[order]
    dup = np.nonzero(sorted_keys[1:] == sorted_keys[:-1])[0]
    if dup.size:
        # report the later of the first colliding pair, in input row order
        first = min(max(order[i], order[i + 1]) for i in dup)
        raise DuplicateCoordinate(first, coords[first])
    return _make(features[order], coords[order], spatial_shape, batch_size, slice_height)


def empty(spatial_shape, batch_size, channels, slice_height=None) -> SparseTensor:
    d = len(spatial_shape) + 1
    return _make(
        np.zeros((0, channels), FEATURE_DTYPE),
        np.zeros((0, d), COORD_DTYPE),
        spatial_shape,
        batch_size,
        slice_height,
    )


def to_dense(t: SparseTensor, cap: int = ORACLE_CAP) -> np.ndarray:
    """Dense array of shape ``(batch_size, *spatial_shape, C)``."""
    shape = (t.batch_size, *t.spatial_shape, t.channels)
    size = int(np.prod(shape, dtype=np.int64))
    if size > cap:
        raise OracleSizeExceeded(f"dense size {size} exceeds oracle cap {cap}")
    out = np.zeros(shape, dtype=FEATURE_DTYPE)
    if t.n_active:
        out[tuple(t.coords.T)] = t.features
    return out


def from_dense(a: np.ndarray, slice_height=None) -> SparseTensor:
    """Sparse tensor of the positions whose feature row is not all zero."""
    a = np.asarray(a)
    if a.ndim < 3:
        raise ShapeMismatch(f"expected batch x spatial... x C, got {a.shape}")
    mask = (a != 0).any(axis=-1)
    coords = np.argwhere(mask).astype(COORD_DTYPE)  # argwhere is lexicographic
    feats = a[mask].astype(FEATURE_DTYPE)
    return from_coords(coords, feats, a.shape[1:-1], a.shape[0], slice_height)
