"""Point clouds to sparse voxel tensors."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from .errors import ChannelMismatch, EmptyBatch, GeometryMismatch, InvalidSpec, PointFileError
from .sparse import COORD_DTYPE, FEATURE_DTYPE, SparseTensor, _make, check_key_domain
from .spconv import ConvLayer

RAW_CHANNELS = 5
COUNT_CAP = 64


@dataclass(frozen=True)
class PointCloud:
    points: np.ndarray  # (N, 4) float64: x, y, z (m), intensity
    frame_id: int = 0

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.size == 0:
            pts = pts.reshape(0, 4)
        if pts.ndim != 2 or pts.shape[1] != 4:
            raise PointFileError(f"points must be N x 4, got {pts.shape}")
        if not np.isfinite(pts).all():
            raise PointFileError("point cloud contains NaN or Inf")
        object.__setattr__(self, "points", pts)

    def __len__(self):
        return self.points.shape[0]


@dataclass(frozen=True)
class VoxelGridSpec:
    range_min: tuple[float, float, float] = (-75.52, -75.52, -2.0)
    range_max: tuple[float, float, float] = (75.52, 75.52, 4.0)
    voxel_size: tuple[float, float, float] = (0.08, 0.08, 0.15)

    def __post_init__(self):
        for name in ("range_min", "range_max", "voxel_size"):
            v = tuple(float(x) for x in getattr(self, name))
            if len(v) != 3 or not all(math.isfinite(x) for x in v):
                raise InvalidSpec(f"{name} must be three finite numbers, got {v}")
            object.__setattr__(self, name, v)
        if any(hi <= lo for lo, hi in zip(self.range_min, self.range_max)):
            raise InvalidSpec("range_max must exceed range_min on every axis")
        if any(s <= 0 for s in self.voxel_size):
            raise InvalidSpec("voxel sizes must be positive")

    @property
    def axis_dims(self) -> tuple[int, int, int]:
        """Cell counts along x, y, z."""
        # round first so 151.04 / 0.08 does not become 1889
        return tuple(
            max(1, math.ceil(round((hi - lo) / s, 6)))
            for lo, hi, s in zip(self.range_min, self.range_max, self.voxel_size)
        )

    @property
    def grid_dims(self) -> tuple[int, int, int]:
        """(H, W, L) = cell counts along z, y, x."""
        nx, ny, nz = self.axis_dims
        return (nz, ny, nx)

    def as_pillars(self) -> "VoxelGridSpec":
        """Same x/y grid with one cell spanning the whole z range."""
        dz = self.range_max[2] - self.range_min[2]
        return VoxelGridSpec(self.range_min, self.range_max, (*self.voxel_size[:2], dz))


def voxelize(clouds, spec: VoxelGridSpec) -> SparseTensor:
    """Bin points into voxels with 5 raw statistics per voxel.

    Channels: mean x/y/z offset from the voxel centre (voxel units), mean
    intensity, and ``log(1+n)/log(1+64)`` clamped to 1.
    """
    if isinstance(clouds, PointCloud):
        clouds = [clouds]
    clouds = list(clouds)
    if not clouds:
        raise EmptyBatch("voxelize needs at least one point cloud")
    dims = np.array(spec.axis_dims, dtype=np.int64)
    check_key_domain(spec.grid_dims, len(clouds))
    lo = np.array(spec.range_min)
    hi = np.array(spec.range_max)
    size = np.array(spec.voxel_size)

    keys_all, offs_all, inten_all = [], [], []
    for b, cloud in enumerate(clouds):
        pts = np.asarray(cloud.points if isinstance(cloud, PointCloud) else cloud, dtype=np.float64)
        pts = pts.reshape(-1, 4)
        xyz = pts[:, :3]
        keep = ((xyz >= lo) & (xyz < hi)).all(axis=1)
        xyz = xyz[keep]
        idx = np.minimum(np.floor((xyz - lo) / size).astype(np.int64), dims - 1)
        offs_all.append((xyz - (lo + (idx + 0.5) * size)) / size)
        inten_all.append(pts[keep, 3])
        # linear key in (b, z, y, x) order so sorted keys are lexicographic
        keys_all.append(((b * dims[2] + idx[:, 2]) * dims[1] + idx[:, 1]) * dims[0] + idx[:, 0])

    keys = np.concatenate(keys_all)
    h, w, l = spec.grid_dims
    if keys.size == 0:
        return _make(np.zeros((0, RAW_CHANNELS), FEATURE_DTYPE), np.zeros((0, 4), COORD_DTYPE),
                     (h, w, l), len(clouds))
    offs = np.concatenate(offs_all)
    inten = np.concatenate(inten_all)
    uniq, inverse = np.unique(keys, return_inverse=True)
    m = uniq.size
    counts = np.bincount(inverse, minlength=m).astype(np.float64)
    feats = np.empty((m, RAW_CHANNELS), dtype=np.float64)
    for ch in range(3):
        feats[:, ch] = np.bincount(inverse, weights=offs[:, ch], minlength=m) / counts
    feats[:, 3] = np.bincount(inverse, weights=inten, minlength=m) / counts
    feats[:, 4] = np.minimum(np.log1p(counts) / math.log1p(COUNT_CAP), 1.0)

    coords = np.empty((m, 4), dtype=COORD_DTYPE)
    rem = uniq
    coords[:, 3] = rem % dims[0]
    rem = rem // dims[0]
    coords[:, 2] = rem % dims[1]
    rem = rem // dims[1]
    coords[:, 1] = rem % dims[2]
    coords[:, 0] = rem // dims[2]
    return _make(feats.astype(FEATURE_DTYPE), coords, (h, w, l), len(clouds))


def encode_features(raw: SparseTensor, enc: ConvLayer) -> SparseTensor:
    """Per-voxel linear map plus ReLU; the active set is never changed."""
    if any(k != 1 for k in enc.kernel_dims):
        raise GeometryMismatch(f"{enc.name}: encoder must be a 1x1 kernel, got {enc.kernel_dims}")
    if enc.cin != raw.channels:
        raise ChannelMismatch(f"{enc.name}: expects {enc.cin} channels, got {raw.channels}")
    w = enc.weights.reshape(enc.cin, enc.cout)
    out = raw.features @ w
    if enc.bias is not None:
        out += enc.bias
    np.maximum(out, 0, out=out)
    return raw.replace_features(out)


def read_xyzi(path, frame_id: int = 0) -> PointCloud:
    """Headerless little-endian float32 (x, y, z, intensity) records."""
    size = os.path.getsize(path)
    if size % 16:
        raise PointFileError(f"{path}: length {size} is not a multiple of 16 bytes")
    data = np.fromfile(path, dtype="<f4").reshape(-1, 4)
    return PointCloud(data, frame_id)


def write_xyzi(path, cloud: PointCloud) -> None:
    np.ascontiguousarray(cloud.points, dtype="<f4").tofile(path)
