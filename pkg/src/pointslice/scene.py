"""Seeded synthetic LiDAR-like scenes: a noisy ground plane plus points
sampled on the surfaces of box-shaped objects.

Ground returns are laid out on concentric scan rings whose radii grow
geometrically with range, the way a spinning sensor's beams hit flat
ground. Near rings are dense and far ones sparse.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError
from .voxelize import PointCloud, VoxelGridSpec


@dataclass(frozen=True)
class SceneSpec:
    seed: int = 42
    n_objects: int = 20
    object_length: tuple[float, float] = (3.5, 5.5)
    object_width: tuple[float, float] = (1.6, 2.2)
    object_height: tuple[float, float] = (1.4, 2.0)
    points_per_object: tuple[int, int] = (300, 1200)
    ground_points: int = 60000
    ground_z: float = 0.0
    ground_noise: float = 0.05
    ground_rings: int = 64
    grid: VoxelGridSpec = field(default_factory=VoxelGridSpec)

    def __post_init__(self):
        if self.n_objects < 0 or self.ground_points < 0:
            raise ConfigError("object and ground point counts must be non-negative")
        for name in ("object_length", "object_width", "object_height", "points_per_object"):
            lo, hi = getattr(self, name)
            if not 0 < lo <= hi:
                raise ConfigError(f"{name} must be a positive ordered range, got {(lo, hi)}")
        if self.ground_rings < 1:
            raise ConfigError("ground_rings must be positive")
        if self.ground_noise < 0:
            raise ConfigError("ground_noise must be non-negative")
        g = self.grid
        if not g.range_min[2] <= self.ground_z - self.ground_noise:
            raise ConfigError("ground plane lies below the grid")


@dataclass(frozen=True)
class SceneBox:
    center: tuple[float, float, float]
    size: tuple[float, float, float]  # l, w, h
    yaw: float

    def to_local(self, xyz: np.ndarray) -> np.ndarray:
        d = np.asarray(xyz, dtype=np.float64) - np.asarray(self.center)
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        return np.stack([c * d[:, 0] + s * d[:, 1], -s * d[:, 0] + c * d[:, 1], d[:, 2]], axis=1)


def _surface_points(rng, size, n):
    """``n`` points uniform over the surface of an axis-aligned box centred
    at the origin."""
    l, w, h = size
    areas = np.array([w * h, w * h, l * h, l * h, l * w, l * w])
    face = rng.choice(6, size=n, p=areas / areas.sum())
    u = rng.uniform(-0.5, 0.5, size=(n, 3)) * np.array(size)
    axis = face // 2
    sign = np.where(face % 2 == 0, 0.5, -0.5)
    u[np.arange(n), axis] = sign * np.array(size)[axis]
    return u


def gen_scene(spec: SceneSpec, frame_id: int = 0, return_boxes: bool = False):
    """Deterministic point cloud (float64 coordinates) for ``spec``."""
    rng = np.random.default_rng(spec.seed)
    g = spec.grid
    lo = np.array(g.range_min)
    hi = np.array(g.range_max)
    parts = []
    n = spec.ground_points
    ground = np.empty((n, 4))
    r_max = 0.98 * min(-lo[0], hi[0], -lo[1], hi[1])
    r_min = min(2.5, r_max / 2)
    if r_max > 0:
        radii = np.geomspace(r_min, r_max, spec.ground_rings)
        r = radii[rng.integers(0, spec.ground_rings, n)] + rng.normal(0.0, 0.02, n)
        phi = rng.uniform(-math.pi, math.pi, n)
        ground[:, 0] = r * np.cos(phi)
        ground[:, 1] = r * np.sin(phi)
    else:  # sensor origin outside the grid: fall back to uniform coverage
        ground[:, 0] = rng.uniform(lo[0], hi[0], n)
        ground[:, 1] = rng.uniform(lo[1], hi[1], n)
    ground[:, 2] = spec.ground_z + rng.uniform(-spec.ground_noise, spec.ground_noise, n)
    ground[:, 3] = rng.uniform(0.0, 0.3, n)
    parts.append(ground)

    boxes = []
    margin = 0.1 * (hi - lo)
    for _ in range(spec.n_objects):
        size = (
            rng.uniform(*spec.object_length),
            rng.uniform(*spec.object_width),
            rng.uniform(*spec.object_height),
        )
        cx = rng.uniform(lo[0] + margin[0], hi[0] - margin[0])
        cy = rng.uniform(lo[1] + margin[1], hi[1] - margin[1])
        box = SceneBox((cx, cy, spec.ground_z + size[2] / 2), size, rng.uniform(-math.pi, math.pi))
        k = int(rng.integers(spec.points_per_object[0], spec.points_per_object[1] + 1))
        local = _surface_points(rng, size, k)
        c, s = math.cos(box.yaw), math.sin(box.yaw)
        pts = np.empty((k, 4))
        pts[:, 0] = box.center[0] + c * local[:, 0] - s * local[:, 1]
        pts[:, 1] = box.center[1] + s * local[:, 0] + c * local[:, 1]
        pts[:, 2] = box.center[2] + local[:, 2]
        pts[:, 3] = rng.uniform(0.2, 1.0, k)
        parts.append(pts)
        boxes.append(box)

    cloud = PointCloud(np.concatenate(parts), frame_id)
    return (cloud, boxes) if return_boxes else cloud
