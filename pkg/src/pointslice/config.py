"""Flat ``key = value`` configuration files.

Lines are ``key = value``; ``#`` starts a comment. Vectors and lists are
comma separated (``range_min = -75.52, -75.52, -2``); an empty list is
written ``[]`` or left blank.

Recognised keys
---------------
grid:      range_min, range_max, voxel_size
backbone:  stem_block_count, sin_positions, down_positions, channels,
           edb_count, edb_blocks, edb_sin, kernel_size, afd_kernel, sin_stride
head:      num_classes, score_threshold, nms_iou, max_detections, bev_stride
scene:     seed, n_objects, object_length, object_width, object_height,
           points_per_object, ground_points, ground_z, ground_noise,
           ground_rings
model:     representation (slice | pillar | voxel3d)
"""

from __future__ import annotations

from dataclasses import dataclass, field, fields, replace

from .blocks import REPRESENTATIONS, BackboneConfig
from .errors import ConfigError
from .head import HeadSpec
from .scene import SceneSpec
from .voxelize import VoxelGridSpec


def _floats(n):
    def parse(v):
        vals = _list(v, float)
        if len(vals) != n:
            raise ValueError(f"expected {n} numbers")
        return tuple(vals)
    return parse


def _ints(n=None):
    def parse(v):
        vals = _list(v, int)
        if n is not None and len(vals) != n:
            raise ValueError(f"expected {n} integers")
        return tuple(vals)
    return parse


def _list(v, cast):
    v = v.strip()
    if v.startswith("[") and v.endswith("]"):
        v = v[1:-1]
    return [cast(x) for x in v.split(",") if x.strip()]


def _bool(v):
    low = v.strip().lower()
    if low in ("true", "yes", "1", "on"):
        return True
    if low in ("false", "no", "0", "off"):
        return False
    raise ValueError(f"not a boolean: {v!r}")


GRID_KEYS = {"range_min": _floats(3), "range_max": _floats(3), "voxel_size": _floats(3)}
BACKBONE_KEYS = {
    "stem_block_count": int,
    "sin_positions": _ints(),
    "down_positions": _ints(),
    "channels": _ints(),
    "edb_count": int,
    "edb_blocks": int,
    "edb_sin": _bool,
    "kernel_size": int,
    "afd_kernel": int,
    "sin_stride": _ints(3),
}
HEAD_KEYS = {
    "num_classes": int,
    "score_threshold": float,
    "nms_iou": float,
    "max_detections": int,
    "bev_stride": int,
}
SCENE_KEYS = {
    "seed": int,
    "n_objects": int,
    "object_length": _floats(2),
    "object_width": _floats(2),
    "object_height": _floats(2),
    "points_per_object": _ints(2),
    "ground_points": int,
    "ground_z": float,
    "ground_noise": float,
    "ground_rings": int,
}
MODEL_KEYS = {"representation": str}


@dataclass(frozen=True)
class Config:
    grid: VoxelGridSpec = field(default_factory=VoxelGridSpec)
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    head: HeadSpec = field(default_factory=HeadSpec)
    scene: SceneSpec = field(default_factory=SceneSpec)
    representation: str = "slice"

    def model_grid(self) -> VoxelGridSpec:
        return self.grid.as_pillars() if self.representation == "pillar" else self.grid


def parse_config(text: str) -> Config:
    groups = {"grid": {}, "backbone": {}, "head": {}, "scene": {}, "model": {}}
    tables = (("grid", GRID_KEYS), ("backbone", BACKBONE_KEYS), ("head", HEAD_KEYS),
              ("scene", SCENE_KEYS), ("model", MODEL_KEYS))
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected 'key = value'")
        key, value = (s.strip() for s in line.split("=", 1))
        for group, table in tables:
            if key in table:
                if key in groups[group]:
                    raise ConfigError(f"line {lineno}: duplicate key {key!r}")
                try:
                    groups[group][key] = table[key](value)
                except ValueError as exc:
                    raise ConfigError(f"line {lineno}: bad value for {key!r}: {exc}") from None
                break
        else:
            raise ConfigError(f"line {lineno}: unknown key {key!r}")
    return build_config(**groups)


def build_config(grid=None, backbone=None, head=None, scene=None, model=None) -> Config:
    try:
        g = VoxelGridSpec(**(grid or {}))
        bb = BackboneConfig(**(backbone or {}))
        head = dict(head or {})
        if "bev_stride" in head and head["bev_stride"] != bb.bev_stride:
            raise ConfigError(
                f"bev_stride {head['bev_stride']} disagrees with the backbone's {bb.bev_stride}"
            )
        head["bev_stride"] = bb.bev_stride
        hs = HeadSpec(grid=g, **head)
        sc = SceneSpec(grid=g, **(scene or {}))
    except TypeError as exc:
        raise ConfigError(str(exc)) from None
    rep = (model or {}).get("representation", "slice")
    if rep not in REPRESENTATIONS:
        raise ConfigError(f"representation must be one of {REPRESENTATIONS}, got {rep!r}")
    return Config(g, bb, hs, sc, rep)


def load_config(path) -> Config:
    with open(path, encoding="utf-8") as fh:
        return parse_config(fh.read())


def dump_config(cfg: Config) -> str:
    """Inverse of :func:`parse_config` for every documented key."""
    def fmt(v):
        if isinstance(v, bool):
            return "true" if v else "false"
        if isinstance(v, tuple):
            return "[]" if not v else ", ".join(repr(x) for x in v)
        return repr(v) if not isinstance(v, str) else v

    lines = []
    for obj, keys in ((cfg.grid, GRID_KEYS), (cfg.backbone, BACKBONE_KEYS),
                      (cfg.head, HEAD_KEYS), (cfg.scene, SCENE_KEYS)):
        for k in keys:
            lines.append(f"{k} = {fmt(getattr(obj, k))}")
    lines.append(f"representation = {cfg.representation}")
    return "\n".join(lines) + "\n"
