"""Sparse center-heatmap head, box decoding and rotated BEV NMS."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .blocks import LayerSpec
from .errors import ChannelMismatch, ConfigError, GeometryMismatch
from .sparse import SparseTensor
from .spconv import ConvLayer
from .voxelize import VoxelGridSpec

REGRESS_CHANNELS = 8  # dx, dy, z, log l, log w, log h, sin yaw, cos yaw


@dataclass(frozen=True)
class HeadSpec:
    num_classes: int = 3
    score_threshold: float = 0.3
    nms_iou: float = 0.1
    max_detections: int = 500
    bev_stride: int = 8
    grid: VoxelGridSpec = field(default_factory=VoxelGridSpec)

    def __post_init__(self):
        if self.num_classes < 1:
            raise ConfigError("num_classes must be >= 1")
        for name in ("score_threshold", "nms_iou"):
            v = getattr(self, name)
            if not 0 < v < 1:
                raise ConfigError(f"{name} must lie in (0, 1), got {v}")
        if self.max_detections < 1 or self.bev_stride < 1:
            raise ConfigError("max_detections and bev_stride must be positive")


@dataclass(frozen=True)
class Detection:
    class_id: int
    score: float
    center: tuple[float, float, float]
    size: tuple[float, float, float]  # l, w, h
    yaw: float
    batch: int = 0

    @property
    def bev(self) -> tuple[float, float, float, float, float]:
        return (self.center[0], self.center[1], self.size[0], self.size[1], self.yaw)


def head_layer_specs(in_channels: int, num_classes: int):
    return [
        LayerSpec("head.heatmap", (1, 1), in_channels, num_classes),
        LayerSpec("head.regress", (1, 1), in_channels, REGRESS_CHANNELS),
    ]


def _pointwise(t: SparseTensor, layer: ConvLayer) -> np.ndarray:
    if any(k != 1 for k in layer.kernel_dims):
        raise GeometryMismatch(f"{layer.name}: head branches are 1x1")
    if layer.cin != t.channels:
        raise ChannelMismatch(f"{layer.name}: expects {layer.cin} channels, got {t.channels}")
    out = t.features @ layer.weights.reshape(layer.cin, layer.cout)
    if layer.bias is not None:
        out += layer.bias
    return out


def head_forward(bev: SparseTensor, heatmap: ConvLayer, regress: ConvLayer):
    """Class scores (sigmoid) and raw box regression on the BEV active set."""
    if regress.cout != REGRESS_CHANNELS:
        raise ChannelMismatch(f"{regress.name}: regression needs {REGRESS_CHANNELS} outputs")
    logits = _pointwise(bev, heatmap)
    scores = 1.0 / (1.0 + np.exp(-logits.astype(np.float64)))
    # keep scores strictly inside (0, 1) after the float32 cast
    eps = np.finfo(np.float32).epsneg
    np.clip(scores, np.finfo(np.float32).tiny, 1.0 - eps, out=scores)
    return bev.replace_features(scores), bev.replace_features(_pointwise(bev, regress))


def _wrap_yaw(yaw):
    return math.pi if yaw <= -math.pi else yaw


def decode(heatmap: SparseTensor, regress: SparseTensor, spec: HeadSpec) -> list[Detection]:
    """Boxes for every (site, class) with score above threshold, best first,
    truncated to ``max_detections``."""
    if not np.array_equal(heatmap.coords, regress.coords):
        raise GeometryMismatch("heatmap and regression must share an active set")
    scores = heatmap.features
    rows, classes = np.nonzero(scores > spec.score_threshold)
    if rows.size == 0:
        return []
    s = scores[rows, classes].astype(np.float64)
    order = np.argsort(-s, kind="stable")[: spec.max_detections]
    rows, classes, s = rows[order], classes[order], s[order]
    c = heatmap.coords[rows].astype(np.float64)
    r = regress.features[rows].astype(np.float64)
    g = spec.grid
    cell_x = g.voxel_size[0] * spec.bev_stride
    cell_y = g.voxel_size[1] * spec.bev_stride
    cx = g.range_min[0] + (c[:, 2] + 0.5 + r[:, 0]) * cell_x
    cy = g.range_min[1] + (c[:, 1] + 0.5 + r[:, 1]) * cell_y
    size = np.exp(r[:, 3:6])
    yaw = np.arctan2(r[:, 6], r[:, 7])
    return [
        Detection(
            class_id=int(classes[k]),
            score=float(s[k]),
            center=(float(cx[k]), float(cy[k]), float(r[k, 2])),
            size=(float(size[k, 0]), float(size[k, 1]), float(size[k, 2])),
            yaw=_wrap_yaw(float(yaw[k])),
            batch=int(c[k, 0]),
        )
        for k in range(rows.size)
    ]


def encode_box(det: Detection, site: Sequence[int], spec: HeadSpec) -> np.ndarray:
    """Regression vector that decodes to ``det`` at BEV site ``(y, x)``."""
    g = spec.grid
    y, x = site
    cell_x = g.voxel_size[0] * spec.bev_stride
    cell_y = g.voxel_size[1] * spec.bev_stride
    return np.array([
        (det.center[0] - g.range_min[0]) / cell_x - x - 0.5,
        (det.center[1] - g.range_min[1]) / cell_y - y - 0.5,
        det.center[2],
        math.log(det.size[0]),
        math.log(det.size[1]),
        math.log(det.size[2]),
        math.sin(det.yaw),
        math.cos(det.yaw),
    ])


def box_corners(cx, cy, l, w, yaw) -> list[tuple[float, float]]:
    """Counter-clockwise BEV corners; ``l`` runs along the heading."""
    c, s = math.cos(yaw), math.sin(yaw)
    hl, hw = l / 2, w / 2
    return [
        (cx + c * dx - s * dy, cy + s * dx + c * dy)
        for dx, dy in ((hl, hw), (-hl, hw), (-hl, -hw), (hl, -hw))
    ]


def polygon_area(poly) -> float:
    n = len(poly)
    acc = 0.0
    for i in range(n):
        x0, y0 = poly[i]
        x1, y1 = poly[(i + 1) % n]
        acc += x0 * y1 - x1 * y0
    return abs(acc) / 2


def clip_polygon(subject, clip) -> list[tuple[float, float]]:
    """Sutherland-Hodgman: part of ``subject`` inside convex CCW ``clip``."""
    out = list(subject)
    n = len(clip)
    for i in range(n):
        if not out:
            break
        ax, ay = clip[i]
        bx, by = clip[(i + 1) % n]
        ex, ey = bx - ax, by - ay

        def side(p):
            return ex * (p[1] - ay) - ey * (p[0] - ax)

        inp, out = out, []
        prev = inp[-1]
        sp = side(prev)
        for cur in inp:
            sc = side(cur)
            if sc >= 0:
                if sp < 0:
                    out.append(_cross_point(prev, cur, sp, sc))
                out.append(cur)
            elif sp >= 0:
                out.append(_cross_point(prev, cur, sp, sc))
            prev, sp = cur, sc
    return out


def _cross_point(p, q, sp, sq):
    t = sp / (sp - sq)
    return (p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1]))


def _axis_parallel(yaw: float) -> bool:
    # a rectangle turned by pi covers the same footprint
    return yaw == 0.0 or abs(yaw) == math.pi


def rotated_iou(a, b) -> float:
    """BEV IoU of two boxes given as (cx, cy, l, w, yaw)."""
    a, b = tuple(a), tuple(b)
    if b < a:  # clip in a fixed order so the result is exactly symmetric
        a, b = b, a
    area_a = a[2] * a[3]
    area_b = b[2] * b[3]
    if area_a <= 0 or area_b <= 0:
        return 0.0
    if _axis_parallel(a[4]) and _axis_parallel(b[4]):
        iw = max(0.0, min(a[0] + a[2] / 2, b[0] + b[2] / 2) - max(a[0] - a[2] / 2, b[0] - b[2] / 2))
        ih = max(0.0, min(a[1] + a[3] / 2, b[1] + b[3] / 2) - max(a[1] - a[3] / 2, b[1] - b[3] / 2))
        inter = iw * ih
        union = area_a + area_b - inter
        return inter / union if union > 0 else 0.0
    inter = polygon_area(clip_polygon(box_corners(*a), box_corners(*b)))
    inter = min(inter, area_a, area_b)
    union = area_a + area_b - inter
    return inter / union if union > 0 else 0.0


def nms_bev(dets: Sequence[Detection], iou_threshold: float) -> list[Detection]:
    """Greedy per-frame, per-class suppression, best score first (ties go to
    the lower input index). Survivors come back in that order."""
    kept: list[Detection] = []
    by_group: dict[tuple[int, int], list[tuple[float, float, float, tuple]]] = {}
    for i in sorted(range(len(dets)), key=lambda i: -dets[i].score):
        d = dets[i]
        bev = d.bev
        radius = 0.5 * math.hypot(bev[2], bev[3])
        group = by_group.setdefault((d.batch, d.class_id), [])
        suppressed = False
        for kx, ky, kr, kbev in group:
            # disjoint circumscribed circles cannot overlap
            if math.hypot(bev[0] - kx, bev[1] - ky) >= radius + kr:
                continue
            if rotated_iou(bev, kbev) > iou_threshold:
                suppressed = True
                break
        if not suppressed:
            kept.append(d)
            group.append((bev[0], bev[1], radius, bev))
    return kept


def _g6(v: float) -> float:
    return float(f"{v:.6g}")


def detection_record(det: Detection, frame_id: int) -> dict:
    return {
        "frame_id": int(frame_id),
        "class_id": det.class_id,
        "score": _g6(det.score),
        "cx": _g6(det.center[0]),
        "cy": _g6(det.center[1]),
        "cz": _g6(det.center[2]),
        "l": _g6(det.size[0]),
        "w": _g6(det.size[1]),
        "h": _g6(det.size[2]),
        "yaw": _g6(det.yaw),
    }


def to_jsonl(dets: Iterable[Detection], frame_ids: Sequence[int] = (0,)) -> str:
    lines = [json.dumps(detection_record(d, frame_ids[d.batch])) for d in dets]
    return "".join(line + "\n" for line in lines)
