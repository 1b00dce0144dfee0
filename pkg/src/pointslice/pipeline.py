"""End-to-end inference: points -> voxels -> backbone -> head -> boxes."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

from .blocks import BackboneConfig, RulebookCache, Trace, backbone_forward, make_layers
from .config import Config
from .head import Detection, HeadSpec, decode, head_forward, nms_bev, to_jsonl
from .spconv import ConvLayer
from .voxelize import PointCloud, VoxelGridSpec, encode_features, voxelize
from .weights import model_layer_specs


@dataclass
class Model:
    backbone: BackboneConfig
    head: HeadSpec
    grid: VoxelGridSpec
    layers: dict[str, ConvLayer]
    representation: str = "slice"

    @classmethod
    def from_weights(cls, weights, backbone: BackboneConfig, head: HeadSpec,
                     grid: VoxelGridSpec, representation: str = "slice") -> "Model":
        specs = model_layer_specs(backbone, head, representation)
        if representation == "pillar" and grid.grid_dims[0] != 1:
            grid = grid.as_pillars()
        return cls(backbone, head, grid, make_layers(specs, weights), representation)

    @classmethod
    def from_config(cls, weights, cfg: Config) -> "Model":
        return cls.from_weights(weights, cfg.backbone, cfg.head, cfg.grid, cfg.representation)

    def encode(self, clouds):
        return encode_features(voxelize(clouds, self.grid), self.layers["encoder"])

    def backbone_forward(self, voxels, trace: Trace | None = None, cache: RulebookCache | None = None):
        return backbone_forward(voxels, self.backbone, self.layers,
                                representation=self.representation, trace=trace, cache=cache)

    def detect(self, clouds, trace: Trace | None = None) -> list[Detection]:
        bev = self.backbone_forward(self.encode(clouds), trace=trace)
        heat, reg = head_forward(bev, self.layers["head.heatmap"], self.layers["head.regress"])
        return nms_bev(decode(heat, reg, self.head), self.head.nms_iou)


def infer_jsonl(clouds: Sequence[PointCloud], model: Model) -> str:
    dets = model.detect(list(clouds))
    return to_jsonl(dets, [c.frame_id for c in clouds])
