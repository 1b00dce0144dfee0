"""Sparse-tensor inference engine for slice-based point-cloud detection.

3D voxels are folded into batched 2D slices, run through a 2D sparse
backbone with occasional 3D slice-interaction layers, collapsed to a BEV
map and decoded into rotated boxes.
"""

from .blocks import BackboneConfig, backbone_forward
from .errors import PointSliceError
from .head import Detection, HeadSpec, nms_bev, rotated_iou
from .kernels import BACKEND
from .pipeline import Model, infer_jsonl
from .scene import SceneSpec, gen_scene
from .slicing import collapse_slices, slice_tensor, unslice_tensor
from .sparse import SparseTensor, from_coords, from_dense, to_dense
from .spconv import ConvLayer, conv_forward, transposed_conv_forward
from .voxelize import PointCloud, VoxelGridSpec, voxelize
from .weights import count_params, init_weights, load_weights, save_weights

__version__ = "0.1.0"

__all__ = [
    "BACKEND",
    "BackboneConfig",
    "ConvLayer",
    "Detection",
    "HeadSpec",
    "Model",
    "PointCloud",
    "PointSliceError",
    "SceneSpec",
    "SparseTensor",
    "VoxelGridSpec",
    "backbone_forward",
    "collapse_slices",
    "conv_forward",
    "count_params",
    "from_coords",
    "from_dense",
    "gen_scene",
    "infer_jsonl",
    "init_weights",
    "load_weights",
    "nms_bev",
    "rotated_iou",
    "save_weights",
    "slice_tensor",
    "to_dense",
    "transposed_conv_forward",
    "unslice_tensor",
    "voxelize",
]
