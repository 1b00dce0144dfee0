"""Weight sets: seeded initialization, parameter counting and the PSW1
binary format.

A weight set is an ordered ``dict`` mapping tensor names such as
``stem.block1.conv1.weight`` to float32 arrays.

PSW1 layout (all little-endian)::

    b"PSW1"  u32 tensor_count
    repeated: u16 name_len, name (utf-8), u8 ndim, ndim x u32 dims,
              prod(dims) x f32 values (C order, i.e. offset-major for convs)
"""

from __future__ import annotations

import math
import struct
from typing import Mapping

import numpy as np

from .blocks import BackboneConfig, LayerSpec, backbone_layer_specs
from .errors import BadMagic, DuplicateTensorName, TruncatedFile, WeightFormatError
from .head import HeadSpec, head_layer_specs
from .voxelize import RAW_CHANNELS

MAGIC = b"PSW1"

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


class SplitMix64:
    """splitmix64: state advances by the golden gamma, output is mixed."""

    def __init__(self, seed: int):
        self.state = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.counter = 0

    def next_u64(self, n: int) -> np.ndarray:
        i = np.arange(self.counter + 1, self.counter + n + 1, dtype=np.uint64)
        self.counter += n
        with np.errstate(over="ignore"):
            z = np.uint64(self.state) + i * _GAMMA
            z = (z ^ (z >> np.uint64(30))) * _MIX1
            z = (z ^ (z >> np.uint64(27))) * _MIX2
        return z ^ (z >> np.uint64(31))

    def uniform(self, n: int) -> np.ndarray:
        """Doubles in [0, 1) from the top 53 bits."""
        return (self.next_u64(n) >> np.uint64(11)).astype(np.float64) * (2.0 ** -53)


def model_layer_specs(cfg: BackboneConfig, head: HeadSpec, representation: str = "slice") -> list[LayerSpec]:
    """Encoder, backbone and head layers of one model, in execution order."""
    specs = [LayerSpec("encoder", (1, 1, 1), RAW_CHANNELS, cfg.channels[0])]
    specs += backbone_layer_specs(cfg, representation)
    specs += head_layer_specs(cfg.channels[-1], head.num_classes)
    return specs


def init_weights(cfg: BackboneConfig, head: HeadSpec, seed: int, representation: str = "slice") -> dict:
    """Uniform in [-s, s] with s = 1/sqrt(fan_in) for weights and biases, one
    splitmix64 stream consumed in layer order."""
    rng = SplitMix64(seed)
    out: dict[str, np.ndarray] = {}
    for spec in model_layer_specs(cfg, head, representation):
        s = 1.0 / math.sqrt(spec.fan_in)
        bound = np.float32(s)
        if float(bound) > s:
            bound = np.nextafter(bound, np.float32(0))
        shapes = [("weight", (*spec.kernel_dims, spec.cin, spec.cout))]
        if spec.bias:
            shapes.append(("bias", (spec.cout,)))
        for suffix, shape in shapes:
            n = int(np.prod(shape))
            vals = ((2.0 * rng.uniform(n) - 1.0) * s).astype(np.float32)
            np.clip(vals, -bound, bound, out=vals)
            out[f"{spec.name}.{suffix}"] = vals.reshape(shape)
    return out


def _layer_of(name: str) -> str:
    base, _, suffix = name.rpartition(".")
    return base if suffix in ("weight", "bias") and base else name


def count_params(weights: Mapping[str, np.ndarray]) -> tuple[dict[str, int], int]:
    """Per-layer parameter counts and their exact total."""
    per_layer: dict[str, int] = {}
    for name, arr in weights.items():
        layer = _layer_of(name)
        per_layer[layer] = per_layer.get(layer, 0) + int(np.asarray(arr).size)
    return per_layer, sum(per_layer.values())


def serialize_weights(weights: Mapping[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<I", len(weights))]
    for name, arr in weights.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr, dtype="<f4")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def save_weights(path, weights: Mapping[str, np.ndarray]) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize_weights(weights))


def load_weights(path) -> dict[str, np.ndarray]:
    """Parse a whole PSW1 file; nothing is returned unless it is valid."""
    with open(path, "rb") as fh:
        buf = fh.read()
    return parse_weights(buf)


def parse_weights(buf: bytes) -> dict[str, np.ndarray]:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagic(f"expected magic {MAGIC!r}, got {buf[:4]!r}")
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise TruncatedFile(f"need {n} bytes at offset {pos}, file has {len(buf)}")
        chunk = buf[pos:pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    out: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        try:
            name = take(nlen).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise WeightFormatError(f"tensor name is not utf-8: {exc}") from None
        (ndim,) = struct.unpack("<B", take(1))
        dims = struct.unpack(f"<{ndim}I", take(4 * ndim))
        n = int(np.prod(dims, dtype=np.int64))
        data = np.frombuffer(take(4 * n), dtype="<f4").astype(np.float32).reshape(dims)
        if name in out:
            raise DuplicateTensorName(f"tensor {name!r} appears twice")
        out[name] = data
    if pos != len(buf):
        raise WeightFormatError(f"{len(buf) - pos} trailing bytes after {count} tensors")
    return out
