"""Residual, encoder-decoder, slice-interaction and diffusion blocks, and the
backbones assembled from them.

Three backbone layouts share one configuration:

* ``slice``   -- 2D blocks on slice tensors, 3D SIN convs at stage transitions
* ``pillar``  -- the slice layout on a single-height grid, without SIN
* ``voxel3d`` -- every 2D conv widened to 3D, no slicing
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping

import numpy as np

from . import kernels
from .errors import ChannelMismatch, ConfigError, GeometryMismatch, IncompleteWeights, MissingSliceHeight
from .slicing import collapse_slices, slice_tensor, unslice_tensor
from .sparse import SparseTensor, _make, pack_keys
from .spconv import (
    STRIDED,
    SUBMANIFOLD,
    TRANSPOSED,
    ConvLayer,
    Rulebook,
    build_rulebook_strided,
    build_rulebook_subm,
    conv_forward,
    transposed_conv_forward,
)

REPRESENTATIONS = ("slice", "pillar", "voxel3d")
SIN_KERNEL = 3
DOWN_KERNEL = 3


@dataclass(frozen=True)
class BackboneConfig:
    stem_block_count: int = 8
    sin_positions: tuple[int, ...] = (2, 4, 8)
    channels: tuple[int, ...] = (32, 64, 128, 256)
    edb_count: int = 1
    kernel_size: int = 3
    afd_kernel: int = 3
    # Stage transitions; defaults to sin_positions. A transition not listed in
    # sin_positions is a plain 2D stride-2 conv that keeps slices apart.
    down_positions: tuple[int, ...] | None = None
    # SIN at the entry of each EDB; defaults to "on iff any stem SIN".
    edb_sin: bool | None = None
    edb_blocks: int = 1
    sin_stride: tuple[int, int, int] = (2, 2, 2)

    def __post_init__(self):
        object.__setattr__(self, "sin_positions", tuple(int(p) for p in self.sin_positions))
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "sin_stride", tuple(int(s) for s in self.sin_stride))
        if self.down_positions is None:
            object.__setattr__(self, "down_positions", self.sin_positions)
        else:
            object.__setattr__(self, "down_positions", tuple(int(p) for p in self.down_positions))
        if self.edb_sin is None:
            object.__setattr__(self, "edb_sin", bool(self.sin_positions))
        self.validate()

    def validate(self):
        n = self.stem_block_count
        if n < 0 or self.edb_count < 0 or self.edb_blocks < 0:
            raise ConfigError("block counts must be non-negative")
        if list(self.down_positions) != sorted(set(self.down_positions)):
            raise ConfigError(f"down_positions must be strictly increasing: {self.down_positions}")
        if not all(1 <= p <= n for p in self.down_positions):
            raise ConfigError(f"stage transitions {self.down_positions} outside [1, {n}]")
        if not set(self.sin_positions) <= set(self.down_positions):
            raise ConfigError(f"sin_positions {self.sin_positions} not a subset of {self.down_positions}")
        if len(self.channels) != len(self.down_positions) + 1:
            raise ConfigError(
                f"need {len(self.down_positions) + 1} channel widths, got {len(self.channels)}"
            )
        if any(c < 1 for c in self.channels):
            raise ConfigError("channel widths must be positive")
        if self.kernel_size not in (3, 5):
            raise ConfigError(f"kernel_size must be 3 or 5, got {self.kernel_size}")
        if self.afd_kernel < 3 or self.afd_kernel % 2 == 0:
            raise ConfigError(f"afd_kernel must be odd and >= 3, got {self.afd_kernel}")
        if len(self.sin_stride) != 3 or any(s not in (1, 2) for s in self.sin_stride):
            raise ConfigError(f"sin_stride must be three of 1 or 2, got {self.sin_stride}")

    @property
    def bev_stride(self) -> int:
        return 2 ** len(self.down_positions)

    def pillarized(self) -> "BackboneConfig":
        """Same schedule with every transition a 2D conv and no EDB SIN."""
        return replace(self, sin_positions=(), down_positions=self.down_positions, edb_sin=False)


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kernel_dims: tuple[int, ...]
    cin: int
    cout: int
    kind: str = SUBMANIFOLD
    stride: tuple[int, ...] | None = None
    indice_key: str | None = None
    bias: bool = True

    @property
    def fan_in(self) -> int:
        return int(np.prod(self.kernel_dims)) * self.cin

    @property
    def n_params(self) -> int:
        return int(np.prod(self.kernel_dims)) * self.cin * self.cout + (self.cout if self.bias else 0)


def backbone_layer_specs(cfg: BackboneConfig, representation: str = "slice") -> list[LayerSpec]:
    if representation not in REPRESENTATIONS:
        raise ConfigError(f"unknown representation {representation!r}")
    if representation == "pillar":
        cfg = cfg.pillarized()
    is3d = representation == "voxel3d"
    nd = 3 if is3d else 2
    k = cfg.kernel_size
    kdims = (k,) * nd
    specs: list[LayerSpec] = []
    rank = 0
    for i in range(1, cfg.stem_block_count + 1):
        c = cfg.channels[rank]
        specs.append(LayerSpec(f"stem.block{i}.conv1", kdims, c, c))
        specs.append(LayerSpec(f"stem.block{i}.conv2", kdims, c, c))
        if i in cfg.down_positions:
            rank += 1
            cin, cout = c, cfg.channels[rank]
            if is3d:
                # a SIN is already 3D; a 2D transition widens to 3D without a z stride
                stride = cfg.sin_stride if i in cfg.sin_positions else (1, 2, 2)
                specs.append(LayerSpec(f"stem.down{rank}", (SIN_KERNEL,) * 3, cin, cout,
                                       STRIDED, stride))
            elif i in cfg.sin_positions:
                specs.append(LayerSpec(f"stem.sin{rank}", (SIN_KERNEL,) * 3, cin, cout,
                                       STRIDED, cfg.sin_stride))
            else:
                specs.append(LayerSpec(f"stem.down{rank}", (DOWN_KERNEL,) * 2, cin, cout,
                                       STRIDED, (2, 2)))
    c = cfg.channels[rank]
    for e in range(1, cfg.edb_count + 1):
        p = f"edb{e}"
        if cfg.edb_sin and not is3d:
            specs.append(LayerSpec(f"{p}.sin", (SIN_KERNEL,) * 3, c, c))
        ystride = (1, 2, 2) if is3d else (2, 2)
        specs.append(LayerSpec(f"{p}.down", (DOWN_KERNEL,) * nd, c, c, STRIDED, ystride,
                               indice_key=f"{p}.down"))
        for m in range(1, cfg.edb_blocks + 1):
            specs.append(LayerSpec(f"{p}.block{m}.conv1", kdims, c, c))
            specs.append(LayerSpec(f"{p}.block{m}.conv2", kdims, c, c))
        specs.append(LayerSpec(f"{p}.up", (DOWN_KERNEL,) * nd, c, c, TRANSPOSED, ystride,
                               indice_key=f"{p}.down"))
    return specs


def make_layers(specs: Iterable[LayerSpec], weights: Mapping[str, np.ndarray]) -> dict[str, ConvLayer]:
    """Bind weight tensors (``<name>.weight`` / ``<name>.bias``) to layer specs."""
    layers = {}
    for s in specs:
        wkey = f"{s.name}.weight"
        if wkey not in weights or (s.bias and f"{s.name}.bias" not in weights):
            raise IncompleteWeights(s.name)
        w = weights[wkey]
        expect = (*s.kernel_dims, s.cin, s.cout)
        if tuple(w.shape) != expect:
            raise ChannelMismatch(f"{s.name}: weight shape {tuple(w.shape)} != {expect}")
        layers[s.name] = ConvLayer(
            s.name, w, weights[f"{s.name}.bias"] if s.bias else None,
            s.stride, s.kind, s.indice_key,
        )
    return layers


class Trace:
    """Per-boundary record of active sites and live feature bytes."""

    def __init__(self):
        self.events: list[tuple[str, int, int, int]] = []

    def record(self, name: str, out: SparseTensor, *held: SparseTensor) -> None:
        live = out.nbytes + sum(h.nbytes for h in held)
        self.events.append((name, out.n_active, out.channels, live))

    @property
    def peak_active_sites(self) -> int:
        return max((e[1] for e in self.events), default=0)

    @property
    def peak_feature_bytes(self) -> int:
        return max((e[3] for e in self.events), default=0)


class RulebookCache:
    """Reuses submanifold rulebooks while the active set is unchanged."""

    def __init__(self):
        self._entries: dict = {}

    def subm(self, t: SparseTensor, kernel_dims) -> Rulebook:
        key = (id(t.coords), tuple(kernel_dims), t.spatial_shape, t.batch_size)
        hit = self._entries.get(key)
        if hit is not None and hit[0] is t.coords:
            return hit[1]
        rb = build_rulebook_subm(t, kernel_dims)
        self._entries[key] = (t.coords, rb)
        return rb


def _note(trace, name, out, *held):
    if trace is not None:
        trace.record(name, out, *held)


def relu(t: SparseTensor) -> SparseTensor:
    return t.replace_features(np.maximum(t.features, 0))


def _conv(t, layer, cache):
    rb = cache.subm(t, layer.kernel_dims) if (cache is not None and layer.kind == SUBMANIFOLD) else None
    return conv_forward(t, layer, rb)


def srb_forward(t: SparseTensor, layers, *, trace=None, cache=None, name="srb", held=()) -> SparseTensor:
    """``ReLU(conv2(ReLU(conv1(t))) + t)`` on the input's active set.

    ``held`` lists tensors kept alive by the caller; they only affect the
    trace's live-byte accounting.
    """
    conv1, conv2 = layers
    for layer in (conv1, conv2):
        if layer.kind != SUBMANIFOLD:
            raise GeometryMismatch(f"{layer.name}: residual blocks need submanifold convs")
    if not (conv1.cin == t.channels == conv2.cout and conv1.cout == conv2.cin):
        raise ChannelMismatch(
            f"{name}: channels {t.channels}->{conv1.cin}/{conv1.cout}->{conv2.cin}/{conv2.cout}"
        )
    h = relu(_conv(t, conv1, cache))
    _note(trace, f"{name}.conv1", h, t, *held)
    y = _conv(h, conv2, cache)
    _note(trace, f"{name}.conv2", y, t, h, *held)
    out = t.replace_features(np.maximum(y.features + t.features, 0))
    _note(trace, f"{name}.add", out, *held)
    return out


def sin_forward(t: SparseTensor, layer: ConvLayer, rb: Rulebook | None = None) -> SparseTensor:
    """Regroup slices into voxels, apply a 3D conv, slice again."""
    if t.slice_height is None:
        raise MissingSliceHeight("slice interaction needs a slice tensor")
    if layer.ndim != 3:
        raise GeometryMismatch(f"{layer.name}: slice interaction uses a 3D conv")
    return slice_tensor(conv_forward(unslice_tensor(t), layer, rb))


def edb_forward(t: SparseTensor, down: ConvLayer, blocks, up: ConvLayer, sin: ConvLayer | None = None,
                *, trace=None, cache=None, name="edb") -> SparseTensor:
    """One-level sparse encoder-decoder with a residual skip.

    The SIN, if given, runs at block entry and feeds both the encoder and
    the skip. The transposed conv restores the skip's active set exactly.
    """
    x = t
    if sin is not None:
        x = relu(sin_forward(t, sin))
        _note(trace, f"{name}.sin", x, t)
    if down.kind != STRIDED or up.kind != TRANSPOSED:
        raise GeometryMismatch(f"{name}: needs a strided down conv and a transposed up conv")
    d = relu(conv_forward(x, down))
    _note(trace, f"{name}.down", d, x)
    for m, pair in enumerate(blocks, 1):
        d = srb_forward(d, pair, trace=trace, cache=cache, name=f"{name}.block{m}", held=(x,))
    u = transposed_conv_forward(d, up)
    _note(trace, f"{name}.up", u, x, d)
    if not np.array_equal(u.coords, x.coords):
        raise GeometryMismatch(f"{name}: decoder did not restore the input active set")
    out = x.replace_features(np.maximum(u.features + x.features, 0))
    _note(trace, f"{name}.add", out)
    return out


def afd_diffuse(t: SparseTensor, kernel: int = 3) -> SparseTensor:
    """Dilate the active set by a ``kernel`` box; new sites take the mean of
    their active neighbours, existing sites keep their features."""
    if kernel < 3 or kernel % 2 == 0:
        raise ConfigError(f"diffusion kernel must be odd and >= 3, got {kernel}")
    rb = build_rulebook_strided(t, (kernel,) * t.ndim, 1)
    m = rb.output_coords.shape[0]
    sums = np.zeros((m, t.channels), dtype=np.float64)
    counts = np.zeros(m, dtype=np.int64)
    feats_in = np.ascontiguousarray(t.features)
    gbuf = np.empty((int(np.diff(rb.offset_ptr).max(initial=0)), t.channels), dtype=np.float32)
    for o in range(rb.n_offsets):
        src, dst = rb.pairs(o)
        kernels.scatter_add(sums, dst, kernels.gather_rows(feats_in, src, gbuf))
        counts[dst] += 1
    feats = np.zeros((m, t.channels), dtype=np.float32)
    if m:
        feats[:] = sums / counts[:, None]
    if t.n_active:
        rows = np.searchsorted(pack_keys(rb.output_coords), pack_keys(t.coords))
        feats[rows] = t.features
    return _make(feats, rb.output_coords, t.spatial_shape, t.batch_size, t.slice_height)


def backbone_forward(t: SparseTensor, cfg: BackboneConfig, weights, *, representation="slice",
                     trace: Trace | None = None, cache: RulebookCache | None = None) -> SparseTensor:
    """Encoded voxels (C = channels[0]) to a diffused BEV map with one batch
    entry per frame."""
    x = backbone_features(t, cfg, weights, representation=representation, trace=trace, cache=cache)
    bev = collapse_slices(x)
    _note(trace, "collapse", bev, x)
    bev = afd_diffuse(bev, cfg.afd_kernel)
    _note(trace, "afd", bev)
    return bev


def backbone_features(t: SparseTensor, cfg: BackboneConfig, weights, *, representation="slice",
                      trace: Trace | None = None, cache: RulebookCache | None = None) -> SparseTensor:
    """Stem and EDBs only: the slice tensor (or, for voxel3d, the voxel
    tensor) that the BEV collapse consumes."""
    if representation == "pillar":
        cfg = cfg.pillarized()
        representation = "slice"
    specs = backbone_layer_specs(cfg, representation)
    layers = weights if _all_layers(weights, specs) else make_layers(specs, weights)
    if t.ndim != 3:
        raise GeometryMismatch("backbone input must be a voxel tensor")
    if t.channels != cfg.channels[0]:
        raise ChannelMismatch(f"backbone expects {cfg.channels[0]} input channels, got {t.channels}")
    if cache is None:
        cache = RulebookCache()
    is3d = representation == "voxel3d"
    x = t if is3d else slice_tensor(t)
    _note(trace, "input", x)
    rank = 0
    for i in range(1, cfg.stem_block_count + 1):
        p = f"stem.block{i}"
        x = srb_forward(x, (layers[f"{p}.conv1"], layers[f"{p}.conv2"]), trace=trace, cache=cache, name=p)
        if i in cfg.down_positions:
            rank += 1
            if not is3d and i in cfg.sin_positions:
                y = relu(sin_forward(x, layers[f"stem.sin{rank}"]))
                _note(trace, f"stem.sin{rank}", y, x)
            else:
                y = relu(conv_forward(x, layers[f"stem.down{rank}"]))
                _note(trace, f"stem.down{rank}", y, x)
            x = y
    for e in range(1, cfg.edb_count + 1):
        p = f"edb{e}"
        blocks = [(layers[f"{p}.block{m}.conv1"], layers[f"{p}.block{m}.conv2"])
                  for m in range(1, cfg.edb_blocks + 1)]
        sin = layers.get(f"{p}.sin") if (cfg.edb_sin and not is3d) else None
        x = edb_forward(x, layers[f"{p}.down"], blocks, layers[f"{p}.up"], sin,
                        trace=trace, cache=cache, name=p)
    return x


def _all_layers(weights, specs) -> bool:
    return all(isinstance(weights.get(s.name), ConvLayer) for s in specs)
