"""Sparse convolution: rulebook construction and gather/GEMM/scatter.

Every conv uses cross-correlation with "same"-style padding
``pad = kernel // 2``: the output site ``q`` reads input site
``q * stride + k - pad`` for kernel tap ``k``. Weights are offset-major,
shaped ``(*kernel_dims, Cin, Cout)``, and taps are enumerated in
row-major order.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass
from types import MappingProxyType

import numpy as np

from . import kernels
from .errors import (
    ChannelMismatch,
    EvenKernel,
    GeometryMismatch,
    MissingPairedActiveSet,
    ShapeMismatch,
)
from .sparse import FEATURE_DTYPE, SparseTensor, _make

SUBMANIFOLD = "submanifold"
STRIDED = "strided"
TRANSPOSED = "transposed"
KINDS = (SUBMANIFOLD, STRIDED, TRANSPOSED)

_workers = None


def set_workers(n: int | None) -> None:
    """Threads used for per-offset GEMMs. ``None`` reads POINTSLICE_WORKERS."""
    global _workers
    if n is not None and n < 1:
        raise ValueError("workers must be >= 1")
    _workers = n


@contextmanager
def workers(n: int | None):
    """Temporarily use ``n`` threads; ``None`` leaves the setting alone."""
    global _workers
    prev = _workers
    if n is not None:
        set_workers(n)
    try:
        yield
    finally:
        _workers = prev


def get_workers() -> int:
    if _workers is not None:
        return _workers
    try:
        return max(1, int(os.environ.get("POINTSLICE_WORKERS", "1")))
    except ValueError:
        return 1


@dataclass(frozen=True, eq=False)
class ConvLayer:
    name: str
    weights: np.ndarray
    bias: np.ndarray | None = None
    stride: tuple[int, ...] | None = None
    kind: str = SUBMANIFOLD
    indice_key: str | None = None

    def __post_init__(self):
        w = np.ascontiguousarray(self.weights, dtype=FEATURE_DTYPE)
        if w.ndim not in (4, 5):
            raise ShapeMismatch(f"{self.name}: weights must be (*kernel, Cin, Cout), got {w.shape}")
        object.__setattr__(self, "weights", w)
        nsp = w.ndim - 2
        stride = (1,) * nsp if self.stride is None else tuple(int(s) for s in self.stride)
        if len(stride) != nsp or any(s < 1 for s in stride):
            raise ShapeMismatch(f"{self.name}: bad stride {stride}")
        object.__setattr__(self, "stride", stride)
        if self.bias is not None:
            b = np.ascontiguousarray(self.bias, dtype=FEATURE_DTYPE).reshape(-1)
            if b.shape[0] != w.shape[-1]:
                raise ChannelMismatch(f"{self.name}: bias length {b.shape[0]} != Cout {w.shape[-1]}")
            object.__setattr__(self, "bias", b)
        if self.kind not in KINDS:
            raise ValueError(f"{self.name}: unknown conv kind {self.kind!r}")
        if self.kind == SUBMANIFOLD:
            if any(s != 1 for s in stride):
                raise ShapeMismatch(f"{self.name}: submanifold conv requires stride 1")
            if any(k % 2 == 0 for k in self.kernel_dims):
                raise EvenKernel(f"{self.name}: submanifold kernel {self.kernel_dims} must be odd")
        if not np.isfinite(w).all():
            raise ValueError(f"{self.name}: non-finite weights")

    @property
    def kernel_dims(self) -> tuple[int, ...]:
        return tuple(self.weights.shape[:-2])

    @property
    def ndim(self) -> int:
        return self.weights.ndim - 2

    @property
    def cin(self) -> int:
        return int(self.weights.shape[-2])

    @property
    def cout(self) -> int:
        return int(self.weights.shape[-1])

    @property
    def padding(self) -> tuple[int, ...]:
        return tuple(k // 2 for k in self.kernel_dims)

    @property
    def n_params(self) -> int:
        return int(self.weights.size + (0 if self.bias is None else self.bias.size))

    def flat_weights(self) -> np.ndarray:
        return self.weights.reshape(-1, self.cin, self.cout)


@dataclass(frozen=True, eq=False)
class Rulebook:
    kernel_dims: tuple[int, ...]
    stride: tuple[int, ...]
    in_rows: np.ndarray
    out_rows: np.ndarray
    offset_ptr: np.ndarray
    output_coords: np.ndarray
    output_shape: tuple[int, ...]
    output_batch_size: int
    # geometry of the input side, needed to invert a strided conv
    input_coords: np.ndarray
    input_shape: tuple[int, ...]
    input_batch_size: int
    input_slice_height: int | None = None

    @property
    def n_offsets(self) -> int:
        return int(self.offset_ptr.shape[0] - 1)

    @property
    def n_pairs(self) -> int:
        return int(self.in_rows.shape[0])

    @property
    def nbytes(self) -> int:
        return int(self.in_rows.nbytes + self.out_rows.nbytes)

    def pairs(self, o: int) -> tuple[np.ndarray, np.ndarray]:
        a, b = self.offset_ptr[o], self.offset_ptr[o + 1]
        return self.in_rows[a:b], self.out_rows[a:b]

    def pair_set(self) -> set[tuple[int, int, int]]:
        """All ``(offset, in_row, out_row)`` triples, for tests."""
        seg = np.repeat(np.arange(self.n_offsets), np.diff(self.offset_ptr))
        return set(zip(seg.tolist(), self.in_rows.tolist(), self.out_rows.tolist()))


def strided_output_shape(shape, kernel_dims, stride) -> tuple[int, ...]:
    return tuple(
        (s + 2 * (k // 2) - k) // st + 1 for s, k, st in zip(shape, kernel_dims, stride)
    )


def build_rulebook_subm(t: SparseTensor, kernel_dims, backend=None) -> Rulebook:
    kernel_dims = tuple(int(k) for k in kernel_dims)
    if len(kernel_dims) != t.ndim:
        raise GeometryMismatch(f"kernel {kernel_dims} does not match {t.ndim}D tensor")
    if any(k % 2 == 0 or k < 1 for k in kernel_dims):
        raise EvenKernel(f"submanifold kernel {kernel_dims} must be odd")
    in_rows, out_rows, ptr = kernels.subm_pairs(t.coords, t.spatial_shape, kernel_dims, backend)
    return Rulebook(
        kernel_dims=kernel_dims,
        stride=(1,) * t.ndim,
        in_rows=in_rows,
        out_rows=out_rows,
        offset_ptr=ptr,
        output_coords=t.coords,
        output_shape=t.spatial_shape,
        output_batch_size=t.batch_size,
        input_coords=t.coords,
        input_shape=t.spatial_shape,
        input_batch_size=t.batch_size,
        input_slice_height=t.slice_height,
    )


def build_rulebook_strided(t: SparseTensor, kernel_dims, stride, backend=None) -> Rulebook:
    kernel_dims = tuple(int(k) for k in kernel_dims)
    if isinstance(stride, int):
        stride = (stride,) * t.ndim
    stride = tuple(int(s) for s in stride)
    if len(kernel_dims) != t.ndim or len(stride) != t.ndim:
        raise GeometryMismatch(f"kernel {kernel_dims}/stride {stride} do not match {t.ndim}D tensor")
    if any(s < 1 for s in stride):
        raise GeometryMismatch(f"stride must be positive, got {stride}")
    out_shape = strided_output_shape(t.spatial_shape, kernel_dims, stride)
    if any(s < 1 for s in out_shape):
        raise GeometryMismatch(f"kernel {kernel_dims} leaves no output on {t.spatial_shape}")
    pad = tuple(k // 2 for k in kernel_dims)
    out_coords, in_rows, out_rows, ptr = kernels.strided_pairs(
        t.coords, out_shape, kernel_dims, stride, pad, backend
    )
    return Rulebook(
        kernel_dims=kernel_dims,
        stride=stride,
        in_rows=in_rows,
        out_rows=out_rows,
        offset_ptr=ptr,
        output_coords=out_coords,
        output_shape=out_shape,
        output_batch_size=t.batch_size,
        input_coords=t.coords,
        input_shape=t.spatial_shape,
        input_batch_size=t.batch_size,
        input_slice_height=t.slice_height,
    )


def build_rulebook(t: SparseTensor, layer: ConvLayer) -> Rulebook:
    if layer.kind == SUBMANIFOLD:
        return build_rulebook_subm(t, layer.kernel_dims)
    if layer.kind == STRIDED:
        return build_rulebook_strided(t, layer.kernel_dims, layer.stride)
    raise GeometryMismatch(f"{layer.name}: transposed convs reuse a recorded rulebook")


def _gather_scatter(features, weights, rb: Rulebook, n_out, bias, forward=True):
    """out[j] = bias + sum_o W[o]^T in[i] over the pairs of each offset.

    Partial products may be computed on worker threads, but they are always
    accumulated in offset order, so the result does not depend on the
    worker count.
    """
    cout = weights.shape[-1]
    out = np.zeros((n_out, cout), dtype=FEATURE_DTYPE)
    if bias is not None and n_out:
        out += bias
    if features.shape[0] == 0 or n_out == 0:
        return out
    features = np.ascontiguousarray(features, dtype=FEATURE_DTYPE)
    n_in = features.shape[0]

    def partial(o, gbuf=None, pbuf=None):
        src, dst = rb.pairs(o)
        if not forward:
            src, dst = dst, src
        k = src.size
        if k == 0:
            return dst, None
        if k == n_in == n_out and src[0] == 0 and src[-1] == n_in - 1 and np.array_equal(src, dst):
            # centre tap of a submanifold conv: every row maps onto itself
            return None, features @ weights[o]
        if gbuf is None:
            gbuf = np.empty((k, features.shape[1]), dtype=FEATURE_DTYPE)
            pbuf = np.empty((k, cout), dtype=FEATURE_DTYPE)
        g = kernels.gather_rows(features, src, gbuf)
        return dst, np.matmul(g, weights[o], out=pbuf[:k])

    def accumulate(dst, p):
        if p is None:
            return
        if dst is None:
            np.add(out, p, out=out)
        else:
            kernels.scatter_add(out, dst, p)

    workers = get_workers()
    if workers <= 1:
        widest = int(np.diff(rb.offset_ptr).max()) if rb.n_offsets else 0
        gbuf = np.empty((widest, features.shape[1]), dtype=FEATURE_DTYPE)
        pbuf = np.empty((widest, cout), dtype=FEATURE_DTYPE)
        for o in range(rb.n_offsets):
            accumulate(*partial(o, gbuf, pbuf))
        return out
    with ThreadPoolExecutor(max_workers=workers) as pool:
        for start in range(0, rb.n_offsets, workers):
            for dst, p in pool.map(partial, range(start, min(start + workers, rb.n_offsets))):
                accumulate(dst, p)
    return out


def _check_layer(t: SparseTensor, layer: ConvLayer):
    if layer.ndim != t.ndim:
        raise GeometryMismatch(f"{layer.name}: {layer.ndim}D conv applied to {t.ndim}D tensor")
    if layer.cin != t.channels:
        raise ChannelMismatch(f"{layer.name}: expects {layer.cin} channels, tensor has {t.channels}")


def conv_forward(t: SparseTensor, layer: ConvLayer, rb: Rulebook | None = None) -> SparseTensor:
    """Apply a submanifold or strided conv (no activation)."""
    if layer.kind == TRANSPOSED:
        return transposed_conv_forward(t, layer, rb)
    _check_layer(t, layer)
    if rb is None:
        rb = build_rulebook(t, layer)
    if (
        rb.input_coords.shape[0] != t.n_active
        or rb.kernel_dims != layer.kernel_dims
        or rb.stride != layer.stride
        or rb.input_shape != t.spatial_shape
    ):
        raise GeometryMismatch(f"{layer.name}: rulebook was built for a different geometry")
    n_out = rb.output_coords.shape[0]
    feats = _gather_scatter(t.features, layer.flat_weights(), rb, n_out, layer.bias)
    if layer.kind == SUBMANIFOLD:
        out = _make(feats, t.coords, t.spatial_shape, t.batch_size, t.slice_height, t.indice_dict)
    else:
        # a 2D strided conv on slices keeps the batch axis, hence the height;
        # 3D tensors never carry one
        sh = t.slice_height if t.ndim == 2 else None
        out = _make(feats, rb.output_coords, rb.output_shape, rb.output_batch_size, sh, t.indice_dict)
        if layer.indice_key is not None:
            out = out.with_indice(layer.indice_key, rb)
    return out


def transposed_conv_forward(t: SparseTensor, layer: ConvLayer, rb: Rulebook | None = None) -> SparseTensor:
    """Inverse of a recorded strided conv: outputs land exactly on the
    active set that conv consumed."""
    _check_layer(t, layer)
    if rb is None:
        if layer.indice_key is None or layer.indice_key not in t.indice_dict:
            raise MissingPairedActiveSet(
                f"{layer.name}: no recorded downsampling for key {layer.indice_key!r}"
            )
        rb = t.indice_dict[layer.indice_key]
    if (
        rb.kernel_dims != layer.kernel_dims
        or rb.stride != layer.stride
        or rb.output_shape != t.spatial_shape
        or not np.array_equal(rb.output_coords, t.coords)
    ):
        raise GeometryMismatch(f"{layer.name}: tensor does not match the recorded downsampling")
    n_out = rb.input_coords.shape[0]
    feats = _gather_scatter(t.features, layer.flat_weights(), rb, n_out, layer.bias, forward=False)
    d = dict(t.indice_dict)
    d.pop(layer.indice_key, None)
    return _make(feats, rb.input_coords, rb.input_shape, rb.input_batch_size,
                 rb.input_slice_height, MappingProxyType(d))
