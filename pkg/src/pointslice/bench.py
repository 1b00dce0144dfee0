"""Matched slice / pillar / voxel3d benchmark.

All three backbones share the channel schedule and BEV stride of one
``BackboneConfig`` and consume the same point cloud. Timings use a
monotonic clock and report the median over ``repetitions`` runs after
``warmup`` discarded runs. Memory is a feature-byte proxy (active rows x
channels x 4 bytes over live tensors), not a measurement of the process.
"""

from __future__ import annotations

import json
import statistics
import time
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Mapping, Sequence

from . import kernels
from .blocks import REPRESENTATIONS, BackboneConfig, RulebookCache, Trace
from .errors import ConfigError, ConfigIncompatible
from .head import HeadSpec, decode, head_forward, nms_bev
from .pipeline import Model
from .scene import SceneSpec, gen_scene
from .spconv import get_workers
from .weights import count_params, init_weights

MEMORY_METRIC = "feature-byte proxy: sum of N_active*C*4 over live tensors, max over layer boundaries"


@dataclass
class RepresentationReport:
    param_count: int
    input_voxels: int
    backbone_ms: list[float]
    end_to_end_ms: list[float]
    peak_active_sites: int
    peak_feature_bytes: int
    detections: int

    @property
    def backbone_median_ms(self) -> float:
        return statistics.median(self.backbone_ms) if self.backbone_ms else 0.0

    @property
    def backbone_mean_ms(self) -> float:
        return statistics.fmean(self.backbone_ms) if self.backbone_ms else 0.0

    @property
    def end_to_end_median_ms(self) -> float:
        return statistics.median(self.end_to_end_ms) if self.end_to_end_ms else 0.0

    @property
    def end_to_end_mean_ms(self) -> float:
        return statistics.fmean(self.end_to_end_ms) if self.end_to_end_ms else 0.0


@dataclass
class BenchReport:
    repetitions: int
    warmup: int
    workers: int
    backend: str
    seed: int
    results: dict[str, RepresentationReport] = field(default_factory=dict)

    def ratios(self) -> dict[str, dict[str, float]]:
        """Per representation, relative to voxel3d. Missing operands or zero
        denominators leave the ratio out."""
        base = self.results.get("voxel3d")
        out: dict[str, dict[str, float]] = {}
        if base is None:
            return out
        for name, r in self.results.items():
            row = {}
            if base.param_count:
                row["param_ratio"] = r.param_count / base.param_count
            if r.backbone_median_ms > 0 and base.backbone_median_ms > 0:
                row["backbone_speedup"] = base.backbone_median_ms / r.backbone_median_ms
            if r.end_to_end_median_ms > 0 and base.end_to_end_median_ms > 0:
                row["end_to_end_speedup"] = base.end_to_end_median_ms / r.end_to_end_median_ms
            if base.peak_feature_bytes:
                row["memory_proxy_ratio"] = r.peak_feature_bytes / base.peak_feature_bytes
            out[name] = row
        return out

    def to_dict(self) -> dict:
        results = {}
        for name, r in self.results.items():
            d = asdict(r)
            d["backbone_median_ms"] = r.backbone_median_ms
            d["backbone_mean_ms"] = r.backbone_mean_ms
            d["end_to_end_median_ms"] = r.end_to_end_median_ms
            d["end_to_end_mean_ms"] = r.end_to_end_mean_ms
            results[name] = d
        return {
            "repetitions": self.repetitions,
            "warmup": self.warmup,
            "workers": self.workers,
            "backend": self.backend,
            "seed": self.seed,
            "memory_metric": MEMORY_METRIC,
            "results": results,
            "ratios_vs_voxel3d": self.ratios(),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "BenchReport":
        d = json.loads(text)
        keep = {f.name for f in fields(RepresentationReport)}
        results = {
            name: RepresentationReport(**{k: v for k, v in r.items() if k in keep})
            for name, r in d["results"].items()
        }
        return cls(d["repetitions"], d["warmup"], d["workers"], d["backend"], d["seed"], results)


def _signature(cfg: BackboneConfig, representation: str):
    if representation == "pillar":
        cfg = cfg.pillarized()
    return tuple(cfg.channels), cfg.bev_stride


def check_matched(configs: Mapping[str, BackboneConfig]) -> None:
    """Raise ConfigIncompatible unless every backbone has the same channel
    schedule and BEV downsampling factor."""
    sigs = {rep: _signature(cfg, rep) for rep, cfg in configs.items()}
    first_rep, first = next(iter(sigs.items()))
    for rep, sig in sigs.items():
        if sig[0] != first[0]:
            raise ConfigIncompatible(f"channel schedule of {rep} {sig[0]} differs from {first_rep} {first[0]}")
        if sig[1] != first[1]:
            raise ConfigIncompatible(f"bev stride of {rep} ({sig[1]}) differs from {first_rep} ({first[1]})")


def run_bench(
    scene: SceneSpec,
    cfg: BackboneConfig | None = None,
    head: HeadSpec | None = None,
    *,
    repetitions: int = 3,
    warmup: int = 1,
    seed: int = 0,
    representations: Sequence[str] = REPRESENTATIONS,
    configs: Mapping[str, BackboneConfig] | None = None,
    clock: Callable[[], float] = time.perf_counter,
) -> BenchReport:
    if repetitions < 3:
        raise ConfigError(f"repetitions must be at least 3, got {repetitions}")
    if warmup < 1:
        raise ConfigError(f"warmup must be at least 1, got {warmup}")
    for rep in representations:
        if rep not in REPRESENTATIONS:
            raise ConfigError(f"unknown representation {rep!r}")
    cfg = cfg or BackboneConfig()
    per_rep = {rep: (configs or {}).get(rep, cfg) for rep in representations}
    check_matched(per_rep)
    head = head or HeadSpec(bev_stride=cfg.bev_stride, grid=scene.grid)
    if head.bev_stride != cfg.bev_stride:
        raise ConfigIncompatible(f"head bev_stride {head.bev_stride} != backbone {cfg.bev_stride}")

    cloud = gen_scene(scene)
    report = BenchReport(repetitions, warmup, get_workers(), kernels.BACKEND, seed)
    for rep in representations:
        bcfg = per_rep[rep]
        weights = init_weights(bcfg, head, seed, rep)
        model = Model.from_weights(weights, bcfg, head, scene.grid, rep)
        bb_ms, e2e_ms = [], []
        trace = None
        n_in = n_det = 0
        for i in range(warmup + repetitions):
            run_trace = Trace() if i == 0 else None
            t0 = clock()
            vox = model.encode([cloud])
            t1 = clock()
            bev = model.backbone_forward(vox, trace=run_trace, cache=RulebookCache())
            t2 = clock()
            heat, reg = head_forward(bev, model.layers["head.heatmap"], model.layers["head.regress"])
            dets = nms_bev(decode(heat, reg, head), head.nms_iou)
            t3 = clock()
            if i == 0:
                trace, n_in, n_det = run_trace, vox.n_active, len(dets)
            if i >= warmup:
                bb_ms.append((t2 - t1) * 1e3)
                e2e_ms.append((t3 - t0) * 1e3)
        report.results[rep] = RepresentationReport(
            param_count=count_params(weights)[1],
            input_voxels=n_in,
            backbone_ms=bb_ms,
            end_to_end_ms=e2e_ms,
            peak_active_sites=trace.peak_active_sites,
            peak_feature_bytes=trace.peak_feature_bytes,
            detections=n_det,
        )
    return report
