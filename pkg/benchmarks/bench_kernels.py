"""Compiled vs pure-Python kernel timings.

Runs rulebook construction, a submanifold conv, a strided conv and the
slice collapse on the voxels of a synthetic scene under each available
backend, checks that the outputs agree bit for bit, and prints a table.

    python3 benchmarks/bench_kernels.py [--ground-points N] [--repeat R] [--json]
"""

from __future__ import annotations

import argparse
import json
import statistics
import sys
import time

import numpy as np

from pointslice import kernels
from pointslice.check import random_layer
from pointslice.scene import SceneSpec, gen_scene
from pointslice.slicing import collapse_slices, slice_tensor
from pointslice.spconv import STRIDED, build_rulebook_strided, build_rulebook_subm, conv_forward
from pointslice.voxelize import voxelize


def _time(fn, repeat):
    out = fn()
    samples = []
    for _ in range(repeat):
        t0 = time.perf_counter()
        fn()
        samples.append((time.perf_counter() - t0) * 1e3)
    return statistics.median(samples), out


def _cases(ground_points, channels):
    rng = np.random.default_rng(0)
    spec = SceneSpec(ground_points=ground_points)
    vox = voxelize([gen_scene(spec)], spec.grid)
    feats = rng.standard_normal((vox.n_active, channels)).astype(np.float32)
    vox = vox.replace_features(feats)
    sl = slice_tensor(vox)
    subm = random_layer(rng, (3, 3), channels, channels, name="subm")
    down = random_layer(rng, (3, 3, 3), channels, 2 * channels, STRIDED, (2, 2, 2), name="down")
    return vox, {
        "subm rulebook 2D": lambda: _arrays(build_rulebook_subm(sl, (3, 3))),
        "strided rulebook 3D": lambda: _arrays(build_rulebook_strided(vox, (3, 3, 3), (2, 2, 2))),
        "subm conv 2D": lambda: conv_forward(sl, subm).features,
        "strided conv 3D": lambda: conv_forward(vox, down).features,
        "collapse slices": lambda: collapse_slices(sl).features,
    }


def _arrays(rb):
    return rb.in_rows, rb.out_rows, rb.offset_ptr, rb.output_coords


def _same(a, b):
    if isinstance(a, tuple):
        return all(np.array_equal(x, y) for x, y in zip(a, b))
    return np.array_equal(a, b)


def main(argv=None):
    p = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    p.add_argument("--ground-points", type=int, default=20000)
    p.add_argument("--channels", type=int, default=16)
    p.add_argument("--repeat", type=int, default=3)
    p.add_argument("--json", action="store_true")
    args = p.parse_args(argv)

    vox, cases = _cases(args.ground_points, args.channels)
    backends = kernels.available_backends()
    results = {}
    for name, fn in cases.items():
        row, outs = {}, {}
        for b in backends:
            with kernels.use_backend(b):
                row[b], outs[b] = _time(fn, args.repeat)
        row["agree"] = all(_same(outs[backends[0]], outs[b]) for b in backends[1:])
        results[name] = row

    if args.json:
        print(json.dumps({"active_voxels": vox.n_active, "results": results}, indent=2))
        return 0
    print(f"{vox.n_active} active voxels, median of {args.repeat} runs (ms)")
    head = f"{'kernel':<22}" + "".join(f"{b:>12}" for b in backends)
    if "compiled" in backends:
        head += f"{'speedup':>10}"
    print(head + f"{'agree':>8}")
    for name, row in results.items():
        line = f"{name:<22}" + "".join(f"{row[b]:>12.1f}" for b in backends)
        if "compiled" in backends:
            line += f"{row['python'] / row['compiled']:>9.1f}x"
        print(line + f"{str(row['agree']):>8}")
    return 0 if all(r["agree"] for r in results.values()) else 1


if __name__ == "__main__":
    sys.exit(main())
