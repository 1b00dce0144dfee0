"""``pointslice`` command line.

Exit codes: 0 success, 1 a check failed, 2 usage, 3 file error,
4 format error (point or weight file), 5 configuration error.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import replace

from . import __version__
from .bench import run_bench
from .blocks import REPRESENTATIONS
from .check import run_checks
from .config import Config, build_config, load_config
from .errors import ChannelMismatch, ConfigError, IncompleteWeights, PointFileError, WeightFormatError
from .pipeline import Model, infer_jsonl
from .scene import gen_scene
from .spconv import workers
from .voxelize import read_xyzi, write_xyzi
from .weights import init_weights, load_weights, save_weights

EXIT_CHECK, EXIT_FILE, EXIT_FORMAT, EXIT_CONFIG = 1, 3, 4, 5


class CliError(Exception):
    def __init__(self, code: int, kind: str, msg: str):
        super().__init__(msg)
        self.code = code
        self.kind = kind


def _config(path) -> Config:
    if path is None:
        return build_config()
    try:
        return load_config(path)
    except OSError as exc:
        raise CliError(EXIT_FILE, "file", f"{path}: {exc.strerror or exc}") from None
    except ConfigError as exc:
        raise CliError(EXIT_CONFIG, "config", f"{path}: {exc}") from None


def cmd_gen(args) -> int:
    cfg = _config(args.config)
    scene = cfg.scene
    overrides = {k: v for k, v in (("seed", args.seed), ("n_objects", args.objects),
                                   ("ground_points", args.ground_points)) if v is not None}
    if overrides:
        try:
            scene = replace(scene, **overrides)
        except ConfigError as exc:
            raise CliError(EXIT_CONFIG, "config", str(exc)) from None
    cloud = gen_scene(scene)
    try:
        write_xyzi(args.out, cloud)
    except OSError as exc:
        raise CliError(EXIT_FILE, "file", f"{args.out}: {exc.strerror or exc}") from None
    print(f"wrote {len(cloud)} points to {args.out}", file=sys.stderr)
    return 0


def cmd_init(args) -> int:
    cfg = _config(args.config)
    rep = args.representation or cfg.representation
    weights = init_weights(cfg.backbone, cfg.head, args.seed, rep)
    try:
        save_weights(args.out, weights)
    except OSError as exc:
        raise CliError(EXIT_FILE, "file", f"{args.out}: {exc.strerror or exc}") from None
    return 0


def cmd_infer(args) -> int:
    cfg = _config(args.config)
    try:
        cloud = read_xyzi(args.cloud)
        weights = load_weights(args.weights)
    except OSError as exc:
        raise CliError(EXIT_FILE, "file", f"{exc.filename}: {exc.strerror or exc}") from None
    except (PointFileError, WeightFormatError) as exc:
        raise CliError(EXIT_FORMAT, "format", str(exc)) from None
    try:
        model = Model.from_config(weights, cfg)
    except (IncompleteWeights, ChannelMismatch, ConfigError) as exc:
        raise CliError(EXIT_CONFIG, "config", f"weights do not match the configuration: {exc}") from None
    sys.stdout.write(infer_jsonl([cloud], model))
    return 0


def cmd_bench(args) -> int:
    cfg = _config(args.config)
    reps = [r.strip() for r in args.representations.split(",") if r.strip()]
    try:
        report = run_bench(cfg.scene, cfg.backbone, cfg.head, repetitions=args.repetitions,
                           warmup=args.warmup, seed=args.seed, representations=reps)
    except ConfigError as exc:
        raise CliError(EXIT_CONFIG, "config", str(exc)) from None
    print(report.to_json())
    return 0


def cmd_check(args) -> int:
    return 0 if run_checks(args.cases, args.seed) else EXIT_CHECK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pointslice", description="Slice-based sparse point-cloud detector.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--workers", type=int, default=None,
                   help="threads for sparse convolutions (default: $POINTSLICE_WORKERS or 1)")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="write a synthetic scene as .xyzi")
    g.add_argument("out")
    g.add_argument("--config")
    g.add_argument("--seed", type=int)
    g.add_argument("--objects", type=int)
    g.add_argument("--ground-points", type=int)
    g.set_defaults(func=cmd_gen)

    i = sub.add_parser("init", help="write seeded random weights (PSW1)")
    i.add_argument("config")
    i.add_argument("out")
    i.add_argument("--seed", type=int, default=0)
    i.add_argument("--representation", choices=REPRESENTATIONS)
    i.set_defaults(func=cmd_init)

    f = sub.add_parser("infer", help="detections for one .xyzi cloud as JSONL on stdout")
    f.add_argument("cloud")
    f.add_argument("weights")
    f.add_argument("config")
    f.set_defaults(func=cmd_infer)

    b = sub.add_parser("bench", help="slice / pillar / voxel3d comparison as JSON on stdout")
    b.add_argument("--config")
    b.add_argument("--repetitions", type=int, default=3)
    b.add_argument("--warmup", type=int, default=1)
    b.add_argument("--seed", type=int, default=0, help="weight seed")
    b.add_argument("--representations", default=",".join(REPRESENTATIONS))
    b.set_defaults(func=cmd_bench)

    c = sub.add_parser("check", help="oracle and property checks on small random cases")
    c.add_argument("--cases", type=int, default=10)
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_check)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    if args.workers is not None and args.workers < 1:
        print("pointslice: usage error: --workers must be >= 1", file=sys.stderr)
        return 2
    try:
        with workers(args.workers):
            return args.func(args)
    except CliError as exc:
        print(f"pointslice: {exc.kind} error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
