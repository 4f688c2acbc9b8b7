"""Command-line entry point.

Exit codes: 0 success, 1 usage error, 2 bad or missing data (meshes,
caches, checkpoints, exports, config), 3 numerical failure (eigensolver,
linear solve, non-finite values during training).

Environment: ``CYCLEMAP_THREADS`` caps the BLAS thread pool for the whole
command (set it to 1 for bit-reproducible runs), ``CYCLEMAP_SEED``
overrides the training seed from config files and flags.
"""

import argparse
import os
import sys
from dataclasses import fields

from threadpoolctl import threadpool_limits

from . import pipeline
from .errors import (
    CacheError,
    CheckpointError,
    ConfigError,
    DecimationError,
    EigenSolveError,
    ExportError,
    InvalidMeshError,
    MeshLoadError,
    NonFiniteError,
    SolveError,
)
from .trainer import TrainConfig

DATA_ERRORS = (MeshLoadError, InvalidMeshError, DecimationError, CacheError,
               CheckpointError, ExportError, ConfigError, OSError)
NUMERICAL_ERRORS = (EigenSolveError, SolveError, NonFiniteError)


class _Parser(argparse.ArgumentParser):
    """argparse exits 2 on usage errors; this CLI reserves 2 for data."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _coerce_field(name: str, raw: str):
    """Parse a config value string by the declared type of the field."""
    spec = {f.name: (f.type if isinstance(f.type, str) else f.type.__name__)
            for f in fields(TrainConfig)}
    if name not in spec:
        raise ConfigError(f"unknown config key {name!r}")
    kind = spec[name]
    try:
        if kind == "bool":
            if raw not in ("true", "false"):
                raise ValueError
            return raw == "true"
        if kind == "int":
            return int(raw)
        return float(raw)
    except ValueError:
        raise ConfigError(f"config key {name!r} expects {kind}, "
                          f"got {raw!r}") from None


def _read_config_file(path) -> dict:
    """key=value lines; blank lines and # comments ignored."""
    out = {}
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc}") from exc
    for lineno, line in enumerate(lines, start=1):
        text = line.strip()
        if not text or text.startswith("#"):
            continue
        key, sep, value = text.partition("=")
        if not sep:
            raise ConfigError(f"{path}:{lineno}: expected key=value, "
                              f"got {text!r}")
        out[key.strip()] = _coerce_field(key.strip(), value.strip())
    return out


# TrainConfig fields settable from the command line. Geometry fields
# (k, scales, width) are read from the caches instead.
_TRAIN_FLAGS = ("blocks", "reg", "batch_size", "epochs", "coupling_epochs",
                "learning_rate", "beta1", "beta2", "epsilon", "clip_norm",
                "weight_cyclic", "weight_isometric", "weight_supervised",
                "weight_coupling", "loss_samples", "seed")


def _train_overrides(args) -> dict:
    overrides = {}
    if args.config is not None:
        overrides.update(_read_config_file(args.config))
    for name in _TRAIN_FLAGS:
        value = getattr(args, name)
        if value is not None:
            overrides[name] = value
    env_seed = os.environ.get("CYCLEMAP_SEED")
    if env_seed:
        try:
            overrides["seed"] = int(env_seed)
        except ValueError:
            raise ConfigError(f"CYCLEMAP_SEED must be an integer, "
                              f"got {env_seed!r}") from None
    return overrides


def _thread_limit():
    raw = os.environ.get("CYCLEMAP_THREADS")
    if not raw:
        return None
    try:
        threads = int(raw)
    except ValueError:
        raise ConfigError(f"CYCLEMAP_THREADS must be an integer, "
                          f"got {raw!r}") from None
    if threads < 1:
        raise ConfigError(f"CYCLEMAP_THREADS must be >= 1, got {threads}")
    return threads


def _run_preprocess(args):
    options = {"target_n": args.target_n, "k": args.k,
               "scales": args.scales, "lo": args.lo, "hi": args.hi,
               "bins": args.bins, "width": args.width,
               "radius_fraction": args.radius_fraction,
               "dist_samples": args.dist_samples}
    return pipeline.cmd_preprocess(args.meshes, args.cache_dir, options)


def _run_train(args):
    return pipeline.cmd_train(args.caches, args.checkpoint,
                              log_path=args.log_csv,
                              one_shot=args.one_shot,
                              identity_labels=args.identity_labels,
                              resume_path=args.resume,
                              checkpoint_every=args.checkpoint_every,
                              overrides=_train_overrides(args))


def _run_infer(args):
    return pipeline.cmd_infer(args.checkpoint, args.source_cache,
                              args.target_cache, args.out_csv,
                              soft_path=args.emit_soft)


def _run_eval(args):
    if args.threshold_step <= 0:
        args.parser.error("--threshold-step must be positive")
    if args.max_threshold < 0:
        args.parser.error("--max-threshold must be nonnegative")
    return pipeline.cmd_eval(args.map_csv, args.gt_csv, args.target_cache,
                             args.out_dir, max_threshold=args.max_threshold,
                             threshold_step=args.threshold_step)


def _run_colorize(args):
    return pipeline.cmd_colorize(args.source_cache, args.target_cache,
                                 args.map_csv, args.out_source,
                                 args.out_target)


def _run_synth(args):
    return pipeline.cmd_synth(args.kind, args.out_dir,
                              subdivisions=args.subdivisions,
                              bump_amplitude=args.bump_amplitude,
                              bend_radius=args.bend_radius,
                              stretch=args.stretch, seed=args.seed,
                              nx=args.nx, ny=args.ny, fmt=args.format)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cyclemap",
                     description="unsupervised dense correspondence "
                                 "between deformable triangle meshes")
    sub = parser.add_subparsers(dest="command", required=True,
                                parser_class=_Parser)

    p = sub.add_parser("preprocess",
                       help="cache spectral bases, descriptors and "
                            "geodesics for a folder of meshes")
    p.add_argument("meshes", help="mesh file or directory of "
                                  ".off/.obj/.ply files")
    p.add_argument("cache_dir", help="directory for .cysh caches")
    p.add_argument("--target-n", type=int,
                   default=pipeline.PREPROCESS_DEFAULTS["target_n"],
                   help="decimate to this many vertices (0 keeps all)")
    p.add_argument("--k", type=int,
                   default=pipeline.PREPROCESS_DEFAULTS["k"],
                   help="spectral basis size")
    p.add_argument("--scales", type=int,
                   default=pipeline.PREPROCESS_DEFAULTS["scales"],
                   help="descriptor scales")
    p.add_argument("--lo", type=float,
                   default=pipeline.PREPROCESS_DEFAULTS["lo"],
                   help="smallest scale factor")
    p.add_argument("--hi", type=float,
                   default=pipeline.PREPROCESS_DEFAULTS["hi"],
                   help="largest scale factor")
    p.add_argument("--bins", type=int,
                   default=pipeline.PREPROCESS_DEFAULTS["bins"],
                   help="histogram bins per descriptor axis")
    p.add_argument("--width", type=int,
                   default=pipeline.PREPROCESS_DEFAULTS["width"],
                   help="descriptor length per scale")
    p.add_argument("--radius-fraction", type=float,
                   default=pipeline.PREPROCESS_DEFAULTS["radius_fraction"],
                   help="descriptor support radius as a fraction of the "
                        "geodesic diameter")
    p.add_argument("--dist-samples", type=int,
                   default=pipeline.PREPROCESS_DEFAULTS["dist_samples"],
                   help="geodesic sample count (0 stores all pairs)")
    p.set_defaults(run=_run_preprocess)

    p = sub.add_parser("train", help="fit the refinement network on "
                                     "cached shapes")
    p.add_argument("caches", help=".cysh file or directory of caches")
    p.add_argument("checkpoint", help="output checkpoint path")
    p.add_argument("--log-csv", help="write per-step losses here")
    p.add_argument("--one-shot", action="store_true",
                   help="overfit a single pair (needs exactly two caches; "
                        "defaults to 200 coupling + 800 objective steps)")
    p.add_argument("--identity-labels", action="store_true",
                   help="supervise with the identity map (shapes must "
                        "share vertex count)")
    p.add_argument("--resume", help="continue from this checkpoint")
    p.add_argument("--checkpoint-every", type=int, default=1,
                   help="epochs between checkpoint writes")
    p.add_argument("--config", help="key=value file with TrainConfig "
                                    "fields; flags override it")
    for name in _TRAIN_FLAGS:
        flag = "--" + name.replace("_", "-")
        kind = int if name in ("blocks", "batch_size", "epochs",
                               "coupling_epochs", "loss_samples",
                               "seed") else float
        p.add_argument(flag, type=kind, default=None)
    p.set_defaults(run=_run_train)

    p = sub.add_parser("infer", help="map one cached shape onto another "
                                     "with a trained checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("source_cache")
    p.add_argument("target_cache")
    p.add_argument("out_csv", help="vertex map CSV output")
    p.add_argument("--emit-soft", metavar="PATH",
                   help="also write the dense soft-correspondence matrix")
    p.set_defaults(run=_run_infer)

    p = sub.add_parser("eval", help="score a vertex map against ground "
                                    "truth")
    p.add_argument("map_csv")
    p.add_argument("gt_csv")
    p.add_argument("target_cache")
    p.add_argument("out_dir", help="directory for errors.csv and curve.csv")
    p.add_argument("--max-threshold", type=float, default=0.25)
    p.add_argument("--threshold-step", type=float, default=0.0025)
    p.set_defaults(run=_run_eval, parser=p)

    p = sub.add_parser("colorize", help="export a matching-color PLY pair "
                                        "for visual inspection")
    p.add_argument("source_cache")
    p.add_argument("target_cache")
    p.add_argument("map_csv")
    p.add_argument("out_source", help="source PLY path")
    p.add_argument("out_target", help="target PLY path")
    p.set_defaults(run=_run_colorize)

    p = sub.add_parser("synth", help="generate a synthetic shape pair "
                                     "with ground truth")
    p.add_argument("kind", choices=("sphere", "grid"))
    p.add_argument("out_dir")
    p.add_argument("--subdivisions", type=int, default=3)
    p.add_argument("--bump-amplitude", type=float, default=0.15)
    p.add_argument("--bend-radius", type=float, default=None)
    p.add_argument("--stretch", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--nx", type=int, default=30)
    p.add_argument("--ny", type=int, default=30)
    p.add_argument("--format", default="ply", choices=("ply", "obj", "off"))
    p.set_defaults(run=_run_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    command = "cyclemap"
    try:
        args = parser.parse_args(argv)
        command = f"cyclemap {args.command}"
        with threadpool_limits(limits=_thread_limit()):
            return args.run(args)
    except SystemExit as exc:
        # argparse help (0) and usage errors (1, via _Parser.error)
        if exc.code is None:
            return 0
        return exc.code if isinstance(exc.code, int) else 1
    except NUMERICAL_ERRORS as exc:
        print(f"{command}: numerical failure: {exc}", file=sys.stderr)
        return 3
    except DATA_ERRORS as exc:
        print(f"{command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
