"""Command-line entry point.

Subcommands: cluster, rasterize, train, eval, predict, saliency.  Every
run writes a manifest next to its outputs recording the resolved
configuration, input paths, seed, and SHA-256 checksums of the artifacts,
so a run can be reproduced and its outputs verified byte-for-byte.  (The
training log is the one artifact excluded from checksums: its records
include wall-clock timings.)

Configuration comes from an optional flat key = value file (see
``KNOWN_KEYS``); command-line flags override file values.

Exit codes:
    0  success
    1  unexpected error
    2  usage error (bad flags)
    3  missing input file
    4  input schema/format mismatch
    5  training diverged (non-finite loss)
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

from trajcast import checkpoint as ckpt
from trajcast import cluster as cluster_mod
from trajcast import saliency as saliency_mod
from trajcast import train as train_mod
from trajcast.ingest import (
    Example,
    SchemaError,
    clean_trips,
    make_example,
    parse_trips,
    read_examples,
    split,
)
from trajcast.model import ModelConfig, Network
from trajcast.raster import image_to_text, write_pgm
from trajcast.train import TrainConfig, TrainingDivergedError

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_USAGE = 2
EXIT_MISSING_INPUT = 3
EXIT_FORMAT = 4
EXIT_DIVERGED = 5

MODEL_KEYS = {
    "variant": str,
    "grid_m": int,
    "cell_m": float,
    "bounds": "floats",
    "conv_channels": "ints",
    "kernel_size": int,
    "pool_size": int,
    "dense_width": int,
    "embed_dim": int,
    "le_norm": str,
    "centers_path": str,
}
TRAIN_KEYS = {
    "epochs": int,
    "batch_size": int,
    "lr": float,
    "momentum": float,
    "seed": int,
    "checkpoint_interval": int,
    "grad_clip": float,
    "min_cut": float,
    "workers": int,
    "limit": int,
}
KNOWN_KEYS = {**MODEL_KEYS, **TRAIN_KEYS}


class CliFormatError(ValueError):
    pass


def parse_kv_file(path: str) -> dict[str, str]:
    """Parse a flat ``key = value`` config file; '#' starts a comment."""
    values: dict[str, str] = {}
    with open(path) as fh:
        for line_no, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise CliFormatError(f"{path}:{line_no}: expected 'key = value', got {raw!r}")
            key, value = (part.strip() for part in line.split("=", 1))
            if key not in KNOWN_KEYS:
                raise CliFormatError(f"{path}:{line_no}: unknown key {key!r}")
            values[key] = value
    return values


def _coerce(key: str, raw: str):
    kind = KNOWN_KEYS[key]
    if kind == "floats":
        return tuple(float(v) for v in raw.split(","))
    if kind == "ints":
        return tuple(int(v) for v in raw.split(","))
    return kind(raw)


def resolve_config(file_values: dict[str, str], overrides: dict) -> dict:
    """Merge config-file values with flag overrides (flags win)."""
    resolved = {k: _coerce(k, v) for k, v in file_values.items()}
    for key, value in overrides.items():
        if value is not None:
            resolved[key] = value
    return resolved


def model_config_from(resolved: dict) -> ModelConfig:
    kwargs = {k: v for k, v in resolved.items() if k in MODEL_KEYS}
    return ModelConfig(**kwargs)


def train_config_from(resolved: dict) -> TrainConfig:
    kwargs = {k: v for k, v in resolved.items() if k in TRAIN_KEYS}
    return TrainConfig(**kwargs)


def sha256_of(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            digest.update(block)
    return digest.hexdigest()


def write_manifest(
    manifest_path: Path,
    subcommand: str,
    resolved: dict,
    inputs: list[str],
    outputs: list[str],
    seed: int | None,
) -> None:
    manifest = {
        "subcommand": subcommand,
        "config": {k: list(v) if isinstance(v, tuple) else v for k, v in sorted(resolved.items())},
        "inputs": sorted(str(p) for p in inputs),
        "seed": seed,
        "outputs": [
            {"path": str(p), "sha256": sha256_of(str(p))} for p in sorted(outputs)
        ],
    }
    manifest_path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _load_clean_trips(path: str, limit: int | None = None):
    with open(path) as fh:
        report = parse_trips(fh, limit=limit)
    trips = clean_trips(report.trips)
    if report.errors:
        print(f"note: {len(report.errors)} malformed row(s) skipped", file=sys.stderr)
    if not trips:
        raise CliFormatError(f"{path}: no usable trips")
    return trips


def _pick_trip(trips, trip_id: str | None, index: int | None):
    if trip_id is not None:
        for trip in trips:
            if trip.trip_id == trip_id:
                return trip
        raise CliFormatError(f"no trip with id {trip_id!r}")
    idx = index if index is not None else 0
    if not 0 <= idx < len(trips):
        raise CliFormatError(f"trip index {idx} outside 0..{len(trips) - 1}")
    return trips[idx]


# --- subcommands ------------------------------------------------------------


def cmd_cluster(args) -> int:
    trips = _load_clean_trips(args.data, args.limit)
    destinations = [t.destination for t in trips]
    clusters = cluster_mod.mean_shift(
        destinations, bandwidth_m=args.bandwidth_m, max_iter=args.max_iter, tol_m=args.tol_m
    )
    cluster_mod.save_centers(args.out, clusters)
    print(f"{len(clusters)} centers from {clusters.source_count} destinations -> {args.out}")
    resolved = {"bandwidth_m": args.bandwidth_m, "max_iter": args.max_iter, "tol_m": args.tol_m}
    if args.limit is not None:
        resolved["limit"] = args.limit
    write_manifest(
        Path(args.out + ".manifest.json"), "cluster", resolved,
        inputs=[args.data], outputs=[args.out], seed=None,
    )
    return EXIT_OK


def _resolved_model_config(args) -> tuple[dict, ModelConfig]:
    file_values = parse_kv_file(args.config) if args.config else {}
    overrides = {key: getattr(args, key, None) for key in KNOWN_KEYS}
    resolved = resolve_config(file_values, overrides)
    return resolved, model_config_from(resolved)


def cmd_rasterize(args) -> int:
    resolved, config = _resolved_model_config(args)
    trips = _load_clean_trips(args.data)
    trip = _pick_trip(trips, args.trip_id, args.index)
    example = make_example(trip, cut=args.cut)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    if config.variant == "basic":
        from trajcast.geo import grid_from_bounds
        from trajcast.raster import rasterize_basic

        grid = grid_from_bounds(*config.bounds, config.grid_m, config.grid_m)
        image = rasterize_basic(example.prefix, grid)
        channel_names = ["global"]
    else:
        from trajcast.raster import stack_le

        bounds = config.bounds if config.le_norm == "global" else None
        image = stack_le(example.prefix, config.grid_m, config.cell_m, norm_bounds=bounds)
        channel_names = ["start_lat", "start_lon", "end_lat", "end_lon"]

    outputs = []
    for c, name in enumerate(channel_names):
        if args.format in ("text", "both"):
            text_path = out_dir / f"{trip.trip_id}_{name}.txt"
            text_path.write_text(image_to_text(image, channel=c))
            outputs.append(str(text_path))
        if args.format in ("pgm", "both"):
            pgm_path = out_dir / f"{trip.trip_id}_{name}.pgm"
            write_pgm(str(pgm_path), image, channel=c)
            outputs.append(str(pgm_path))
    print(f"rasterized trip {trip.trip_id} ({len(channel_names)} channel(s)) -> {out_dir}")
    resolved["cut"] = args.cut
    write_manifest(
        out_dir / "manifest.json", "rasterize", resolved,
        inputs=[args.data], outputs=outputs, seed=None,
    )
    return EXIT_OK


def cmd_train(args) -> int:
    resolved, config = _resolved_model_config(args)
    train_cfg = train_config_from(resolved)
    trips = _load_clean_trips(args.data, train_cfg.limit)
    centers = cluster_mod.load_centers(args.centers)
    network = Network(config, centers, seed=train_cfg.seed)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "train_log.jsonl"

    try:
        result = train_mod.train(
            network, trips, train_cfg,
            checkpoint_dir=str(out_dir), log_path=str(log_path),
        )
    except TrainingDivergedError as exc:
        (out_dir / "diverged.json").write_text(json.dumps(exc.dump(), indent=2) + "\n")
        raise
    tail = result.loss_curve[-min(20, len(result.loss_curve)) :]
    print(
        f"trained {config.variant} on {len(trips)} trips, "
        f"{train_cfg.epochs} epoch(s); last-batches mean loss "
        f"{sum(tail) / len(tail):.1f} m"
    )
    write_manifest(
        out_dir / "manifest.json", "train", resolved,
        inputs=[args.data, args.centers],
        outputs=result.checkpoint_paths,
        seed=train_cfg.seed,
    )
    return EXIT_OK


def _load_eval_examples(args) -> list[Example]:
    if args.examples:
        return read_examples(args.examples)
    trips = _load_clean_trips(args.data, args.limit)
    _, test_examples = split(trips, seed=args.seed, test_fraction=args.test_fraction)
    return test_examples


def cmd_eval(args) -> int:
    if not args.examples and not args.data:
        raise CliFormatError("eval needs --examples or --data")
    network = ckpt.load_model(args.checkpoint)
    examples = _load_eval_examples(args)
    report = train_mod.evaluate(network, examples)
    print(report.to_text(), end="")
    outputs = []
    if args.out:
        Path(args.out).write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
        outputs.append(args.out)
        inputs = [args.checkpoint] + ([args.examples] if args.examples else [args.data])
        resolved = {"test_fraction": args.test_fraction, "limit": args.limit}
        write_manifest(
            Path(args.out + ".manifest.json"), "eval", resolved,
            inputs=inputs, outputs=outputs, seed=args.seed,
        )
    return EXIT_OK


def cmd_predict(args) -> int:
    network = ckpt.load_model(args.checkpoint)
    trips = _load_clean_trips(args.data)
    trip = _pick_trip(trips, args.trip_id, args.index)
    example = make_example(trip, cut=args.cut)
    point = network.predict(example)
    print(f"{point.lon!r} {point.lat!r}")
    return EXIT_OK


def cmd_saliency(args) -> int:
    network = ckpt.load_model(args.checkpoint)
    trips = _load_clean_trips(args.data)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = []

    if args.sample:
        histogram = saliency_mod.portion_statistics(
            network, trips[: args.sample], layer=args.layer
        )
        portions_path = out_dir / "portions.json"
        portions_path.write_text(json.dumps(histogram.to_dict(), indent=2) + "\n")
        outputs.append(str(portions_path))
        shares = " ".join(f"{s:.3f}" for s in histogram.shares)
        print(f"decile gradient shares over {histogram.trips_used} trips: {shares}")
    else:
        from trajcast.raster import TrajectoryImage, rasterize_basic

        trip = _pick_trip(trips, args.trip_id, args.index)
        image = rasterize_basic(trip.points, network.basic_grid)
        layer = args.layer or len(network.features.layers)
        smap = saliency_mod.feature_input_gradient(network, image.pixels, layer, "argmax")
        heat = TrajectoryImage(
            grid=network.basic_grid, pixels=smap.magnitude()[None, :, :]
        )
        text_path = out_dir / f"{trip.trip_id}_saliency_l{layer}.txt"
        pgm_path = out_dir / f"{trip.trip_id}_saliency_l{layer}.pgm"
        text_path.write_text(image_to_text(heat))
        write_pgm(str(pgm_path), heat)
        outputs.extend([str(text_path), str(pgm_path)])
        print(
            f"saliency of layer {layer} feature "
            f"(channel {smap.channel}, row {smap.row}, col {smap.col}) -> {out_dir}"
        )
    write_manifest(
        out_dir / "manifest.json", "saliency",
        {"layer": args.layer, "sample": args.sample},
        inputs=[args.checkpoint, args.data], outputs=outputs, seed=None,
    )
    return EXIT_OK


# --- argument wiring --------------------------------------------------------


def _add_model_flags(sub: argparse.ArgumentParser) -> None:
    sub.add_argument("--config", help="flat key = value config file")
    sub.add_argument("--variant", choices=("basic", "local_enhancement"))
    sub.add_argument("--grid-m", dest="grid_m", type=int)
    sub.add_argument("--cell-m", dest="cell_m", type=float)
    sub.add_argument("--kernel-size", dest="kernel_size", type=int)
    sub.add_argument("--pool-size", dest="pool_size", type=int)
    sub.add_argument("--dense-width", dest="dense_width", type=int)
    sub.add_argument("--embed-dim", dest="embed_dim", type=int)
    sub.add_argument("--le-norm", dest="le_norm", choices=("global", "window"))


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="trajcast",
        description="Taxi destination prediction from rasterized trajectories.",
        epilog="exit codes: 0 ok, 2 usage, 3 missing input, 4 bad format, 5 diverged, 1 other",
    )
    commands = parser.add_subparsers(dest="command", required=True)

    p = commands.add_parser("cluster", help="mean-shift training destinations into centers")
    p.add_argument("--data", required=True, help="trip CSV")
    p.add_argument("--out", required=True, help="output centers file (lon lat per line)")
    p.add_argument("--bandwidth-m", dest="bandwidth_m", type=float, default=500.0)
    p.add_argument("--max-iter", dest="max_iter", type=int, default=300)
    p.add_argument("--tol-m", dest="tol_m", type=float, default=0.1)
    p.add_argument("--limit", type=int)
    p.set_defaults(func=cmd_cluster)

    p = commands.add_parser("rasterize", help="dump a trip's input images")
    p.add_argument("--data", required=True)
    p.add_argument("--out-dir", dest="out_dir", required=True)
    p.add_argument("--trip-id", dest="trip_id")
    p.add_argument("--index", type=int)
    p.add_argument("--cut", type=float, default=1.0)
    p.add_argument("--format", choices=("text", "pgm", "both"), default="both")
    _add_model_flags(p)
    p.set_defaults(func=cmd_rasterize)

    p = commands.add_parser("train", help="train a model")
    p.add_argument("--data", required=True)
    p.add_argument("--centers", required=True, help="centers file from `cluster`")
    p.add_argument("--out-dir", dest="out_dir", required=True)
    _add_model_flags(p)
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", dest="batch_size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--momentum", type=float)
    p.add_argument("--seed", type=int)
    p.add_argument("--checkpoint-interval", dest="checkpoint_interval", type=int)
    p.add_argument("--grad-clip", dest="grad_clip", type=float)
    p.add_argument("--min-cut", dest="min_cut", type=float)
    p.add_argument("--workers", type=int)
    p.add_argument("--limit", type=int)
    p.set_defaults(func=cmd_train)

    p = commands.add_parser("eval", help="evaluate a checkpoint on held-out trips")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="trip CSV to split")
    p.add_argument("--examples", help="canonical example JSONL (overrides --data)")
    p.add_argument("--out", help="write the JSON report here")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--test-fraction", dest="test_fraction", type=float, default=0.2)
    p.add_argument("--limit", type=int)
    p.set_defaults(func=cmd_eval)

    p = commands.add_parser("predict", help="predict one trip's destination")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--trip-id", dest="trip_id")
    p.add_argument("--index", type=int)
    p.add_argument("--cut", type=float, default=1.0)
    p.set_defaults(func=cmd_predict)

    p = commands.add_parser("saliency", help="input-gradient heatmaps and portion stats")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--trip-id", dest="trip_id")
    p.add_argument("--index", type=int)
    p.add_argument("--sample", type=int, help="aggregate over the first N trips instead")
    p.add_argument("--layer", type=int)
    p.add_argument("--out-dir", dest="out_dir", required=True)
    p.set_defaults(func=cmd_saliency)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except FileNotFoundError as exc:
        print(f"error: missing input: {exc}", file=sys.stderr)
        return EXIT_MISSING_INPUT
    except TrainingDivergedError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except (SchemaError, CliFormatError, ckpt.CheckpointError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_FORMAT
    except Exception as exc:  # pragma: no cover - last resort
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    raise SystemExit(main())
