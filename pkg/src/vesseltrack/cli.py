"""Command line interface.

Subcommands: phantom (synthesize a tree and optional volume), dataset
(build training samples), track (run the tracker), eval (compare trees),
render (maximum intensity projection), forward (single-sample inference).

Numeric options resolve with precedence: explicit flag, then a key=value
config file given with --config, then the built-in default. Exit codes:
0 success, 2 usage, 3 data or format problems, 4 incompatible inputs.
"""

from __future__ import annotations

import argparse
import json
import sys

import numpy as np

from .errors import CompatibilityError, VesselTrackError
from .labeling import LabelingConfig, build_dataset, read_ads
from .metrics import evaluate_case, format_table, summarize
from .network import (
    binary_cross_entropy,
    combined_loss,
    forward_dbc,
    forward_stc,
    load_weights,
)
from .phantom import TreeSpec, apply_stenosis, generate_tree, rasterize
from .sphere import build_fibonacci_grid
from .tracker import NetworkPredictor, OraclePredictor, TrackerConfig, track
from .tree import read_actl, write_actl, write_xyzr
from .volume import mip_project, read_avol, write_avol, write_pgm


def _parse_vector(text: str, n: int, name: str) -> np.ndarray:
    parts = [p for p in text.replace(",", " ").split() if p]
    if len(parts) != n:
        raise ValueError(f"{name} needs {n} comma-separated numbers, got {text!r}")
    return np.array([float(p) for p in parts])


def _parse_seeds(args) -> np.ndarray:
    seeds = []
    if args.seeds:
        for chunk in args.seeds.split(";"):
            chunk = chunk.strip()
            if chunk:
                seeds.append(_parse_vector(chunk, 3, "seed"))
    if args.seeds_file:
        with open(args.seeds_file) as f:
            for line in f:
                line = line.split("#", 1)[0].strip()
                if line:
                    seeds.append(_parse_vector(line, 3, "seed"))
    if not seeds:
        raise ValueError("no seed points given; use --seeds or --seeds-file")
    return np.asarray(seeds)


def read_config_file(path: str) -> dict:
    """key=value pairs, one per line; '#' starts a comment."""
    values = {}
    with open(path) as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected key=value, got {raw.rstrip()!r}")
            key, _, value = line.partition("=")
            values[key.strip()] = value.strip()
    return values


def resolve_options(args, builtins: dict) -> dict:
    """Merge flag values, config-file values and built-in defaults.

    Flags not passed on the command line parse as None; config keys use the
    flag name with underscores. Unknown config keys are reported to stderr
    and skipped so one file can serve several subcommands.
    """
    config = read_config_file(args.config) if getattr(args, "config", None) else {}
    resolved = {}
    for key, default in builtins.items():
        explicit = getattr(args, key, None)
        if explicit is not None:
            resolved[key] = explicit
        elif key in config:
            kind = type(default)
            raw = config.pop(key)
            resolved[key] = kind(int(raw)) if kind is int else kind(raw)
        else:
            resolved[key] = default
    for key in config:
        if key not in builtins:
            print(f"warning: config key {key!r} not used by this command", file=sys.stderr)
    return resolved


PHANTOM_DEFAULTS = {
    "depth": 2,
    "taper": 0.75,
    "tortuosity": 0.3,
    "root_radius": 3.0,
    "seed": 0,
    "spacing": 0.5,
    "contrast": 1.0,
    "noise": 0.1,
    "blur": 0.4,
}


def cmd_phantom(args) -> int:
    opts = resolve_options(args, PHANTOM_DEFAULTS)
    spec_kwargs = {
        "depth": opts["depth"],
        "taper": opts["taper"],
        "tortuosity": opts["tortuosity"],
        "root_radius": opts["root_radius"],
        "rng_seed": opts["seed"],
    }
    if args.branch_angles:
        spec_kwargs["branch_angle_range"] = tuple(_parse_vector(args.branch_angles, 2, "--branch-angles"))
    if args.segment_lengths:
        spec_kwargs["segment_length_range"] = tuple(
            _parse_vector(args.segment_lengths, 2, "--segment-lengths")
        )
    tree = generate_tree(TreeSpec(**spec_kwargs))
    for stenosis in args.stenosis or []:
        fields = stenosis.split(":")
        if len(fields) != 3:
            raise ValueError(f"--stenosis wants INDEX:SEVERITY:EXTENT, got {stenosis!r}")
        tree = apply_stenosis(tree, int(fields[0]), float(fields[1]), float(fields[2]))
    write_actl(args.out, tree)
    n_segments = len(np.unique(tree.segment_ids))
    print(f"tree: {tree.n_points} points, {n_segments} segments -> {args.out}")
    if args.volume:
        volume = rasterize(
            tree,
            spacing=opts["spacing"],
            contrast=opts["contrast"],
            noise_sigma=opts["noise"],
            blur_sigma=opts["blur"],
            rng_seed=opts["seed"],
        )
        write_avol(args.volume, volume)
        print(f"volume: {'x'.join(str(d) for d in volume.dims)} voxels -> {args.volume}")
    return 0


DATASET_DEFAULTS = {
    "grid_size": 1000,
    "bifurcation_fraction": 0.2,
    "stops_per_endpoint": 10,
    "sphere_radius": 1.5,
    "seed": 0,
}


def cmd_dataset(args) -> int:
    opts = resolve_options(args, DATASET_DEFAULTS)
    if len(args.tree) != len(args.volume):
        raise ValueError("--tree and --volume must be given the same number of times")
    if args.case_id and len(args.case_id) != len(args.tree):
        raise ValueError("--case-id must be given once per case")
    cases = [(read_avol(v), read_actl(t)) for v, t in zip(args.volume, args.tree)]
    cfg = LabelingConfig(
        sphere_radius=opts["sphere_radius"],
        grid_size=opts["grid_size"],
        bifurcation_fraction=opts["bifurcation_fraction"],
        stops_per_endpoint=opts["stops_per_endpoint"],
        rng_seed=opts["seed"],
    )
    result = build_dataset(
        cases, cfg, args.directions, args.stops, case_ids=args.case_id or None
    )
    print(
        f"direction samples: {result['direction_samples']} "
        f"(bifurcation fraction {result['bifurcation_fraction']:.3f}) -> {args.directions}"
    )
    print(f"stop samples: {result['stop_samples']} -> {args.stops}")
    for warning in result["warnings"]:
        print(f"warning: {warning}", file=sys.stderr)
    return 0


TRACK_DEFAULTS = {
    "grid_size": 1000,
    "threads": 1,
    "step_length": 1.0,
    "entropy_max": 0.8,
    "stop_prob_max": 0.3,
    "stop_counter_max": 3,
    "revisit_factor": 0.5,
    "max_points": 20000,
    "smoothing_sigma": 7.0,
    "bifurcation_threshold": 0.5,
}


def cmd_track(args) -> int:
    opts = resolve_options(args, TRACK_DEFAULTS)
    seeds = _parse_seeds(args)
    grid = build_fibonacci_grid(opts["grid_size"])
    if args.oracle:
        predictor = OraclePredictor(read_actl(args.oracle), grid)
    else:
        if not (args.weights and args.stop_weights and args.volume):
            raise ValueError(
                "network tracking needs --volume, --weights and --stop-weights "
                "(or use --oracle)"
            )
        predictor = NetworkPredictor(
            read_avol(args.volume),
            grid,
            load_weights(args.weights),
            load_weights(args.stop_weights),
        )
    config = TrackerConfig(
        step_length=opts["step_length"],
        entropy_max=opts["entropy_max"],
        stop_prob_max=opts["stop_prob_max"],
        stop_counter_max=opts["stop_counter_max"],
        revisit_factor=opts["revisit_factor"],
        max_points=opts["max_points"],
        smoothing_sigma_deg=opts["smoothing_sigma"],
        bifurcation_threshold=opts["bifurcation_threshold"],
    )
    threads = 1 if args.deterministic else opts["threads"]
    result = track(
        predictor,
        seeds,
        grid,
        config=config,
        threads=threads,
        collect_diagnostics=args.diagnostics is not None,
    )
    write_actl(args.out, result.tree)
    if args.xyzr:
        write_xyzr(args.xyzr, result.tree.positions)
    if args.diagnostics:
        with open(args.diagnostics, "w") as f:
            for row in result.diagnostics:
                f.write(json.dumps(row, sort_keys=True) + "\n")
    n_segments = len(np.unique(result.tree.segment_ids))
    print(
        f"tracked: {result.tree.n_points} points, {n_segments} segments "
        f"({result.queries} queries) -> {args.out}"
    )
    return 0


def _sanitize(value):
    if isinstance(value, float) and not np.isfinite(value):
        return None
    return value


def cmd_eval(args) -> int:
    rows = []
    for ref_path, trk_path in args.pair:
        metrics = evaluate_case(read_actl(ref_path), read_actl(trk_path))
        metrics["case"] = trk_path
        rows.append(metrics)
    print(format_table(rows))
    if args.json:
        report = {
            "cases": [{k: _sanitize(v) for k, v in row.items()} for row in rows],
            "mean": {k: _sanitize(v) for k, v in summarize(rows).items()},
        }
        with open(args.json, "w") as f:
            json.dump(report, f, indent=2, sort_keys=True)
            f.write("\n")
    return 0


def cmd_render(args) -> int:
    volume = read_avol(args.volume)
    write_pgm(args.out, mip_project(volume, args.axis))
    print(f"projection along {args.axis} -> {args.out}")
    return 0


def cmd_forward(args) -> int:
    weights = load_weights(args.weights)
    ads = read_ads(args.dataset)
    if not 0 <= args.index < len(ads.flags):
        raise ValueError(f"--index {args.index} out of range for {len(ads.flags)} samples")
    if weights.arch.patch_size != ads.patch_size:
        raise CompatibilityError(
            f"weights expect patch size {weights.arch.patch_size}, "
            f"dataset has {ads.patch_size}"
        )
    pair = ads.patch_pair(args.index)
    out: dict = {"kind": ads.kind, "index": args.index}
    if ads.kind == "direction":
        if weights.arch.n_directions != ads.n_directions:
            raise CompatibilityError(
                f"weights expect {weights.arch.n_directions} directions, "
                f"dataset has {ads.n_directions}"
            )
        pred = forward_dbc(weights, pair)
        out["direction"] = [float(v) for v in pred.direction]
        out["bifurcation_prob"] = pred.bifurcation_prob
        if args.with_loss:
            label = ads.label(args.index)
            flag = bool(ads.flag(args.index))
            ce = combined_loss(pred, label, flag, lambda_b=0.0)
            bce = binary_cross_entropy(pred.bifurcation_prob, flag)
            out["ce"] = ce
            out["bce"] = bce
            out["loss"] = ce + args.lambda_b * bce
    else:
        prob = forward_stc(weights, pair)
        out["stop_prob"] = prob
        if args.with_loss:
            out["loss"] = binary_cross_entropy(prob, bool(ads.flag(args.index)))
    print(json.dumps(out, sort_keys=True))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vesseltrack", description="Coronary centerline tracking toolkit."
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="synthesize a vascular tree phantom")
    p.add_argument("--out", required=True, help="output centerline file (.actl)")
    p.add_argument("--volume", help="also rasterize to this volume file (.avol)")
    p.add_argument("--config", help="key=value defaults file")
    p.add_argument("--seed", type=int)
    p.add_argument("--depth", type=int)
    p.add_argument("--taper", type=float)
    p.add_argument("--tortuosity", type=float)
    p.add_argument("--root-radius", type=float, dest="root_radius")
    p.add_argument("--branch-angles", help="LO,HI degrees", dest="branch_angles")
    p.add_argument("--segment-lengths", help="LO,HI mm", dest="segment_lengths")
    p.add_argument(
        "--stenosis",
        action="append",
        help="INDEX:SEVERITY:EXTENT; may be repeated",
    )
    p.add_argument("--spacing", type=float, help="voxel spacing (mm)")
    p.add_argument("--contrast", type=float)
    p.add_argument("--noise", type=float)
    p.add_argument("--blur", type=float)
    p.set_defaults(func=cmd_phantom)

    p = sub.add_parser("dataset", help="build training samples from cases")
    p.add_argument("--tree", action="append", required=True, help="reference .actl; repeatable")
    p.add_argument("--volume", action="append", required=True, help="matching .avol; repeatable")
    p.add_argument("--case-id", action="append", dest="case_id")
    p.add_argument("--directions", required=True, help="output direction samples (.ads)")
    p.add_argument("--stops", required=True, help="output stop samples (.ads)")
    p.add_argument("--config", help="key=value defaults file")
    p.add_argument("--grid-size", type=int, dest="grid_size")
    p.add_argument("--bifurcation-fraction", type=float, dest="bifurcation_fraction")
    p.add_argument("--stops-per-endpoint", type=int, dest="stops_per_endpoint")
    p.add_argument("--sphere-radius", type=float, dest="sphere_radius")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_dataset)

    p = sub.add_parser("track", help="track centerlines through a volume")
    p.add_argument("--volume", help="input volume (.avol)")
    p.add_argument("--weights", help="direction model (.awt)")
    p.add_argument("--stop-weights", dest="stop_weights", help="stop model (.awt)")
    p.add_argument("--oracle", help="reference tree (.actl); replaces the networks")
    p.add_argument("--seeds", help="x,y,z[;x,y,z...]")
    p.add_argument("--seeds-file", dest="seeds_file", help="text file, one x y z per line")
    p.add_argument("--out", required=True, help="output tracked tree (.actl)")
    p.add_argument("--xyzr", help="also export plain x y z r rows")
    p.add_argument("--diagnostics", help="write per-point JSONL diagnostics here")
    p.add_argument("--config", help="key=value defaults file")
    p.add_argument("--grid-size", type=int, dest="grid_size")
    p.add_argument("--threads", type=int)
    p.add_argument("--deterministic", action="store_true", help="force single-threaded")
    p.add_argument("--step-length", type=float, dest="step_length")
    p.add_argument("--entropy-max", type=float, dest="entropy_max")
    p.add_argument("--stop-prob-max", type=float, dest="stop_prob_max")
    p.add_argument("--stop-counter-max", type=int, dest="stop_counter_max")
    p.add_argument("--revisit-factor", type=float, dest="revisit_factor")
    p.add_argument("--max-points", type=int, dest="max_points")
    p.add_argument("--smoothing-sigma", type=float, dest="smoothing_sigma")
    p.add_argument("--bifurcation-threshold", type=float, dest="bifurcation_threshold")
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("eval", help="score tracked trees against references")
    p.add_argument(
        "--pair",
        action="append",
        nargs=2,
        metavar=("REF", "TRACKED"),
        required=True,
        help="reference and tracked .actl; repeatable",
    )
    p.add_argument("--json", help="write a JSON report here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("render", help="maximum intensity projection to PGM")
    p.add_argument("--volume", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--axis", choices=("x", "y", "z"), default="z")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("forward", help="run one dataset sample through a model")
    p.add_argument("--weights", required=True, help="model weights (.awt)")
    p.add_argument("--dataset", required=True, help="sample file (.ads)")
    p.add_argument("--index", type=int, required=True)
    p.add_argument("--with-loss", action="store_true", dest="with_loss")
    p.add_argument("--lambda-b", type=float, default=5.0, dest="lambda_b")
    p.set_defaults(func=cmd_forward)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except CompatibilityError as e:
        print(f"error: {e}", file=sys.stderr)
        return 4
    except (VesselTrackError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 3
    except ValueError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
