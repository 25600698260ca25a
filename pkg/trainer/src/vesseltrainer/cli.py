"""Command line for training vesseltrack-compatible weight files."""

from __future__ import annotations

import argparse
import json
import sys

from .formats import read_container
from .training import TrainConfig, train


def _add_train_flags(parser, variant):
    parser.add_argument("--dataset", required=True, help="training samples (.ads)")
    parser.add_argument("--out", required=True, help="output weights (.awt)")
    parser.add_argument("--epochs", type=int, default=10)
    parser.add_argument("--batch-size", type=int, default=64)
    parser.add_argument("--lr", type=float, default=1e-4)
    parser.add_argument("--channels", type=int, default=32)
    parser.add_argument("--hidden", type=int, default=64)
    parser.add_argument("--positive-fraction", type=float, default=None,
                        help="flagged fraction per batch (default: 0.2 for "
                             "train-dbc, 0.5 for train-stc)")
    parser.add_argument("--val-fraction", type=float, default=0.1)
    parser.add_argument("--patience", type=int, default=3)
    parser.add_argument("--crop-size", type=int, default=None,
                        help="train on the central cube of this odd size "
                             "instead of the full stored patch")
    parser.add_argument("--lr-decay-every", type=int, default=None,
                        help="multiply the learning rate by --lr-decay-factor "
                             "every N epochs")
    parser.add_argument("--lr-decay-factor", type=float, default=0.3)
    parser.add_argument("--seed", type=int, default=0)
    parser.add_argument("--threads", type=int, default=1)
    parser.add_argument("--log", help="write per-epoch CSV curves here")
    if variant == "dbc":
        parser.add_argument("--lambda-b", type=float, default=5.0,
                            help="bifurcation loss weight")
        parser.add_argument("--label-sigma", type=float, default=8.0,
                            help="geodesic label smoothing in degrees "
                                 "(0 trains on the raw exit labels)")
    else:
        parser.add_argument("--n-directions", type=int, default=1000,
                            help="direction-head width; must match the "
                                 "tracking grid")


def _config_from(args, variant) -> TrainConfig:
    fraction = args.positive_fraction
    if fraction is None:
        fraction = 0.2 if variant == "dbc" else 0.5
    elif fraction <= 0.0:
        fraction = None
    return TrainConfig(
        batch_size=args.batch_size,
        learning_rate=args.lr,
        lambda_b=getattr(args, "lambda_b", 5.0),
        epochs=args.epochs,
        positive_fraction=fraction,
        val_fraction=args.val_fraction,
        patience=args.patience,
        channels=args.channels,
        hidden=args.hidden,
        n_directions=getattr(args, "n_directions", None),
        crop_size=args.crop_size,
        label_sigma_deg=getattr(args, "label_sigma", 0.0),
        lr_decay_every=args.lr_decay_every,
        lr_decay_factor=args.lr_decay_factor,
        rng_seed=args.seed,
        threads=args.threads,
        log_path=args.log,
    )


def _run_train(args, variant) -> int:
    config = _config_from(args, variant)

    def progress(row):
        val = "" if row["val_loss"] != row["val_loss"] else (
            f"  val {row['val_loss']:.4f}  acc {row['val_acc']:.3f}")
        print(f"epoch {row['epoch']:3d}  train {row['train_loss']:.4f}{val}"
              f"  ({row['seconds']:.1f}s)")

    history = train(args.dataset, args.out, variant, config, progress=progress)
    print(f"{len(history)} epochs -> {args.out}")
    return 0


def cmd_inspect(args) -> int:
    manifest, offset = read_container(args.path)
    summary = {k: v for k, v in manifest.items() if k not in ("flags", "case_ids",
                                                              "tensors")}
    if "tensors" in manifest:
        summary["n_tensors"] = len(manifest["tensors"])
    if "flags" in manifest:
        flags = manifest["flags"]
        summary["flagged"] = sum(1 for f in flags if f)
    summary["payload_offset"] = offset
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="vesseltrainer", description="Train vesseltrack weight files."
    )
    sub = parser.add_subparsers(dest="command", required=True)
    dbc = sub.add_parser("train-dbc", help="train a direction/bifurcation model")
    _add_train_flags(dbc, "dbc")
    stc = sub.add_parser("train-stc", help="train a stop model")
    _add_train_flags(stc, "stc")
    inspect = sub.add_parser("inspect", help="print an ADS/AWT manifest summary")
    inspect.add_argument("path")
    args = parser.parse_args(argv)

    try:
        if args.command == "train-dbc":
            return _run_train(args, "dbc")
        if args.command == "train-stc":
            return _run_train(args, "stc")
        return cmd_inspect(args)
    except (ValueError, OSError) as error:
        print(f"error: {error}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
