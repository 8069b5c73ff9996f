"""Command-line entry points.

Subcommands: snap, lookup, eval, gen-synthetic, render-debug. All knobs live
in a TOML config (--config); a few common ones are overridable by flags.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import load_config
from .errors import ConfigError, DomainError, FormatError, ProtocolError, TransportError
from .metrics import summary_table
from .pipeline import run_eval, run_lookup, run_render_debug, run_snap
from .synthetic import generate_scene, write_scene


def _read_vocab(value: str) -> list[str]:
    """--vocab takes a file of one query per line, or a comma-separated list."""
    p = Path(value)
    if p.is_file():
        with open(p, "r", encoding="utf-8") as fh:
            return [line.strip() for line in fh if line.strip()]
    return [w.strip() for w in value.split(",") if w.strip()]


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="snaplabel",
                                     description="Label 3D instance masks from rendered views")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("snap", help="render calibrated scene views to disk")
    p.add_argument("--config")
    p.add_argument("--scene", required=True)
    p.add_argument("--masks")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)

    p = sub.add_parser("lookup", help="label a mask set via a 2D detector")
    p.add_argument("--config")
    p.add_argument("--scene", required=True)
    p.add_argument("--masks", required=True)
    p.add_argument("--provider", choices=["oracle", "file", "http"])
    p.add_argument("--endpoint")
    p.add_argument("--vocab")
    p.add_argument("--views-dir", help="posed external views instead of in-process rendering")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)

    p = sub.add_parser("eval", help="score labeled instances against ground truth")
    p.add_argument("--config")
    p.add_argument("--predictions")
    p.add_argument("--gt-masks")
    p.add_argument("--gt-labels")
    p.add_argument("--scene")
    p.add_argument("--out", required=True)

    p = sub.add_parser("gen-synthetic", help="generate a synthetic labeled room scene")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n-objects", type=int, default=10)
    p.add_argument("--noise", type=float, default=0.005)
    p.add_argument("--out", required=True)

    p = sub.add_parser("render-debug", help="export mask ownership images and occlusion CSV")
    p.add_argument("--config")
    p.add_argument("--scene", required=True)
    p.add_argument("--masks", required=True)
    p.add_argument("--out", required=True)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _dispatch(args)
    except (ConfigError, DomainError, FormatError, ProtocolError, TransportError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


def _dispatch(args) -> int:
    if args.command == "gen-synthetic":
        scene = generate_scene(args.seed, n_objects=args.n_objects, noise=args.noise)
        paths = write_scene(scene, args.out)
        print(json.dumps(paths, indent=1))
        return 0

    config = load_config(getattr(args, "config", None))
    if getattr(args, "seed", None) is not None:
        config.runtime.seed = args.seed

    if args.command == "snap":
        views = run_snap(config, args.scene, args.out, masks_path=args.masks)
        print(f"wrote {len(views)} views to {args.out}")
        return 0

    if args.command == "lookup":
        vocabulary = _read_vocab(args.vocab) if args.vocab else None
        if args.views_dir:
            config.posed.images_dir = args.views_dir
        labeled, report = run_lookup(
            config, args.scene, args.masks, out_path=args.out,
            vocabulary=vocabulary, provider_override=args.provider,
            endpoint=args.endpoint)
        print(json.dumps(report.to_dict(), indent=1))
        print(f"wrote {len(labeled)} labeled instances to {args.out}")
        return 0

    if args.command == "eval":
        result, box_result, recog = run_eval(
            config, predictions_path=args.predictions, gt_masks_path=args.gt_masks,
            gt_labels_path=args.gt_labels, scene_path=args.scene, out_path=args.out)
        print(summary_table(result))
        if box_result is not None:
            print("\naxis-aligned box detection:")
            print(summary_table(box_result, metrics=("AP25",)))
        if recog is not None:
            print(f"\ntop-1 recognition mean: {recog.means['top1']:.4f}")
        return 0

    if args.command == "render-debug":
        out = run_render_debug(config, args.scene, args.masks, args.out)
        print(f"wrote debug exports to {out}")
        return 0

    raise ConfigError(f"unknown command {args.command!r}")


if __name__ == "__main__":
    sys.exit(main())
