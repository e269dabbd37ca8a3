"""Command-line surface: train, eval, visualize, preview-shuffle, gen-synth.

Exit codes: 0 success, 1 usage/config error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np
from PIL import Image

from . import data as data_mod
from .config import ConfigError, RunConfig
from .data import DatasetError, SyntheticSpec, generate_synthetic, load_manifest
from .model import load_checkpoint
from .patch_shuffle import ShuffleSpec, shuffle_image
from .training import TrainingError, evaluate, train
from .visualize import export_heatmaps

log = logging.getLogger(__name__)


class _Parser(argparse.ArgumentParser):
    # usage errors exit 1, not argparse's default 2
    def error(self, message):
        self.print_usage(sys.stderr)
        raise SystemExit(f"error: {message}") from None


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="gradattn", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model")
    p.add_argument("--config", help="JSON config file (defaults used if omitted)")
    p.add_argument("--data", help="dataset root (overrides config data_root)")
    p.add_argument("--out", help="output directory (overrides config out_dir)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument(
        "--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
        help="override any config field; value parsed as JSON",
    )

    p = sub.add_parser("eval", help="evaluate a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test", choices=["train", "test"])
    p.add_argument("--out", help="write the JSON report (with per-image logits) here")

    p = sub.add_parser("visualize", help="export attention heatmaps")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("images", nargs="+")

    p = sub.add_parser("preview-shuffle", help="shuffle one image and save it")
    p.add_argument("--input", required=True)
    p.add_argument("--grid", type=int, required=True)
    p.add_argument("--range", type=int, default=1, dest="k")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)

    p = sub.add_parser("gen-synth", help="generate the synthetic dataset")
    p.add_argument("--classes", type=int, default=4)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--motif", type=int, default=8)
    p.add_argument("--train", type=int, default=100, dest="train_per_class")
    p.add_argument("--test", type=int, default=50, dest="test_per_class")
    p.add_argument("--noise", type=float, default=0.05)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--out", required=True)
    return parser


def _resolve_config(args) -> RunConfig:
    cfg = RunConfig.from_json(args.config) if args.config else RunConfig()
    cfg = cfg.apply_overrides(args.overrides)
    if args.data is not None:
        cfg.data_root = args.data
    if args.out is not None:
        cfg.out_dir = args.out
    if args.epochs is not None:
        cfg.epochs = args.epochs
    if args.seed is not None:
        cfg.seed = args.seed
    if cfg.data_root is None:
        raise ConfigError("no dataset: set data_root in the config or pass --data")
    if not Path(cfg.data_root).is_dir():
        raise ConfigError(f"dataset root does not exist: {cfg.data_root}")
    return cfg


def cmd_train(args) -> int:
    cfg = _resolve_config(args)
    manifest = load_manifest(cfg.data_root, resize_to=cfg.resize_size, crop_to=cfg.input_size)
    out_dir = Path(cfg.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    cfg.save(out_dir / "config.json")
    result = train(manifest, cfg, out_dir)
    print(f"best combined accuracy {result.best_accuracy:.4f} at epoch {result.best_epoch}")
    print(f"artifacts in {out_dir}")
    return 0


def cmd_eval(args) -> int:
    model, meta = load_checkpoint(args.checkpoint)
    cfg = RunConfig.from_dict(meta["config"])
    manifest = load_manifest(args.data, resize_to=cfg.resize_size, crop_to=cfg.input_size)
    if manifest.num_classes != cfg.num_classes:
        raise ConfigError(
            f"checkpoint expects {cfg.num_classes} classes, dataset has {manifest.num_classes}"
        )
    report = evaluate(model, manifest, cfg, split=args.split, collect_logits=True)
    for head in ("s3", "s4", "s5", "concat", "combined"):
        print(f"acc_{head}: {report[f'acc_{head}']:.4f}")
    if args.out:
        payload = dict(report)
        payload["checkpoint"] = str(args.checkpoint)
        payload["weights_sha256"] = meta["weights_sha256"]
        payload["config"] = cfg.to_dict()
        Path(args.out).write_text(json.dumps(payload, indent=2) + "\n")
    return 0


def cmd_visualize(args) -> int:
    model, _meta = load_checkpoint(args.checkpoint)
    artifacts, skipped = export_heatmaps(model, args.images, args.out)
    print(f"wrote heatmaps for {len(artifacts)} images to {args.out}")
    if skipped:
        print(f"skipped {skipped} unreadable images", file=sys.stderr)
    return 0


def cmd_preview_shuffle(args) -> int:
    img = data_mod.load_image(args.input)
    spec = ShuffleSpec(args.grid, args.k)
    shuffled, pair = shuffle_image(img, spec, np.random.default_rng(args.seed))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(shuffled).save(out)
    sidecar = {"grid": args.grid, "range": args.k, "seed": args.seed, **pair.to_json()}
    out.with_suffix(out.suffix + ".json").write_text(json.dumps(sidecar, indent=2) + "\n")
    print(f"wrote {out}")
    return 0


def cmd_gen_synth(args) -> int:
    spec = SyntheticSpec(
        num_classes=args.classes,
        image_size=args.size,
        motif_size=args.motif,
        train_per_class=args.train_per_class,
        test_per_class=args.test_per_class,
        noise=args.noise,
        seed=args.seed,
    )
    manifest = generate_synthetic(spec, args.out)
    print(
        f"wrote {len(manifest.train)} train / {len(manifest.test)} test images "
        f"for {manifest.num_classes} classes to {args.out}"
    )
    return 0


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "visualize": cmd_visualize,
    "preview-shuffle": cmd_preview_shuffle,
    "gen-synth": cmd_gen_synth,
}


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        if isinstance(e.code, str):
            print(e.code, file=sys.stderr)
            return 1
        return 0 if e.code in (0, None) else 1
    try:
        return COMMANDS[args.command](args)
    except (ConfigError, DatasetError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except FileNotFoundError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except (TrainingError, OSError, RuntimeError) as e:
        print(f"runtime failure: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
