#!/usr/bin/env python3
from __future__ import annotations

import argparse
import json
import logging
import os
import subprocess
import sys
from pathlib import Path

from sketchseg import config
from sketchseg.core.errors import ConfigError, ContractError, DatasetLoadError, NumericError, SketchSegError
from sketchseg.models.domain import SegmentationMask
from sketchseg.models.schemas import SynthConfig

logger = logging.getLogger("sketchseg.cli")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERIC = 3


def run(cmd: list[str]) -> int:
    print("$", " ".join(cmd))
    return subprocess.call(cmd)


def cmd_test(args: argparse.Namespace) -> int:
    os.environ.setdefault("PYTHONUNBUFFERED", "1")
    pytest_args = [sys.executable, "-m", "pytest"]
    if args.quiet:
        pytest_args.append("-q")
    if args.k:
        pytest_args += ["-k", args.k]
    if args.slow:
        pytest_args += ["-m", ""]
    return run(pytest_args)


def cmd_synth(args: argparse.Namespace) -> int:
    from sketchseg.services.sketch_data import SPLIT_ROLES, generate_synthetic, save_dataset

    # Glyph sizes scale with the canvas; 14-22 px at 64 px.
    glyph_min = max(3, args.size * 14 // 64)
    synth = config.build_config(SynthConfig, {
        "image_size": args.size,
        "patch_size": args.patch,
        "glyph_min": glyph_min,
        "glyph_max": max(glyph_min, args.size * 22 // 64),
    })
    counts = {
        "train": args.n,
        "val": args.n // 4 if args.n_val is None else args.n_val,
        "test": args.n // 4 if args.n_test is None else args.n_test,
    }
    splits = {
        role: generate_synthetic(synth, args.seed * len(SPLIT_ROLES) + i, counts[role], role=role)
        for i, role in enumerate(SPLIT_ROLES)
    }
    save_dataset(splits, args.out)
    print(json.dumps({"out": str(args.out), "items": counts}, sort_keys=True))
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    from sketchseg.services.checkpoint import load_checkpoint
    from sketchseg.services.sketch_data import load_dataset
    from sketchseg.vision.model import SketchSegmenter
    from sketchseg.vision.pipeline import Trainer

    encoder, training = config.load_config_file(args.config) if args.config else (
        config.encoder_preset("desk"), config.training_preset("desk"))
    splits = load_dataset(args.data)
    if "train" not in splits or len(splits["train"]) == 0:
        raise DatasetLoadError(f"{args.data} has no training items")

    if args.resume:
        ckpt = load_checkpoint(args.resume)
        if args.config:
            if ckpt.encoder != encoder:
                raise ConfigError("encoder config differs from the checkpoint being resumed")
            ckpt.training = training
        model = ckpt.to_model()
    else:
        model = SketchSegmenter.initialize(encoder, training, vocabulary=splits["train"].vocabulary)

    trainer = Trainer(model, args.out, log_path=args.log, show_progress=not args.no_progress)
    run_info = trainer.fit(splits["train"], splits.get("val"))
    print(json.dumps({"out": str(args.out), "best_epoch": run_info.best_epoch,
                      "selected_by": run_info.selected_by, "step": run_info.step}, sort_keys=True))
    return EXIT_OK


def _parse_categories(text: str) -> list[str]:
    categories = [" ".join(c.split()).lower() for c in text.split(",")]
    categories = [c for c in categories if c]
    if not categories:
        raise ContractError("--categories must name at least one category")
    return categories


def cmd_segment(args: argparse.Namespace) -> int:
    import numpy as np

    from sketchseg.services import imaging
    from sketchseg.services.checkpoint import load_model
    from sketchseg.services.segmentation import compute_similarity_maps, isolate_from_map, isolation_mask, segment_from_maps

    categories = _parse_categories(args.categories)
    isolate = " ".join(args.isolate.split()).lower() if args.isolate else None
    if isolate is not None and isolate not in categories:
        raise ContractError(f"unknown category {args.isolate!r}; choose from {categories}")

    model = load_model(args.ckpt)
    sketch = imaging.read_sketch_png(args.sketch)
    maps = compute_similarity_maps(sketch, categories, model)
    mask = segment_from_maps(maps, sketch)

    out_dir = Path(args.out_dir) if args.out_dir else Path(args.sketch).parent
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = Path(args.sketch).stem
    imaging.write_mask_png(mask, out_dir / f"{stem}.mask.png")
    sidecar = {"categories": categories, "labels": {str(i): c for i, c in enumerate(categories, start=1)}}

    if isolate is None:
        overlay = imaging.render_overlay(sketch, mask)
    else:
        index = categories.index(isolate)
        keep = isolation_mask(maps.pixel_maps[index], sketch, args.tau)
        shown = SegmentationMask(np.where(keep, index + 1, 0), tuple(categories))
        overlay = imaging.render_overlay(sketch, shown)
        isolated = isolate_from_map(maps.pixel_maps[index], sketch, args.tau)
        imaging.write_sketch_png(isolated, out_dir / f"{stem}.{isolate.replace(' ', '_')}.png")
        sidecar.update({"isolate": isolate, "tau": args.tau, "kept_pixels": int(keep.sum())})
    imaging.write_overlay_png(overlay, out_dir / f"{stem}.overlay.png")
    (out_dir / f"{stem}.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    print(json.dumps({"mask": str(out_dir / f"{stem}.mask.png"), "overlay": str(out_dir / f"{stem}.overlay.png")}))
    return EXIT_OK


def cmd_eval(args: argparse.Namespace) -> int:
    from sketchseg.services.checkpoint import load_model
    from sketchseg.services.evaluation import evaluate_split
    from sketchseg.services.sketch_data import load_dataset

    model = load_model(args.ckpt)
    splits = load_dataset(args.data)
    if args.split not in splits:
        raise DatasetLoadError(f"{args.data} has no {args.split!r} split")
    report = evaluate_split(model, splits[args.split], per_item=args.per_item)
    text = report.model_dump_json(indent=2)
    if args.report:
        Path(args.report).parent.mkdir(parents=True, exist_ok=True)
        Path(args.report).write_text(text + "\n", encoding="utf-8")
    print(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sketchseg", description="Scene sketch segmentation toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p_synth = sub.add_parser("synth", help="Generate a synthetic glyph dataset")
    p_synth.add_argument("--out", required=True, help="Dataset root to write")
    p_synth.add_argument("--n", type=int, default=8, help="Training items")
    p_synth.add_argument("--n-val", type=int, default=None, help="Validation items (default n/4)")
    p_synth.add_argument("--n-test", type=int, default=None, help="Test items (default n/4)")
    p_synth.add_argument("--seed", type=int, default=config.DEFAULT_SEED)
    p_synth.add_argument("--size", type=int, default=64, help="Canvas side in pixels")
    p_synth.add_argument("--patch", type=int, default=8, help="Patch side the canvas must divide into")
    p_synth.set_defaults(func=cmd_synth)

    p_train = sub.add_parser("train", help="Fine-tune the encoder on a dataset")
    p_train.add_argument("--data", default=config.DATA_ROOT)
    p_train.add_argument("--config", help="key = value config file (default: desk preset)")
    p_train.add_argument("--out", required=True, help="Checkpoint to write")
    p_train.add_argument("--resume", help="Checkpoint to continue from")
    p_train.add_argument("--log", help="JSONL training log (default: next to --out)")
    p_train.add_argument("--no-progress", action="store_true", help="Hide progress bars")
    p_train.set_defaults(func=cmd_train)

    p_seg = sub.add_parser("segment", help="Segment one sketch PNG")
    p_seg.add_argument("--ckpt", required=True)
    p_seg.add_argument("--sketch", required=True)
    p_seg.add_argument("--categories", required=True, help='Comma-separated, e.g. "tree,horse,sun"')
    p_seg.add_argument("--isolate", help="Category to isolate with a hard threshold")
    p_seg.add_argument("--tau", type=float, default=0.71, help="Isolation threshold")
    p_seg.add_argument("--out-dir", help="Output directory (default: next to the sketch)")
    p_seg.set_defaults(func=cmd_segment)

    p_eval = sub.add_parser("eval", help="Score a split against its ground truth")
    p_eval.add_argument("--ckpt", required=True)
    p_eval.add_argument("--data", default=config.DATA_ROOT)
    p_eval.add_argument("--split", default="test", choices=["train", "val", "test"])
    p_eval.add_argument("--report", help="JSON report path")
    p_eval.add_argument("--per-item", action="store_true", help="Include per-sketch rows")
    p_eval.set_defaults(func=cmd_eval)

    p_test = sub.add_parser("test", help="Run pytest")
    p_test.add_argument("-q", "--quiet", action="store_true", help="Quiet mode (-q)")
    p_test.add_argument("-k", help="Only run tests matching expression")
    p_test.add_argument("--slow", action="store_true", help="Include slow tests")
    p_test.set_defaults(func=cmd_test)
    return parser


def main(argv: list[str] | None = None) -> int:
    logging.basicConfig(level=config.LOG_LEVEL, format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return int(args.func(args))
    except NumericError as e:
        logger.error("Numeric failure: %s", e, extra={"event": "numeric_failure", "term": e.term})
        print(f"error: {e}", file=sys.stderr)
        return EXIT_NUMERIC
    except SketchSegError as e:
        logger.error("Command failed: %s", e, extra={"event": "command_failed", "command": args.command})
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    raise SystemExit(main())
