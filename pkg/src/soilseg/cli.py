"""Command line entry point: soilseg {validate|split|train|eval|segment|bench|plot}.

Exit codes are uniform across subcommands: 0 success, 1 processing failure,
2 environment/IO failure, 64 usage error. Every subcommand that writes into
an output directory drops a ``run_manifest.json`` there before doing any
work, so a run can always be reproduced from its manifest.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
from PIL import Image

from . import __version__, coco_data, evaluation, model_core, postprocess, training
from .errors import (
    CorruptCheckpoint,
    DanglingReference,
    MissingFile,
    NonFiniteLoss,
    NoSoilDetected,
    SchemaError,
    SoilSegError,
    VersionMismatch,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_ENVIRONMENT = 2
EXIT_USAGE = 64

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg"}


class _Parser(argparse.ArgumentParser):
    """argparse that reports usage errors with exit code 64."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _device(args) -> str:
    return args.device or os.environ.get("SOILSEG_DEVICE") or "cpu"


def write_manifest(out_dir: Path, subcommand: str, config: dict,
                   inputs: dict) -> Path:
    """Record what is about to run; written before any work begins."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "subcommand": subcommand,
        "config": config,
        "inputs": inputs,
        "tool_version": __version__,
        "timestamp": datetime.now(timezone.utc).isoformat(),
    }
    path = out_dir / "run_manifest.json"
    with path.open("w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return path


def _update_manifest(out_dir: Path, **fields) -> None:
    path = Path(out_dir) / "run_manifest.json"
    manifest = json.loads(path.read_text(encoding="utf-8"))
    manifest.update(fields)
    with path.open("w", encoding="utf-8") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=2)
        fh.write("\n")


# -- subcommands -------------------------------------------------------------------

def cmd_validate(args) -> int:
    """Validate both splits of a dataset root; print one violation per line."""
    total = 0
    for split in coco_data.SPLITS:
        try:
            ds = coco_data.load_coco_dataset(args.root, split, strict=False)
        except (MissingFile, SchemaError) as exc:
            print(f"{split}: layout error: {exc}", file=sys.stderr)
            return EXIT_ENVIRONMENT
        for violation in coco_data.validate_dataset(ds):
            print(f"{split}: {violation}")
            total += 1
    if total:
        print(f"{total} violation(s) found", file=sys.stderr)
        return EXIT_FAILURE
    print("dataset is valid")
    return EXIT_OK


def cmd_split(args) -> int:
    """Materialize train/val2017 layout from a flat annotated image pool."""
    if not 0.0 < args.ratio < 1.0:
        print(f"split: ratio must be in (0, 1), got {args.ratio}", file=sys.stderr)
        return EXIT_USAGE
    input_dir = Path(args.input_dir)
    pool_jsons = sorted(input_dir.glob("*.json")) if input_dir.is_dir() else []
    if len(pool_jsons) != 1:
        print(f"split: expected exactly one annotation .json in {input_dir}, "
              f"found {len(pool_jsons)}", file=sys.stderr)
        return EXIT_ENVIRONMENT
    out_root = Path(args.out_root)
    write_manifest(out_root, "split",
                   {"ratio": args.ratio, "seed": args.seed},
                   {"input_dir": str(input_dir), "pool_json": str(pool_jsons[0])})
    try:
        pool = _load_pool(pool_jsons[0], input_dir)
        spec = coco_data.SplitSpec(ratio=args.ratio, seed=args.seed)
        train_ids, val_ids = coco_data.split_dataset(
            [img.id for img in pool.images], spec)
        for split, ids in (("train", train_ids), ("val", val_ids)):
            subset = _subset(pool, set(ids))
            coco_data.write_coco_layout(subset, out_root, split,
                                        image_source=input_dir)
        print(f"wrote {len(train_ids)} train / {len(val_ids)} val images to {out_root}")
        return EXIT_OK
    except (OSError, SoilSegError) as exc:
        print(f"split: {exc}", file=sys.stderr)
        return EXIT_ENVIRONMENT


def _load_pool(json_path: Path, image_dir: Path) -> coco_data.CocoDataset:
    """A flat pool is one COCO json plus image files beside it."""
    import shutil
    import tempfile
    with tempfile.TemporaryDirectory() as tmp:
        tmp_root = Path(tmp)
        (tmp_root / "annotations").mkdir()
        shutil.copyfile(json_path,
                        coco_data.annotation_file(tmp_root, "train"))
        os.symlink(image_dir.resolve(), tmp_root / "train2017")
        return coco_data.load_coco_dataset(tmp_root, "train")


def _subset(ds: coco_data.CocoDataset, ids: set[int]) -> coco_data.CocoDataset:
    return coco_data.CocoDataset(
        images=[img for img in ds.images if img.id in ids],
        annotations=[a for a in ds.annotations if a.image_id in ids],
        categories=list(ds.categories),
        root=ds.root, split=ds.split)


def _train_configs(args) -> tuple[training.TrainConfig, model_core.ModelConfig]:
    train_cfg = training.TrainConfig(
        epochs=args.epochs,
        base_lr=args.base_lr,
        momentum=args.momentum,
        weight_decay=args.weight_decay,
        decay_epochs=tuple(int(e) for e in args.decay_epochs.split(",") if e != ""),
        decay_factor=args.decay_factor,
        batch_size=args.batch_size,
        mixed_precision=args.mixed_precision,
        seed=args.seed,
        hflip=not args.no_hflip,
        grad_clip_norm=args.grad_clip_norm if args.grad_clip_norm > 0 else None,
    )
    model_cfg = model_core.ModelConfig(
        pretrained_backbone=not args.no_pretrained_backbone,
        min_size=args.min_size,
        max_size=args.max_size if args.max_size >= args.min_size else args.min_size,
        device=_device(args),
    )
    return train_cfg, model_cfg


def cmd_train(args) -> int:
    """Train with the standard recipe; every default is overridable by flag."""
    try:
        train_cfg, model_cfg = _train_configs(args)
    except (ValueError, SoilSegError) as exc:
        print(f"train: {exc}", file=sys.stderr)
        return EXIT_USAGE
    out_dir = Path(args.out_dir)
    write_manifest(out_dir, "train",
                   {"train": train_cfg.to_json_dict(),
                    "model": model_cfg.to_json_dict()},
                   {"root": str(args.root),
                    "resume_from": str(args.resume_from) if args.resume_from else None})
    training.write_config_snapshot(out_dir, train_cfg, model_cfg)
    if args.dry_run:
        print(f"config written to {out_dir / 'config.json'} (dry run)")
        return EXIT_OK
    try:
        train_ds = coco_data.load_coco_dataset(args.root, "train")
        val_ds = coco_data.load_coco_dataset(args.root, "val")
    except (MissingFile, SchemaError, DanglingReference) as exc:
        print(f"train: {exc}", file=sys.stderr)
        return EXIT_ENVIRONMENT
    try:
        import torch
        torch.manual_seed(train_cfg.seed)  # the run seed also drives head init
        model = model_core.build_model(model_cfg)
    except SoilSegError as exc:
        print(f"train: {exc}", file=sys.stderr)
        return EXIT_ENVIRONMENT
    try:
        state, logs = training.train(train_cfg, model, train_ds, val_ds, out_dir,
                                     resume_from=args.resume_from)
    except NonFiniteLoss as exc:
        print(f"train: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except SoilSegError as exc:
        print(f"train: {exc}", file=sys.stderr)
        return EXIT_ENVIRONMENT
    best = max((l.eval_map50 for l in logs if l.eval_map50 is not None), default=None)
    print(f"trained {len(logs)} epoch(s); best eval mAP@0.5: "
          f"{'n/a' if best is None else f'{best:.4f}'}")
    return EXIT_OK


def cmd_eval(args) -> int:
    """Evaluate a checkpoint: print segm_mAP@0.5 and write the report JSON."""
    try:
        model = training.load_model_from_checkpoint(args.checkpoint, _device(args))
    except (CorruptCheckpoint, VersionMismatch, SoilSegError) as exc:
        print(f"eval: {exc}", file=sys.stderr)
        return EXIT_ENVIRONMENT
    try:
        ds = coco_data.load_coco_dataset(args.root, args.split)
    except (MissingFile, SchemaError, DanglingReference) as exc:
        print(f"eval: {exc}", file=sys.stderr)
        return EXIT_ENVIRONMENT
    out_dir = Path(args.out_dir) if args.out_dir else Path(args.checkpoint).parent
    write_manifest(out_dir, "eval",
                   {"split": args.split, "device": _device(args)},
                   {"root": str(args.root), "checkpoint": str(args.checkpoint)})
    cfg = getattr(model, "config", None) or model_core.ModelConfig(
        pretrained_backbone=False)
    report = evaluation.eval_segm_map(model, ds, cfg)
    evaluation.write_eval_report(report, out_dir / "eval_report.json")
    ap = 0.0 if report.ap50 is None else report.ap50
    print(f"segm_mAP@0.5={ap:.4f}")
    print(f"reference full-dataset result: segm_mAP@0.5="
          f"{evaluation.REFERENCE_SEGM_MAP50} (informational)")
    return EXIT_OK


def _input_images(path: Path) -> list[Path]:
    if path.is_dir():
        return sorted(p for p in path.iterdir() if p.suffix.lower() in IMAGE_SUFFIXES)
    return [path]


def cmd_segment(args) -> int:
    """Segment one image or a directory; continue past no-detection inputs."""
    try:
        model = training.load_model_from_checkpoint(args.checkpoint, _device(args))
    except (CorruptCheckpoint, VersionMismatch, SoilSegError) as exc:
        print(f"segment: {exc}", file=sys.stderr)
        return EXIT_ENVIRONMENT
    inputs = _input_images(Path(args.input))
    if not inputs:
        print(f"segment: no images under {args.input}", file=sys.stderr)
        return EXIT_ENVIRONMENT
    out_dir = Path(args.out_dir)
    write_manifest(out_dir, "segment",
                   {"score_threshold": args.score_threshold,
                    "mask_threshold": args.mask_threshold,
                    "device": _device(args)},
                   {"checkpoint": str(args.checkpoint), "input": str(args.input)})
    successes, no_detection = [], []
    for image_path in inputs:
        try:
            with Image.open(image_path) as im:
                image = np.asarray(im.convert("RGB"))
        except OSError as exc:
            print(f"segment: cannot read {image_path}: {exc}", file=sys.stderr)
            return EXIT_ENVIRONMENT
        start = time.perf_counter()
        try:
            dets = model_core.predict(model, image)
            artifact = postprocess.compose_artifact(
                image, dets, args.score_threshold, args.mask_threshold)
        except NoSoilDetected:
            no_detection.append(image_path.name)
            print(f"{image_path.name}: no soil detected")
            continue
        seconds = time.perf_counter() - start
        postprocess.save_artifact(artifact, out_dir, image_path.stem, seconds)
        successes.append(image_path.name)
        print(f"{image_path.name}: score={artifact.score:.3f} "
              f"crop={artifact.crop_rect.as_tuple()} ({seconds:.3f}s)")
    _update_manifest(out_dir, outputs={"segmented": successes,
                                       "no_detection": no_detection})
    return EXIT_OK if successes else EXIT_FAILURE


def cmd_bench(args) -> int:
    """Benchmark single-image segmentation latency."""
    try:
        model = training.load_model_from_checkpoint(args.checkpoint, _device(args))
    except (CorruptCheckpoint, VersionMismatch, SoilSegError) as exc:
        print(f"bench: {exc}", file=sys.stderr)
        return EXIT_ENVIRONMENT
    try:
        with Image.open(args.image) as im:
            image = np.asarray(im.convert("RGB"))
    except OSError as exc:
        print(f"bench: cannot read {args.image}: {exc}", file=sys.stderr)
        return EXIT_ENVIRONMENT
    out_dir = Path(args.out_dir) if args.out_dir else Path(args.checkpoint).parent
    write_manifest(out_dir, "bench",
                   {"runs": args.runs, "warmup": args.warmup,
                    "device": _device(args)},
                   {"checkpoint": str(args.checkpoint), "image": str(args.image)})
    report = evaluation.benchmark_inference(model, image, warmup=args.warmup,
                                            runs=args.runs)
    path = out_dir / "timing_report.json"
    with path.open("w", encoding="utf-8") as fh:
        json.dump(report.to_json_dict(), fh, sort_keys=True, indent=2)
        fh.write("\n")
    print(f"median_seconds={report.median_seconds:.4f}")
    print(f"mean_seconds={report.mean_seconds:.4f} over {report.measured_runs} runs "
          f"on {report.device}")
    print(f"reference: {evaluation.REFERENCE_GPU_LATENCY_SECONDS} s per image "
          f"on a TITAN V (informational)")
    return EXIT_OK


def cmd_plot(args) -> int:
    """Render loss/lr/mAP curves from a training CSV."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    import csv as _csv
    try:
        with open(args.log_csv, encoding="utf-8", newline="") as fh:
            rows = list(_csv.DictReader(fh))
        if not rows:
            raise ValueError("no data rows")
        epochs = [int(r["epoch"]) for r in rows]
        losses = {k: [float(r[k]) for r in rows]
                  for k in ("loss_total", "loss_rpn", "loss_frcnn", "loss_mask")}
        lrs = [float(r["lr"]) for r in rows]
    except (OSError, ValueError, KeyError, TypeError) as exc:
        print(f"plot: malformed csv {args.log_csv}: {exc}", file=sys.stderr)
        return EXIT_ENVIRONMENT
    out_dir = Path(args.out_dir)
    write_manifest(out_dir, "plot", {}, {"log_csv": str(args.log_csv)})

    fig, ax = plt.subplots(figsize=(7, 4.5))
    for key, values in losses.items():
        ax.plot(epochs, values, marker="o", markersize=3, label=key)
    ax.set_xlabel("epoch")
    ax.set_ylabel("loss")
    ax.legend()
    ax.set_title("training loss")
    fig.savefig(out_dir / "loss_vs_epoch.png", dpi=120, bbox_inches="tight")
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(7, 4.5))
    ax.step(epochs, lrs, where="post", marker="o", markersize=3)
    ax.set_xlabel("epoch")
    ax.set_ylabel("learning rate")
    ax.set_yscale("log")
    ax.set_title("learning rate schedule")
    fig.savefig(out_dir / "lr_vs_epoch.png", dpi=120, bbox_inches="tight")
    plt.close(fig)

    written = 2
    try:
        maps = [(e, float(r["eval_map50"])) for e, r in zip(epochs, rows)
                if r.get("eval_map50") not in (None, "")]
    except (ValueError, TypeError):
        maps = []
    if maps:
        fig, ax = plt.subplots(figsize=(7, 4.5))
        ax.plot([m[0] for m in maps], [m[1] for m in maps], marker="o",
                markersize=3, color="tab:green")
        ax.set_xlabel("epoch")
        ax.set_ylabel("eval mAP@0.5")
        ax.set_ylim(0, 1.05)
        ax.set_title("validation segmentation mAP@0.5")
        fig.savefig(out_dir / "map50_vs_epoch.png", dpi=120, bbox_inches="tight")
        plt.close(fig)
        written += 1
    else:
        print("plot: no eval_map50 column values; skipping the mAP plot",
              file=sys.stderr)
    print(f"wrote {written} plot(s) to {out_dir}")
    return EXIT_OK


# -- parser ------------------------------------------------------------------------

def build_parser() -> _Parser:
    parser = _Parser(prog="soilseg",
                     description="Soil image instance segmentation pipeline")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("-v", "--verbose", action="store_true",
                        help="enable info-level logging")
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("validate", help="validate a dataset root (both splits)")
    p.add_argument("root")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("split", help="split a flat annotated pool into train/val")
    p.add_argument("input_dir")
    p.add_argument("out_root")
    p.add_argument("--ratio", type=float, default=0.7)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("train", help="train the segmentation model")
    p.add_argument("root")
    p.add_argument("out_dir")
    p.add_argument("--epochs", type=int, default=25)
    p.add_argument("--base-lr", type=float, default=0.004)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--weight-decay", type=float, default=0.0001)
    p.add_argument("--decay-epochs", default="10,20",
                   help="comma-separated epochs where lr shrinks")
    p.add_argument("--decay-factor", type=float, default=0.1)
    p.add_argument("--batch-size", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--mixed-precision", action=argparse.BooleanOptionalAction,
                   default=None, help="default: on when an accelerator is present")
    p.add_argument("--no-hflip", action="store_true",
                   help="disable random horizontal flip augmentation")
    p.add_argument("--grad-clip-norm", type=float, default=4.0,
                   help="max gradient norm; <= 0 disables clipping")
    p.add_argument("--no-pretrained-backbone", action="store_true",
                   help="random initialization instead of COCO weights")
    p.add_argument("--min-size", type=int, default=800)
    p.add_argument("--max-size", type=int, default=1333)
    p.add_argument("--device", default=None)
    p.add_argument("--resume-from", default=None)
    p.add_argument("--dry-run", action="store_true",
                   help="write manifest and config.json, then exit")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate segmentation mAP@0.5")
    p.add_argument("root")
    p.add_argument("checkpoint")
    p.add_argument("--split", choices=coco_data.SPLITS, default="val")
    p.add_argument("--out-dir", default=None)
    p.add_argument("--device", default=None)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("segment", help="segment images and crop the soil region")
    p.add_argument("checkpoint")
    p.add_argument("input", help="an image file or a directory of images")
    p.add_argument("out_dir")
    p.add_argument("--score-threshold", type=float, default=0.5)
    p.add_argument("--mask-threshold", type=float, default=0.5)
    p.add_argument("--device", default=None)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("bench", help="benchmark single-image latency")
    p.add_argument("checkpoint")
    p.add_argument("image")
    p.add_argument("--runs", type=int, default=30)
    p.add_argument("--warmup", type=int, default=5)
    p.add_argument("--out-dir", default=None)
    p.add_argument("--device", default=None)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("plot", help="plot curves from a training log CSV")
    p.add_argument("log_csv")
    p.add_argument("out_dir")
    p.set_defaults(func=cmd_plot)

    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except SoilSegError as exc:
        print(f"{args.subcommand}: {exc}", file=sys.stderr)
        return EXIT_FAILURE
    except OSError as exc:
        print(f"{args.subcommand}: {exc}", file=sys.stderr)
        return EXIT_ENVIRONMENT


def main_entry() -> None:  # console_scripts hook
    sys.exit(main())
