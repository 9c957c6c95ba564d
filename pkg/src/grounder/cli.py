"""Command-line surface.

Subcommands: gen-data, train, eval, ground, describe, gradcheck.
Exit codes: 0 success, 2 configuration/input error, 3 runtime error.
Every command echoes its effective configuration into the output directory
and honors --seed, so identical invocations produce identical artifacts.
"""
from __future__ import annotations

import argparse
import csv
import json
import sys
from pathlib import Path

import numpy as np
import torch

from . import datagen
from .colormap import UnknownColorError, decode_colormap, load_colormap, load_palette, save_colormap
from .config import ConfigError, config_hash, load_run_config, save_effective_config, to_dict
from .datagen import GenerationError, Scene, SceneConfig, generate_dataset, load_dataset, save_dataset
from .evaluation import describe_image, evaluate_model, ground_scene
from .gradcheck import report_to_json, run_gradcheck
from .language import OOVError
from .model import GroundingModel, load_checkpoint, save_checkpoint
from .plots import render_overlay, save_iou_histogram, save_loss_curves, save_recall_curve
from .training import TrainingDivergedError, fit


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="grounder",
                                     description="Synthetic-scene noun grounding pipeline.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", "--n", "-n", dest="count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--split", default="train")
    p.add_argument("--config", default=None)
    p.add_argument("--set", dest="overrides", action="append", default=[],
                   metavar="KEY=VALUE", help="dotted config override, e.g. data.max_groups=2")
    p.set_defaults(handler=cmd_gen_data)

    p = sub.add_parser("train", help="train a model on a generated dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--seed", type=int, default=None, help="override train.seed")
    p.add_argument("--epochs", type=int, default=None, help="override train.epochs")
    p.add_argument("--stop-epoch", type=int, default=None,
                   help="pause after this epoch (resume later with --resume)")
    p.add_argument("--resume", default=None, help="checkpoint to continue from")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", default="narrative", choices=["narrative", "referring", "panoptic"])
    p.add_argument("--teacher-forced", action="store_true",
                   help="use gold answers instead of generation")
    p.add_argument("--no-figures", action="store_true")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("ground", help="ground a caption against an image + colormap")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--colormap", required=True)
    p.add_argument("--palette", required=True)
    p.add_argument("--caption", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", default="narrative", choices=["narrative", "referring", "panoptic"])
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(handler=cmd_ground)

    p = sub.add_parser("describe", help="generate a caption for an image")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", default=None)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(handler=cmd_describe)

    p = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    p.add_argument("--out", default=None, help="write the JSON report here")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--coords", type=int, default=2)
    p.set_defaults(handler=cmd_gradcheck)
    return parser


def cmd_gen_data(args) -> int:
    if args.count < 1:
        raise ConfigError(f"--count must be >= 1, got {args.count}")
    cfg = load_run_config(args.config, args.overrides)
    scenes = generate_dataset(args.seed, cfg.data, args.count)
    save_dataset(scenes, args.out, split=args.split, seed=args.seed, config=cfg.data)
    save_effective_config(cfg, args.out)
    print(f"wrote {len(scenes)} scenes to {args.out}")
    return 0


def cmd_train(args) -> int:
    cfg = load_run_config(args.config, args.overrides)
    if args.seed is not None:
        cfg.train.seed = args.seed
    if args.epochs is not None:
        cfg.train.epochs = args.epochs
    cfg.validate()
    scenes, _ = load_dataset(args.data)

    start_step, start_epoch, resume_state = 0, 0, None
    if args.resume:
        model, meta = load_checkpoint(args.resume)
        start_step, start_epoch = meta["step"], meta["epoch"]
        resume_state = meta.get("optimizer_state")
    else:
        model = GroundingModel(cfg.model)
        model.init_parameters(cfg.train.seed)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_effective_config(cfg, out)
    result = fit(scenes, model, cfg.train, out_dir=out,
                 resume_state=resume_state, start_step=start_step, start_epoch=start_epoch,
                 stop_epoch=args.stop_epoch)
    save_checkpoint(model, out / "checkpoint.npz", step=result.step, epoch=result.epoch,
                    optimizer=result.optimizer, extra={"config_hash": config_hash(cfg)})
    if result.log:
        save_loss_curves(result.log, out / "loss_curve.png")
        print(f"final loss {result.log[-1]['total']:.4f} after {result.step} steps")
    else:
        print("no training steps run; wrote initial checkpoint")
    return 0


def _flatten(prefix: str, node, rows: list[tuple[str, object]]) -> None:
    if isinstance(node, dict):
        for key, value in node.items():
            _flatten(f"{prefix}.{key}" if prefix else str(key), value, rows)
    elif isinstance(node, (int, float, str, bool)) or node is None:
        rows.append((prefix, node))


def cmd_eval(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    scenes, _ = load_dataset(args.data)
    torch.manual_seed(args.seed)
    report = evaluate_model(model, scenes, mode=args.mode, teacher_forced=args.teacher_forced)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.json").write_text(json.dumps(report, indent=2))

    rows: list[tuple[str, object]] = []
    slim = {k: v for k, v in report.items() if k not in ()}
    slim_grounding = {k: v for k, v in report["grounding"].items()
                      if k not in ("per_scene", "per_noun_iou")}
    _flatten("grounding", slim_grounding, rows)
    for section in ("panoptic", "reconstruction"):
        if section in report:
            _flatten(section, report[section], rows)
    with open(out / "report.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "value"])
        writer.writerows(rows)

    if not args.no_figures:
        ious = report["grounding"]["per_noun_iou"]
        save_recall_curve(ious, out / "recall_curve.png")
        save_iou_histogram(ious, out / "iou_hist.png")
    save_effective_config(model.config, out)
    print(json.dumps({k: v for k, v in slim_grounding.items()}, indent=2))
    return 0


def cmd_ground(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    from PIL import Image as PILImage

    with PILImage.open(args.image) as im:
        image = np.asarray(im.convert("RGB"))
    palette = load_palette(args.palette)
    cm = load_colormap(args.colormap)
    mask_set = decode_colormap(cm, palette)
    if image.shape[:2] != (mask_set.height, mask_set.width):
        raise ConfigError("image and colormap dimensions differ")
    scene = Scene(image, mask_set, palette, args.caption, nouns=[], seed=args.seed)
    prep = model.prepare_scene(scene)
    result = ground_scene(model, prep, mode=args.mode)

    out = Path(args.out)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    records = []
    for i, g in enumerate(result.groundings):
        mask_file = f"masks/noun_{i:02d}.png"
        save_colormap(np.repeat((g.mask[..., None] * 255).astype(np.uint8), 3, axis=2),
                      out / mask_file)
        records.append(g.to_record(mask_file))
    doc = {
        "schema_version": 1,
        "caption": args.caption,
        "generated": result.generated_text,
        "mode": args.mode,
        "groundings": records,
    }
    (out / "grounding.json").write_text(json.dumps(doc, indent=2))
    render_overlay(image, result.groundings, out / "overlay.png")
    save_effective_config(model.config, out)
    print(result.generated_text)
    return 0


def cmd_describe(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    from PIL import Image as PILImage

    with PILImage.open(args.image) as im:
        image = np.asarray(im.convert("RGB"))
    tensor = torch.from_numpy(image.transpose(2, 0, 1).copy()).to(model.dtype) / 255.0
    caption = describe_image(model, tensor)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(json.dumps({"schema_version": 1, "caption": caption}, indent=2))
    print(caption)
    return 0


def cmd_gradcheck(args) -> int:
    reports = run_gradcheck(seed=args.seed, n_coords=args.coords)
    payload = report_to_json(reports)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(payload)
    print(payload)
    return 0


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.handler(args)
    except (ConfigError, OOVError, UnknownColorError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except (GenerationError, TrainingDivergedError, ValueError, RuntimeError) as err:
        print(f"runtime error: {err}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
