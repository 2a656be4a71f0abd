"""Command-line entry point: ``scaledet {train,eval,inspect,ablate,make-data}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

import numpy as np
import torch
from PIL import Image, ImageDraw

from .core_types import STRIDE
from .data import SceneSample, generate_dataset, read_dataset, read_sample, write_dataset
from .estimator import ScaleAwareMonoDetector
from .experiments import (AXES, RunConfig, ablate, axis_values, format_table, train_run,
                          write_metrics)
from .losses import NonFiniteLossError

logger = logging.getLogger("scaledet")


class CliError(Exception):
    pass


# ------------------------------------------------------------------ helpers

def _run_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    overrides = {}
    for item in args.set or []:
        if "=" not in item:
            raise CliError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        overrides[key.strip()] = value
    if getattr(args, "seed", None) is not None:
        overrides["seed"] = str(args.seed)
    return cfg.update(**overrides) if overrides else cfg


def _load(checkpoint) -> Tuple[ScaleAwareMonoDetector, Optional[RunConfig]]:
    if not Path(checkpoint).exists():
        raise CliError(f"checkpoint {checkpoint} does not exist")
    est, extra = ScaleAwareMonoDetector.load(checkpoint, return_extra=True)
    run_cfg = RunConfig.from_text(extra["run_config"]) if "run_config" in extra else None
    return est, run_cfg


def _resolve_run_config(args, est, stored: Optional[RunConfig]) -> RunConfig:
    if args.config:
        cfg = RunConfig.load(args.config)
        if cfg.estimator().model_config() != est.model_config():
            raise CliError(f"config {args.config} does not match the checkpoint's model")
        return cfg
    if stored is None:
        raise CliError("checkpoint carries no run config; pass --config or --data")
    return stored


def _samples(args, est, stored) -> List[SceneSample]:
    if args.data:
        return read_dataset(args.data, args.split, est.class_names)
    return _resolve_run_config(args, est, stored).val_dataset()


# ------------------------------------------------------------------ overlay

def _weight_color(w: float) -> Tuple[int, int, int]:
    # low weight blue, high weight red
    w = float(np.clip(w, 0.0, 1.0))
    return (int(255 * w), int(64 + 96 * (1 - abs(2 * w - 1))), int(255 * (1 - w)))


def render_overlay(sample: SceneSample, pred, est: ScaleAwareMonoDetector, radius: int = 2):
    """One panel per decoder block: GT boxes, query crosses and weighted key points.

    Returns ``(image, records)`` where ``records[b]`` lists every key point
    drawn for block ``b`` as ``(query, head, point, x_px, y_px, weight)``.
    """
    h_img, w_img = sample.image.shape
    gray = (np.clip(sample.image, 0, 1) * 255).astype(np.uint8)
    panels, records = [], []
    fh, fw = pred.feature_size
    for block in pred.blocks:
        panel = Image.fromarray(gray, mode="L").convert("RGB")
        draw = ImageDraw.Draw(panel)
        for lab in sample.labels:
            draw.rectangle(lab.xyxy, outline=(0, 255, 0))
        pos = block["positions"][0]
        centers = pos * pos.new_tensor([fw, fh]) - 0.5
        pts = centers[:, None, None, :] + block["offsets"][0]  # [N, M, K, 2] cells
        px = ((pts + 0.5) * STRIDE).numpy()
        attn = block["attention"][0].numpy()
        drawn = []
        n, m, k, _ = px.shape
        for q in range(n):
            for hd in range(m):
                for p in range(k):
                    x, y = px[q, hd, p]
                    wgt = attn[q, hd, p]
                    draw.ellipse((x - radius, y - radius, x + radius, y + radius),
                                 outline=_weight_color(wgt * k))
                    drawn.append((q, hd, p, float(x), float(y), float(wgt)))
        for x, y in (pos.numpy() * [w_img, h_img]):
            draw.line((x - 3, y, x + 3, y), fill=(255, 255, 0))
            draw.line((x, y - 3, x, y + 3), fill=(255, 255, 0))
        panels.append(panel)
        records.append(drawn)
    canvas = Image.new("RGB", (w_img, h_img * len(panels)))
    for i, panel in enumerate(panels):
        canvas.paste(panel, (0, i * h_img))
    return canvas, records


# ------------------------------------------------------------------ commands

def cmd_train(args) -> int:
    cfg = _run_config(args)
    out = Path(args.out)
    report = train_run(cfg, out, evaluate_after=not args.no_eval)
    print(f"wrote {out / 'checkpoint.pt'}")
    if report:
        print(json.dumps({k: report[k] for k in ("position_precision", "weighted_position_precision",
                                                 "mean_scale_error", "ap40")}))
    return 0


def cmd_eval(args) -> int:
    est, stored = _load(args.checkpoint)
    samples = _samples(args, est, stored)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = write_metrics(est, samples, out / "metrics.json")
    for key in ("chance_position_precision", "scale_out_of_range_fraction"):
        report.pop(key)
    print(json.dumps(report, sort_keys=True))
    return 0


def cmd_inspect(args) -> int:
    est, stored = _load(args.checkpoint)
    if args.data:
        sample = read_sample(args.data, args.split, args.sample, est.class_names)
    else:
        samples = _resolve_run_config(args, est, stored).val_dataset()
        by_id = {s.sample_id: s for s in samples}
        if args.sample not in by_id:
            raise CliError(f"no sample {args.sample!r} in the validation split")
        sample = by_id[args.sample]
    images = torch.as_tensor(sample.image)[None, None]
    with torch.no_grad():
        pred = est.model_(images, sample.calibration.focal_length)
    overlay, records = render_overlay(sample, pred, est)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    png = out / f"{args.sample}_overlay.png"
    overlay.save(png)
    summary = {"sample": args.sample, "blocks": len(records),
               "keypoints_per_block": [len(r) for r in records],
               "keypoints": [[list(p) for p in r] for r in records]}
    (out / f"{args.sample}_keypoints.json").write_text(json.dumps(summary))
    print(f"wrote {png} ({len(records)} blocks x {len(records[0])} key points)")
    return 0


def cmd_ablate(args) -> int:
    base = _run_config(args)
    values = axis_values(args.axis, args.values)
    seeds = [base["seed"] + i for i in range(args.seeds)]
    rows = ablate(base, args.axis, values, args.out, seeds, reuse=not args.fresh)
    table = format_table(rows)
    out = Path(args.out)
    (out / "ablation.txt").write_text(table)
    (out / "ablation.json").write_text(json.dumps(rows, indent=2) + "\n")
    print(table, end="")
    return 0


def cmd_make_data(args) -> int:
    cfg = _run_config(args)
    scene = cfg.scene_config()
    for split, n in (("train", cfg["train_size"]), ("val", cfg["val_size"])):
        write_dataset(args.out, split, generate_dataset(scene, n, split))
    print(f"wrote {cfg['train_size']} train / {cfg['val_size']} val samples to {args.out}")
    return 0


# ------------------------------------------------------------------ parser

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="scaledet", description=__doc__)
    parser.add_argument("-q", "--quiet", action="store_true", help="only log warnings")
    sub = parser.add_subparsers(dest="command", required=True)

    def config_args(p):
        p.add_argument("--config", help="flat key=value run config file")
        p.add_argument("--set", action="append", metavar="KEY=VALUE",
                       help="override one config key (repeatable)")
        p.add_argument("--seed", type=int, help="override the run seed")
        p.add_argument("--out", required=True, help="output directory")

    p = sub.add_parser("train", help="train one run")
    config_args(p)
    p.add_argument("--no-eval", action="store_true", help="skip the validation report")
    p.set_defaults(func=cmd_train)

    for name, func, hlp in (("eval", cmd_eval, "evaluate a checkpoint"),
                            ("inspect", cmd_inspect, "render key points for one sample")):
        p = sub.add_parser(name, help=hlp)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--config", help="run config; must match the checkpoint's model")
        p.add_argument("--data", help="dataset directory (default: regenerate the run's val split)")
        p.add_argument("--split", default="val")
        p.add_argument("--out", required=True)
        if name == "inspect":
            p.add_argument("--sample", required=True, help="sample id, e.g. 000003")
        p.set_defaults(func=func)

    p = sub.add_parser("ablate", help="one run per axis value with shared seeds")
    config_args(p)
    p.add_argument("--axis", required=True, choices=sorted(AXES))
    p.add_argument("--values", required=True,
                   help="comma-separated values; scale sets separated by ';', e.g. '3,5,7;1,3,5,7,9'")
    p.add_argument("--seeds", type=int, default=1, help="runs per value (seeds seed..seed+n-1)")
    p.add_argument("--fresh", action="store_true", help="retrain even if a matching run exists")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("make-data", help="write the synthetic dataset to disk")
    config_args(p)
    p.set_defaults(func=cmd_make_data)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NonFiniteLossError as exc:
        print(f"error: training aborted, {exc}", file=sys.stderr)
        return 1
    except (CliError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
