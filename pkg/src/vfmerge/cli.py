"""Single command-line entrypoint wiring all modules into experiment commands.

Exit codes: 0 success, 1 runtime failure (diagnostic on stderr), 2 usage.
"""

from __future__ import annotations

import argparse
import json
import sys
import traceback
from pathlib import Path

import numpy as np

from . import experiment
from .checkpoint import Checkpoint, load_model
from .config import ExperimentConfig
from .errors import InputError, VfmergeError
from .interpolate import wiseft_sweep
from .metrics import write_csv
from .pipelines import ClassEmbeddingSet, compose_heads_semseg, zero_shot_semseg
from .probing import probe_backbone
from .training import set_deterministic

# fixed palette for rendered label maps (background drawn black)
_PALETTE = [
    (230, 25, 75), (60, 180, 75), (0, 130, 200), (255, 225, 25),
    (245, 130, 48), (145, 30, 180), (70, 240, 240), (240, 50, 230),
    (210, 245, 60), (250, 190, 190), (0, 128, 128), (170, 110, 40),
    (128, 128, 0), (255, 215, 180), (0, 0, 128), (128, 128, 128),
]


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.from_json(args.config) if args.config else ExperimentConfig()
    if getattr(args, "out_dir", None):
        cfg.out_dir = args.out_dir
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
        cfg.data.seed = args.seed
    return cfg


def _parse_alphas(text: str) -> list[float]:
    if ":" in text:
        parts = text.split(":")
        if len(parts) != 3:
            raise InputError("alpha range must be start:stop:step")
        start, stop, step = (float(p) for p in parts)
        count = int(round((stop - start) / step)) + 1
        return [round(start + i * step, 10) for i in range(count)]
    return [float(p) for p in text.split(",") if p]


def cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    set_deterministic(cfg.seed)
    bundle = experiment.run_gen_data(cfg, persist=True)
    print(
        f"wrote {len(bundle.clip_train)}+{len(bundle.clip_val)} alignment / "
        f"{len(bundle.sam_train)}+{len(bundle.sam_val)} segmentation samples "
        f"to {Path(cfg.out_dir) / 'data'}"
    )
    return 0


def cmd_train_teachers(args) -> int:
    cfg = _load_config(args)
    set_deterministic(cfg.seed)
    bundle = experiment.prepare_data(cfg)
    _, gates = experiment.run_train_teachers(cfg, bundle)
    print(json.dumps(gates, indent=2, sort_keys=True))
    return 0


def cmd_merge(args) -> int:
    cfg = _load_config(args)
    set_deterministic(cfg.seed)
    bundle = experiment.prepare_data(cfg)
    teachers = experiment.load_teachers(cfg.out_dir)
    ckpts = experiment.run_merge(cfg, bundle, teachers)
    for name in ("head_probe", "multitask", "resolution_adapt"):
        print(f"stage {name}: checkpoint under merge/{experiment.STAGE_DIRS[name]}")
    del ckpts
    return 0


def cmd_eval(args) -> int:
    cfg = _load_config(args)
    set_deterministic(cfg.seed)
    bundle = experiment.prepare_data(cfg)
    teachers = experiment.load_teachers(cfg.out_dir)
    ckpt_dir = args.ckpt or str(
        Path(cfg.out_dir) / "merge" / experiment.STAGE_DIRS["resolution_adapt"]
    )
    summary = experiment.run_eval(cfg, bundle, teachers, Checkpoint.load(ckpt_dir))
    print(json.dumps(summary, indent=2, sort_keys=True))
    return 0


def cmd_wiseft_sweep(args) -> int:
    cfg = _load_config(args)
    set_deterministic(cfg.seed)
    bundle = experiment.prepare_data(cfg)
    a = Checkpoint.load(args.a)
    b = Checkpoint.load(args.b)
    rows = wiseft_sweep(
        a,
        b,
        _parse_alphas(args.alphas),
        experiment.make_wiseft_evaluators(cfg, bundle),
        csv_path=args.out,
        plot_path=args.plot,
    )
    print(f"{len(rows)} rows -> {args.out}")
    return 0


def cmd_segment(args) -> int:
    from PIL import Image

    cfg = _load_config(args)
    set_deterministic(cfg.seed)
    model = load_model(args.ckpt)
    names = [c.strip() for c in args.classes.split(",") if c.strip()]
    inventory = cfg.data.scene.class_names()
    classes = ClassEmbeddingSet.from_text_table(
        model.text_table, names, inventory, include_background=True
    )
    resolution = args.resolution or (
        cfg.model.sam_resolution if args.mode == "composed" else max(cfg.model.clip_resolutions)
    )
    img = Image.open(args.image).convert("RGB").resize((resolution, resolution))
    import torch

    tensor = torch.from_numpy(
        (np.asarray(img, dtype=np.float32) / 255.0).transpose(2, 0, 1)
    )
    if args.mode == "clip":
        label = zero_shot_semseg(model, tensor, classes)
    else:
        label = compose_heads_semseg(
            model,
            tensor,
            classes,
            threshold=args.threshold,
            n_points=args.points,
            rng=np.random.default_rng(cfg.seed),
        )
    h, w = label.ids.shape
    rgb = np.zeros((h, w, 3), dtype=np.uint8)
    legend = {}
    for cls_id, name in label.legend.items():
        color = (0, 0, 0) if cls_id == classes.background_id else _PALETTE[cls_id % len(_PALETTE)]
        rgb[label.ids == cls_id] = color
        legend[str(cls_id)] = {"name": name, "color": list(color)}
    Image.fromarray(rgb).save(args.out)
    with open(args.legend, "w") as fh:
        json.dump({"resolution": resolution, "classes": legend}, fh, indent=2, sort_keys=True)
    print(f"wrote {args.out} and {args.legend}")
    return 0


def cmd_probe(args) -> int:
    cfg = _load_config(args)
    set_deterministic(cfg.seed)
    bundle = experiment.prepare_data(cfg)
    report = probe_backbone(
        Checkpoint.load(args.ckpt), args.head, args.task, bundle, seed=cfg.seed
    )
    report.to_json(args.out)
    print(json.dumps(report.metrics, indent=2, sort_keys=True))
    return 0


def cmd_report(args) -> int:
    cfg = _load_config(args)
    written = experiment.run_report(cfg.out_dir)
    for path in written:
        print(f"wrote {path}")
    return 0


def cmd_run_all(args) -> int:
    cfg = _load_config(args)
    set_deterministic(cfg.seed)
    summary = experiment.run_all(cfg, persist_data=args.persist_data)
    print(json.dumps(summary["timings_seconds"], indent=2, sort_keys=True))
    print(f"summary at {Path(cfg.out_dir) / 'summary.json'}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vfmerge",
        description="Merge a promptable segmenter and an image-text aligner "
        "into one backbone via rehearsal-based multi-task distillation.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="experiment config JSON")
        p.add_argument("--out-dir", help="output directory (overrides config)")
        p.add_argument("--seed", type=int, help="master seed (overrides config)")

    p = sub.add_parser("gen-data", help="generate and persist the synthetic datasets")
    common(p)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train-teachers", help="train the mini aligner and segmenter teachers")
    common(p)
    p.set_defaults(func=cmd_train_teachers)

    p = sub.add_parser("merge", help="run the three-stage merge training")
    common(p)
    p.set_defaults(func=cmd_merge)

    p = sub.add_parser("eval", help="forgetting report, head composition, probes")
    common(p)
    p.add_argument("--ckpt", help="merged checkpoint dir (default: stage 3)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("wiseft-sweep", help="weight interpolation tradeoff sweep")
    common(p)
    p.add_argument("--a", required=True, help="checkpoint dir (pretrained side)")
    p.add_argument("--b", required=True, help="checkpoint dir (finetuned side)")
    p.add_argument("--alphas", default="0:1:0.1", help="start:stop:step or comma list")
    p.add_argument("--out", required=True, help="output CSV path")
    p.add_argument("--plot", help="output PNG path")
    p.set_defaults(func=cmd_wiseft_sweep)

    p = sub.add_parser("segment", help="text-prompted segmentation of one image")
    common(p)
    p.add_argument("--image", required=True)
    p.add_argument("--classes", required=True, help="comma-separated inventory class names")
    p.add_argument("--mode", choices=("clip", "composed"), default="clip")
    p.add_argument("--ckpt", required=True, help="model checkpoint dir")
    p.add_argument("--out", required=True, help="output mask PNG")
    p.add_argument("--legend", required=True, help="output legend JSON")
    p.add_argument("--resolution", type=int)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--points", type=int, default=1)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("probe", help="train a head on a frozen backbone")
    common(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--head", choices=("linear", "light_decoder"), default="linear")
    p.add_argument("--task", choices=("semseg", "classify"), default="semseg")
    p.add_argument("--out", required=True, help="output report JSON")
    p.set_defaults(func=cmd_probe)

    p = sub.add_parser("report", help="regenerate figures from persisted CSVs")
    common(p)
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("run-all", help="full experiment end to end")
    common(p)
    p.add_argument("--persist-data", action="store_true")
    p.set_defaults(func=cmd_run_all)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except VfmergeError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception:
        traceback.print_exc()
        return 1


if __name__ == "__main__":
    sys.exit(main())
