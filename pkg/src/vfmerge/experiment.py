"""End-to-end experiment orchestration shared by the CLI and the test suite.

Every step writes its artifacts under a fixed layout in the experiment's
output directory:

    teachers/{clip,sam}/         teacher checkpoints
    teachers/metrics_{clip,sam}.csv, teachers/gates.json
    merge/init/                  student initialization (pre-training)
    merge/stage{1,2,3}_*/        stage checkpoints
    merge/metrics_stage{1,2,3}.csv
    naive/final/, naive/metrics.csv
    eval/forgetting.{csv,json}, eval/semseg_compare.json, eval/probe_semseg.json
    wiseft/table.csv, wiseft/tradeoff.png
    report/*.png                 figures regenerated from CSVs only
"""

from __future__ import annotations

import dataclasses
import json
import time
from pathlib import Path

from .checkpoint import Checkpoint, load_model, model_from_checkpoint, save_model
from .config import ExperimentConfig, naive_kd_plan, to_jsonable
from .data import DataBundle, bundle_from_config, save_dataset_dir
from .evaluation import (
    build_class_set,
    evaluate_sam_iou,
    evaluate_semseg_miou,
    evaluate_zero_shot_accuracy,
    forgetting_report,
)
from .interpolate import wiseft_sweep
from .metrics import read_csv, write_csv
from .probing import probe_backbone
from .teachers import train_clip_teacher, train_sam_teacher
from .training import (
    TeacherBundle,
    init_student_from_sam_teacher,
    run_stage_head_probe,
    run_stage_multitask,
    run_stage_resolution_adapt,
)

STAGE_DIRS = {
    "head_probe": "stage1_head_probe",
    "multitask": "stage2_multitask",
    "resolution_adapt": "stage3_resolution_adapt",
}


def prepare_data(cfg: ExperimentConfig) -> DataBundle:
    return bundle_from_config(cfg.data)


def run_gen_data(cfg: ExperimentConfig, persist: bool = True) -> DataBundle:
    bundle = prepare_data(cfg)
    if persist:
        save_dataset_dir(bundle, Path(cfg.out_dir) / "data")
    return bundle


def run_train_teachers(cfg: ExperimentConfig, bundle: DataBundle) -> tuple[TeacherBundle, dict]:
    out = Path(cfg.out_dir) / "teachers"
    t0 = time.time()
    clip_model, clip_hist = train_clip_teacher(bundle, cfg.model, cfg.teacher, cfg.seed)
    sam_model, sam_hist = train_sam_teacher(bundle, cfg.model, cfg.teacher, cfg.seed, cfg.loss)
    save_model(clip_model, out / "clip", stage="clip_teacher", seed=cfg.seed)
    save_model(sam_model, out / "sam", stage="sam_teacher", seed=cfg.seed)
    write_csv(out / "metrics_clip.csv", clip_hist)
    write_csv(out / "metrics_sam.csv", sam_hist)

    classes = build_class_set(clip_model, bundle.class_names)
    gates = {
        "clip_zero_shot_val_acc": evaluate_zero_shot_accuracy(
            clip_model, bundle.clip_val, classes, cfg.model.clip_resolutions[0]
        ),
        "sam_val_mean_iou": evaluate_sam_iou(
            sam_model, bundle.sam_val, bundle.spec.resolution
        ),
        "seconds": time.time() - t0,
    }
    with open(out / "gates.json", "w") as fh:
        json.dump(gates, fh, indent=2, sort_keys=True)
    return TeacherBundle(clip=clip_model, sam=sam_model), gates


def load_teachers(out_dir) -> TeacherBundle:
    base = Path(out_dir) / "teachers"
    return TeacherBundle(clip=load_model(base / "clip"), sam=load_model(base / "sam"))


def run_merge(
    cfg: ExperimentConfig, bundle: DataBundle, teachers: TeacherBundle
) -> dict[str, Checkpoint]:
    """The three-stage merge; returns checkpoints keyed by stage name."""
    out = Path(cfg.out_dir) / "merge"
    student = init_student_from_sam_teacher(teachers.sam, head_seed=cfg.seed)
    init_ckpt = save_model(student, out / "init", stage="init", seed=cfg.seed)
    results = {"init": init_ckpt}

    runners = {
        "head_probe": run_stage_head_probe,
        "multitask": run_stage_multitask,
        "resolution_adapt": run_stage_resolution_adapt,
    }
    for i, name in enumerate(("head_probe", "multitask", "resolution_adapt"), start=1):
        plan = cfg.stages[name]
        result = runners[name](
            student,
            teachers,
            bundle,
            plan,
            cfg.loss,
            cfg.seed,
            metrics_csv=out / f"metrics_stage{i}.csv",
        )
        result.checkpoint.save(out / STAGE_DIRS[name])
        results[name] = result.checkpoint
        student = result.model
    return results


def run_naive_kd(
    cfg: ExperimentConfig, bundle: DataBundle, teachers: TeacherBundle
) -> Checkpoint:
    """The forgetting control: alignment-only distillation from the raw
    student init, uniform learning rates, no segmentation rehearsal."""
    out = Path(cfg.out_dir) / "naive"
    student = init_student_from_sam_teacher(teachers.sam, head_seed=cfg.seed)
    plan = naive_kd_plan(cfg.naive_epochs)
    loss_cfg = dataclasses.replace(cfg.loss, lambda_sam=0.0)
    result = run_stage_multitask(
        student, teachers, bundle, plan, loss_cfg, cfg.seed,
        metrics_csv=out / "metrics.csv",
    )
    result.checkpoint.save(out / "final")
    return result.checkpoint


def run_eval(
    cfg: ExperimentConfig,
    bundle: DataBundle,
    teachers: TeacherBundle,
    merged: Checkpoint,
) -> dict:
    """Forgetting report, head-composition comparison, and linear probes."""
    out = Path(cfg.out_dir) / "eval"
    out.mkdir(parents=True, exist_ok=True)
    merged_model = model_from_checkpoint(merged)

    report = forgetting_report(
        teachers.sam,
        merged_model,
        bundle,
        seed=cfg.seed,
        csv_path=out / "forgetting.csv",
        json_path=out / "forgetting.json",
    )
    teacher_classes = build_class_set(teachers.clip, bundle.class_names)
    teacher_acc = evaluate_zero_shot_accuracy(
        teachers.clip, bundle.clip_val, teacher_classes, cfg.model.clip_resolutions[0]
    )

    seg_classes = build_class_set(merged_model, bundle.class_names, include_background=True)
    res = bundle.spec.resolution
    scenes = bundle.sam_val_scenes
    merged_model.forward_counter = 0
    miou_clip = evaluate_semseg_miou(merged_model, scenes, seg_classes, res, mode="clip")
    passes_clip = merged_model.forward_counter
    merged_model.forward_counter = 0
    miou_comp = evaluate_semseg_miou(
        merged_model, scenes, seg_classes, res, mode="composed", seed=cfg.seed
    )
    passes_comp = merged_model.forward_counter
    semseg = {
        "miou_clip_head": miou_clip,
        "miou_composed": miou_comp,
        "backbone_passes_per_image_clip": passes_clip / max(1, len(scenes)),
        "backbone_passes_per_image_composed": passes_comp / max(1, len(scenes)),
        "n_scenes": len(scenes),
    }
    with open(out / "semseg_compare.json", "w") as fh:
        json.dump(semseg, fh, indent=2, sort_keys=True)

    probe_rows = []
    for name, ckpt_dir in (
        ("merged", Path(cfg.out_dir) / "merge" / STAGE_DIRS["resolution_adapt"]),
        ("sam_teacher", Path(cfg.out_dir) / "teachers" / "sam"),
        ("clip_teacher", Path(cfg.out_dir) / "teachers" / "clip"),
    ):
        probe = probe_backbone(
            Checkpoint.load(ckpt_dir), "linear", "semseg", bundle, seed=cfg.seed
        )
        probe_rows.append({"backbone": name, "miou": probe.metrics["miou"]})
    write_csv(out / "probe_semseg.csv", probe_rows, ["backbone", "miou"])

    summary = {
        "forgetting": report.extra["rows"],
        "teacher_zero_shot_acc": teacher_acc,
        "semseg": semseg,
        "probe_semseg": probe_rows,
    }
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    return summary


def make_wiseft_evaluators(cfg: ExperimentConfig, bundle: DataBundle) -> dict:
    """Named metric functions over checkpoints for the tradeoff sweep."""

    def sam_iou(ckpt: Checkpoint) -> float:
        model = model_from_checkpoint(ckpt)
        return evaluate_sam_iou(model, bundle.sam_val, bundle.spec.resolution)

    def zero_shot_acc(ckpt: Checkpoint) -> float:
        model = model_from_checkpoint(ckpt)
        classes = build_class_set(model, bundle.class_names)
        return evaluate_zero_shot_accuracy(
            model, bundle.clip_val, classes, cfg.model.clip_resolutions[0]
        )

    return {"sam_iou": sam_iou, "zero_shot_acc": zero_shot_acc}


def run_wiseft(
    cfg: ExperimentConfig, bundle: DataBundle, a: Checkpoint, b: Checkpoint
) -> list[dict]:
    out = Path(cfg.out_dir) / "wiseft"
    return wiseft_sweep(
        a,
        b,
        cfg.wiseft_alphas,
        make_wiseft_evaluators(cfg, bundle),
        csv_path=out / "table.csv",
        plot_path=out / "tradeoff.png",
    )


def run_report(out_dir) -> list[str]:
    """Regenerate figures from persisted CSVs only; returns written paths."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    out = Path(out_dir)
    report = out / "report"
    report.mkdir(parents=True, exist_ok=True)
    written = []

    curves = []
    for i in (1, 2, 3):
        path = out / "merge" / f"metrics_stage{i}.csv"
        if path.exists():
            curves.append((f"stage {i}", read_csv(path)))
    naive_csv = out / "naive" / "metrics.csv"
    if naive_csv.exists():
        curves.append(("naive control", read_csv(naive_csv)))
    if curves:
        fig, ax = plt.subplots(figsize=(5.5, 3.5))
        for label, rows in curves:
            ax.plot(
                range(1, len(rows) + 1),
                [float(r["loss"]) for r in rows],
                marker="o",
                label=label,
            )
        ax.set_xlabel("epoch")
        ax.set_ylabel("training loss")
        ax.legend()
        fig.tight_layout()
        path = report / "training_curves.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(str(path))

    wiseft_csv = out / "wiseft" / "table.csv"
    if wiseft_csv.exists():
        rows = read_csv(wiseft_csv)
        fig, ax = plt.subplots(figsize=(5, 3.5))
        for metric in ("sam_iou", "zero_shot_acc"):
            ax.plot(
                [float(r["alpha"]) for r in rows],
                [float(r[metric]) for r in rows],
                marker="o",
                label=metric,
            )
        ax.set_xlabel("alpha")
        ax.legend()
        fig.tight_layout()
        path = report / "wiseft_tradeoff.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(str(path))

    forgetting_csv = out / "eval" / "forgetting.csv"
    if forgetting_csv.exists():
        rows = read_csv(forgetting_csv)
        fig, ax = plt.subplots(figsize=(5, 3.5))
        labels = [r["metric"] for r in rows]
        x = range(len(labels))
        ax.bar([i - 0.2 for i in x], [float(r["before"]) for r in rows], 0.4, label="base")
        ax.bar([i + 0.2 for i in x], [float(r["after"]) for r in rows], 0.4, label="merged")
        ax.set_xticks(list(x))
        ax.set_xticklabels(labels)
        ax.legend()
        fig.tight_layout()
        path = report / "forgetting.png"
        fig.savefig(path, dpi=120)
        plt.close(fig)
        written.append(str(path))
    return written


def run_all(cfg: ExperimentConfig, persist_data: bool = False) -> dict:
    """The full desk-scale experiment: data, teachers, merge, control,
    evaluation, tradeoff sweep, figures."""
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cfg.to_json(out / "config.json")
    timings = {}

    t0 = time.time()
    bundle = run_gen_data(cfg, persist=persist_data)
    timings["gen_data"] = time.time() - t0

    t0 = time.time()
    teachers, gates = run_train_teachers(cfg, bundle)
    timings["teachers"] = time.time() - t0

    t0 = time.time()
    merge_ckpts = run_merge(cfg, bundle, teachers)
    timings["merge"] = time.time() - t0

    t0 = time.time()
    naive_ckpt = run_naive_kd(cfg, bundle, teachers)
    timings["naive"] = time.time() - t0

    t0 = time.time()
    eval_summary = run_eval(cfg, bundle, teachers, merge_ckpts["resolution_adapt"])
    timings["eval"] = time.time() - t0

    t0 = time.time()
    wiseft_rows = run_wiseft(cfg, bundle, merge_ckpts["init"], naive_ckpt)
    timings["wiseft"] = time.time() - t0

    run_report(cfg.out_dir)

    summary = {
        "gates": gates,
        "eval": eval_summary,
        "wiseft": wiseft_rows,
        "timings_seconds": {k: round(v, 2) for k, v in timings.items()},
        "config": to_jsonable(cfg),
    }
    with open(out / "summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
    return summary
