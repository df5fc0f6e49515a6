"""Task-level evaluation harnesses and the learning/forgetting report."""

from __future__ import annotations

import numpy as np
import torch

from .config import config_hash
from .data import DataBundle, SamSample, Scene, rasterize, scene_label_map
from .errors import InputError
from .metrics import MetricReport, accuracy, binary_iou, miou, write_csv
from .model import MergedModel
from .pipelines import (
    ClassEmbeddingSet,
    compose_heads_semseg,
    zero_shot_classify,
    zero_shot_semseg,
)
from .training import clip_batch_images


def build_class_set(
    model: MergedModel, class_names: list[str], include_background: bool = False
) -> ClassEmbeddingSet:
    """Template-averaged embeddings for the whole inventory, in id order."""
    return ClassEmbeddingSet.from_text_table(
        model.text_table, class_names, class_names, include_background=include_background
    )


def evaluate_zero_shot_accuracy(
    model: MergedModel,
    samples,
    classes: ClassEmbeddingSet,
    resolution: int = 64,
    batch: int = 64,
) -> float:
    """Batched zero-shot classification accuracy over alignment samples."""
    model.eval()
    preds, labels = [], []
    with torch.no_grad():
        for i in range(0, len(samples), batch):
            chunk = samples[i : i + batch]
            pooled = model.embed_image(clip_batch_images(chunk, resolution))
            scores = pooled @ classes.embeddings.to(pooled.dtype).T
            preds.extend(scores.argmax(dim=-1).tolist())
            labels.extend(s.class_id for s in chunk)
    return accuracy(preds, labels)


def evaluate_sam_iou(
    model: MergedModel, samples: list[SamSample], resolution: int
) -> float:
    """Mean mask IoU using each sample's own stored prompt (point or box)."""
    model.eval()
    ious = []
    with torch.no_grad():
        for sample in samples:
            res = resolution
            image = sample.image(res)
            logits = model.predict_mask(image, sample.prompt(res))
            pred = (
                torch.nn.functional.interpolate(
                    logits[None, None], size=(res, res), mode="bilinear", align_corners=False
                ).squeeze()
                > 0
            ).numpy()
            ious.append(binary_iou(pred, sample.gt_mask(res)))
    return float(np.mean(ious))


def evaluate_semseg_miou(
    model: MergedModel,
    scenes: list[Scene],
    classes: ClassEmbeddingSet,
    resolution: int,
    mode: str = "clip",
    threshold: float = 0.5,
    n_points: int = 1,
    seed: int = 0,
) -> float:
    """Mean per-scene mIoU of text-prompted segmentation (clip or composed)."""
    model.eval()
    if classes.background_id is None:
        raise InputError("semseg evaluation needs a class set with a background row")
    scores = []
    for i, scene in enumerate(scenes):
        image = torch.from_numpy(rasterize(scene, resolution))
        gt = scene_label_map(scene, resolution, classes.background_id)
        if mode == "clip":
            pred = zero_shot_semseg(model, image, classes)
        elif mode == "composed":
            pred = compose_heads_semseg(
                model,
                image,
                classes,
                threshold=threshold,
                n_points=n_points,
                rng=np.random.default_rng((seed, i)),
            )
        else:
            raise ValueError(f"unknown semseg mode {mode!r}")
        scores.append(miou(pred.ids, gt, len(classes)))
    return float(np.mean(scores))


def evaluate_checkpoint_suite(
    model: MergedModel, data: DataBundle, clip_resolution: int = 64
) -> dict[str, float]:
    """The standard before/after suite: segmentation IoU + zero-shot accuracy."""
    classes = build_class_set(model, data.class_names)
    return {
        "sam_iou": evaluate_sam_iou(model, data.sam_val, data.spec.resolution),
        "zero_shot_acc": evaluate_zero_shot_accuracy(
            model, data.clip_val, classes, clip_resolution
        ),
    }


def forgetting_report(
    base_model: MergedModel,
    merged_model: MergedModel,
    data: DataBundle,
    seed: int | None = None,
    csv_path=None,
    json_path=None,
) -> MetricReport:
    """Absolute and relative metric deltas between two checkpoints."""
    before = evaluate_checkpoint_suite(base_model, data)
    after = evaluate_checkpoint_suite(merged_model, data)
    rows = []
    for metric in sorted(before):
        b, a = before[metric], after[metric]
        rows.append(
            {
                "metric": metric,
                "before": b,
                "after": a,
                "delta": a - b,
                "relative": (a / b) if b else float("nan"),
            }
        )
    if csv_path is not None:
        write_csv(csv_path, rows, ["metric", "before", "after", "delta", "relative"])
    report = MetricReport(
        metrics={f"{r['metric']}_delta": r["delta"] for r in rows},
        config_hash=config_hash(data.spec),
        seed=seed,
        extra={"rows": rows},
    )
    if json_path is not None:
        report.to_json(json_path)
    return report


def classify_demo(model: MergedModel, data: DataBundle, n: int = 5, resolution: int = 64):
    """Tiny smoke helper: classify a few val samples, return (pred, true) pairs."""
    classes = build_class_set(model, data.class_names)
    out = []
    for s in data.clip_val[:n]:
        pred, _ = zero_shot_classify(model, s.image(resolution), classes)
        out.append((pred, s.class_id))
    return out
