"""Segmentation and classification metrics plus CSV/JSON emission helpers."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import InputError


def miou(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> float:
    """Mean IoU over the classes present in gt.

    Classes absent from gt contribute nothing, even if predicted.
    """
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise InputError(f"label map shape mismatch: {pred.shape} vs {gt.shape}")
    ious = []
    for cls in range(num_classes):
        gt_c = gt == cls
        if not gt_c.any():
            continue
        pred_c = pred == cls
        inter = np.logical_and(pred_c, gt_c).sum()
        union = np.logical_or(pred_c, gt_c).sum()
        ious.append(inter / union)
    if not ious:
        raise InputError("gt contains no classes in range")
    return float(np.mean(ious))


def binary_iou(pred: np.ndarray, gt: np.ndarray) -> float:
    pred = np.asarray(pred, dtype=bool)
    gt = np.asarray(gt, dtype=bool)
    if pred.shape != gt.shape:
        raise InputError(f"mask shape mismatch: {pred.shape} vs {gt.shape}")
    union = np.logical_or(pred, gt).sum()
    if union == 0:
        return 1.0  # both empty
    return float(np.logical_and(pred, gt).sum() / union)


def mask_iou(preds: list[np.ndarray], gts: list[np.ndarray]) -> float:
    """Mean per-instance IoU over aligned prediction/gt mask lists."""
    if len(preds) != len(gts):
        raise InputError(f"instance count mismatch: {len(preds)} vs {len(gts)}")
    if not preds:
        raise InputError("empty instance lists")
    return float(np.mean([binary_iou(p, g) for p, g in zip(preds, gts)]))


def ap50(preds: list[np.ndarray], gts: list[np.ndarray]) -> float:
    """Fraction of instances with IoU > 0.5 (gt prompts, so lists align)."""
    if len(preds) != len(gts):
        raise InputError(f"instance count mismatch: {len(preds)} vs {len(gts)}")
    if not preds:
        raise InputError("empty instance lists")
    return float(np.mean([binary_iou(p, g) > 0.5 for p, g in zip(preds, gts)]))


def accuracy(pred_ids, true_ids) -> float:
    pred_ids = np.asarray(pred_ids)
    true_ids = np.asarray(true_ids)
    if pred_ids.shape != true_ids.shape:
        raise InputError("prediction/label length mismatch")
    return float((pred_ids == true_ids).mean())


@dataclass
class MetricReport:
    """Named scalar metrics with optional per-class breakdowns."""

    metrics: dict[str, float]
    per_class: dict[str, dict[str, float]] = field(default_factory=dict)
    config_hash: str = ""
    seed: int | None = None
    extra: dict = field(default_factory=dict)

    def to_json(self, path) -> None:
        doc = {
            "metrics": self.metrics,
            "per_class": self.per_class,
            "config_hash": self.config_hash,
            "seed": self.seed,
            **self.extra,
        }
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=2, sort_keys=True)
            fh.write("\n")


def write_csv(path, rows: list[dict], fieldnames: list[str] | None = None) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if fieldnames is None:
        fieldnames = list(rows[0].keys()) if rows else []
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fieldnames)
        writer.writeheader()
        writer.writerows(rows)


def read_csv(path) -> list[dict]:
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))
