"""Independent scalar reference implementations used to check the losses and
metrics. Deliberately written with math/numpy loops, never with torch, so
they share no code path with the implementations under test.
"""

from __future__ import annotations

import math

import numpy as np


def sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def cosine_oracle(student: np.ndarray, teacher: np.ndarray) -> float:
    student = np.atleast_2d(student)
    teacher = np.atleast_2d(teacher)
    vals = [1.0 - float(np.dot(s, t)) for s, t in zip(student, teacher)]
    return float(np.mean(vals))


def bce_oracle(logits: np.ndarray, targets: np.ndarray) -> float:
    total = 0.0
    for logit, t in zip(logits.ravel(), targets.ravel()):
        p = sigmoid(float(logit))
        p_t = p if t == 1 else 1.0 - p
        total += -math.log(max(p_t, 1e-300))
    return total / logits.size


def focal_oracle(logits: np.ndarray, targets: np.ndarray, gamma: float) -> float:
    total = 0.0
    for logit, t in zip(logits.ravel(), targets.ravel()):
        p = sigmoid(float(logit))
        p_t = p if t == 1 else 1.0 - p
        total += (1.0 - p_t) ** gamma * (-math.log(max(p_t, 1e-300)))
    return total / logits.size


def dice_oracle(logits: np.ndarray, targets: np.ndarray, eps: float = 1.0) -> float:
    p = np.array([sigmoid(float(v)) for v in logits.ravel()])
    t = targets.ravel().astype(np.float64)
    inter = float((p * t).sum())
    denom = float(p.sum() + t.sum())
    return 1.0 - (2.0 * inter + eps) / (denom + eps)


def fd_oracle(
    student: np.ndarray,
    teacher: np.ndarray,
    gamma: float = 2.0,
    ratio: float = 20.0,
    threshold: float = 0.0,
) -> float:
    targets = (teacher > threshold).astype(np.float64)
    return focal_oracle(student, targets, gamma) + dice_oracle(student, targets) / ratio


def bilinear_oracle(grid: np.ndarray, target: int) -> np.ndarray:
    """Corner-aligned bilinear resample of (G, G, D) to (target, target, D)."""
    gb = grid.shape[0]
    if gb == 1:
        return np.broadcast_to(grid, (target, target, grid.shape[2])).copy()
    out = np.zeros((target, target, grid.shape[2]), dtype=np.float64)
    scale = (gb - 1) / (target - 1) if target > 1 else 0.0
    for i in range(target):
        for j in range(target):
            y, x = i * scale, j * scale
            y0, x0 = int(math.floor(y)), int(math.floor(x))
            y1, x1 = min(y0 + 1, gb - 1), min(x0 + 1, gb - 1)
            wy, wx = y - y0, x - x0
            out[i, j] = (
                grid[y0, x0] * (1 - wy) * (1 - wx)
                + grid[y0, x1] * (1 - wy) * wx
                + grid[y1, x0] * wy * (1 - wx)
                + grid[y1, x1] * wy * wx
            )
    return out


def miou_oracle(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> float:
    """Set-counting mIoU over classes present in gt."""
    ious = []
    for cls in range(num_classes):
        gt_set = {tuple(p) for p in np.argwhere(gt == cls)}
        if not gt_set:
            continue
        pred_set = {tuple(p) for p in np.argwhere(pred == cls)}
        union = gt_set | pred_set
        ious.append(len(gt_set & pred_set) / len(union))
    return float(np.mean(ious))


def mask_iou_oracle(pred: np.ndarray, gt: np.ndarray) -> float:
    pred_set = {tuple(p) for p in np.argwhere(np.asarray(pred, dtype=bool))}
    gt_set = {tuple(p) for p in np.argwhere(np.asarray(gt, dtype=bool))}
    union = pred_set | gt_set
    if not union:
        return 1.0
    return len(pred_set & gt_set) / len(union)
