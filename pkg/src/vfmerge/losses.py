"""Training objectives: cosine distillation, focal, dice, and their combinations.

All losses are pure functions of tensors, dtype-agnostic (float64 works for
finite-difference checks) and return a :class:`LossValue` whose ``value``
keeps the autograd graph while ``components`` holds a detached breakdown.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F

from .config import LossConfig
from .errors import InputError, NumericError


@dataclass
class LossValue:
    """Nonnegative scalar loss plus a named component breakdown."""

    value: torch.Tensor
    components: dict[str, float] = field(default_factory=dict)

    def item(self) -> float:
        return float(self.value.detach())


def _check_shapes(a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise InputError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def cosine_distill(student: torch.Tensor, teacher: torch.Tensor) -> LossValue:
    """1 - <student, teacher> averaged over the batch; inputs are unit-norm.

    Range [0, 2]: 0 for identical embeddings, 2 for antipodal ones.
    """
    _check_shapes(student, teacher)
    if not torch.isfinite(student).all() or not torch.isfinite(teacher).all():
        raise NumericError("non-finite embedding passed to cosine_distill")
    loss = (1.0 - (student * teacher).sum(dim=-1)).mean()
    return LossValue(loss, {"cosine": float(loss.detach())})


def focal_loss(logits: torch.Tensor, targets: torch.Tensor, gamma: float = 2.0) -> LossValue:
    """Mean over pixels of -(1 - p_t)^gamma * log(p_t).

    p_t is the predicted probability of the true label; computed via
    log-sigmoid so saturated logits stay finite. gamma=0 reduces to binary
    cross-entropy.
    """
    _check_shapes(logits, targets)
    targets = targets.to(logits.dtype)
    log_p1 = F.logsigmoid(logits)
    log_p0 = F.logsigmoid(-logits)
    log_pt = targets * log_p1 + (1.0 - targets) * log_p0
    one_minus_pt = targets * torch.sigmoid(-logits) + (1.0 - targets) * torch.sigmoid(logits)
    loss = (one_minus_pt.pow(gamma) * (-log_pt)).mean()
    return LossValue(loss, {"focal": float(loss.detach())})


def dice_loss(logits: torch.Tensor, targets: torch.Tensor, eps: float = 1.0) -> LossValue:
    """1 - (2*sum(p*t) + eps) / (sum(p) + sum(t) + eps) with p = sigmoid(logits).

    Grids with a leading batch dim get a per-sample dice averaged over the
    batch; eps=1 makes the empty-mask case come out near zero.
    """
    _check_shapes(logits, targets)
    targets = targets.to(logits.dtype)
    p = torch.sigmoid(logits)
    if logits.dim() > 2:
        dims = tuple(range(logits.dim()))[-2:]
    else:
        dims = tuple(range(logits.dim()))
    inter = (p * targets).sum(dim=dims)
    denom = p.sum(dim=dims) + targets.sum(dim=dims)
    loss = (1.0 - (2.0 * inter + eps) / (denom + eps)).mean()
    return LossValue(loss, {"dice": float(loss.detach())})


def fd_loss(
    student_logits: torch.Tensor, teacher_scores: torch.Tensor, cfg: LossConfig | None = None
) -> LossValue:
    """Focal+dice distillation: binarize teacher scores, then focal + dice/ratio.

    A pixel counts as foreground only if the teacher score strictly exceeds
    the binarize threshold. Default weighting is focal:dice = 20:1.
    """
    cfg = cfg or LossConfig()
    _check_shapes(student_logits, teacher_scores)
    targets = (teacher_scores > cfg.teacher_binarize_threshold).to(student_logits.dtype)
    focal = focal_loss(student_logits, targets, cfg.focal_gamma)
    dice = dice_loss(student_logits, targets)
    value = focal.value + dice.value / cfg.focal_dice_ratio
    return LossValue(value, {"focal": focal.item(), "dice": dice.item()})


def total_loss(l_clip: LossValue, l_sam: LossValue, lambda_sam: float) -> LossValue:
    """Multi-task total: l_clip + lambda * l_sam, breakdown retained."""
    for lv in (l_clip, l_sam):
        if not torch.isfinite(lv.value):
            raise NumericError("non-finite loss term in total_loss")
    value = l_clip.value + lambda_sam * l_sam.value
    components = {"clip": l_clip.item(), "sam": l_sam.item()}
    components.update({f"clip/{k}": v for k, v in l_clip.components.items()})
    components.update({f"sam/{k}": v for k, v in l_sam.components.items()})
    return LossValue(value, components)


def zero_loss(like: torch.Tensor | None = None) -> LossValue:
    """A zero scalar, for ablations where one stream is empty."""
    dtype = like.dtype if like is not None else torch.float32
    return LossValue(torch.zeros((), dtype=dtype), {})
