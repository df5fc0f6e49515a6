"""Training of the two mini teacher models the merge distills from.

The aligner teacher learns to map an image's pooled embedding onto its
class's frozen text embedding; the segmenter teacher learns supervised
promptable masking with focal+dice. Both use the same architecture family as
the student, so the student can be initialized from the segmenter teacher
directly.
"""

from __future__ import annotations

import numpy as np
import torch

from .config import LossConfig, ModelConfig, TeacherTrainConfig
from .data import DataBundle, SamSample, instance_mask
from .errors import TrainingError
from .losses import cosine_distill, dice_loss, focal_loss
from .model import MergedModel
from .training import clip_batch_images, lr_factor


def _check_finite(loss: torch.Tensor, what: str, step: int) -> None:
    if not torch.isfinite(loss):
        raise TrainingError(f"{what} diverged (non-finite loss) at step {step}")


def train_clip_teacher(
    data: DataBundle,
    model_cfg: ModelConfig,
    tcfg: TeacherTrainConfig,
    seed: int = 0,
) -> tuple[MergedModel, list[dict]]:
    """Train the image-text aligner surrogate on single-shape scenes.

    Targets are the raw frozen text-table rows; resolutions cycle through
    the alignment-task list. Returns the model plus per-epoch loss history.
    The text table never receives gradient (it is a buffer).
    """
    model = MergedModel(model_cfg, seed=seed + 1000)
    params = [
        {"params": list(model.backbone.parameters()), "lr": tcfg.clip_lr},
        {"params": list(model.clip_head.parameters()), "lr": tcfg.clip_lr},
    ]
    optimizer = torch.optim.AdamW(params, weight_decay=tcfg.weight_decay)
    steps_per_epoch = max(1, len(data.clip_train) // tcfg.clip_batch)
    total_steps = tcfg.clip_epochs * steps_per_epoch
    resolutions = model_cfg.clip_resolutions

    history = []
    acc, count = 0.0, 0
    model.train()
    for step in range(total_steps):
        factor = lr_factor(step, total_steps, 0.05)
        for group in optimizer.param_groups:
            group["lr"] = tcfg.clip_lr * factor
        rng = np.random.default_rng((seed, 10, step))
        idx = rng.choice(len(data.clip_train), size=tcfg.clip_batch, replace=False)
        samples = [data.clip_train[i] for i in idx]
        res = resolutions[step % len(resolutions)]
        images = clip_batch_images(samples, res)
        targets = model.text_table.embeddings(
            [s.class_id for s in samples], templates=False
        )
        pooled = model.embed_image(images)
        loss = cosine_distill(pooled, targets).value
        _check_finite(loss, "aligner teacher training", step)
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()
        acc += float(loss.detach())
        count += 1
        if (step + 1) % steps_per_epoch == 0:
            history.append(
                {"epoch": (step + 1) // steps_per_epoch, "loss": acc / count}
            )
            acc, count = 0.0, 0
    model.eval()
    return model, history


def _gt_grid(sample: SamSample, grid: int) -> torch.Tensor:
    """Ground-truth mask rasterized directly at the mask-logit grid."""
    inst = sample.scene.instances[sample.instance_idx]
    return torch.from_numpy(instance_mask(inst, grid).astype(np.float32))


def train_sam_teacher(
    data: DataBundle,
    model_cfg: ModelConfig,
    tcfg: TeacherTrainConfig,
    seed: int = 0,
    loss_cfg: LossConfig | None = None,
) -> tuple[MergedModel, list[dict]]:
    """Train the promptable-segmenter surrogate, supervised with focal+dice.

    Trains backbone + prompt encoder + mask decoder at the high resolution;
    class ids are never consulted. This checkpoint also initializes the
    merge student.
    """
    loss_cfg = loss_cfg or LossConfig()
    model = MergedModel(model_cfg, seed=seed + 2000)
    params = [
        {"params": list(model.backbone.parameters())},
        {"params": list(model.prompt_encoder.parameters())},
        {"params": list(model.mask_decoder.parameters())},
    ]
    optimizer = torch.optim.AdamW(params, lr=tcfg.sam_lr, weight_decay=tcfg.weight_decay)
    steps_per_epoch = max(1, len(data.sam_train) // tcfg.sam_batch)
    total_steps = tcfg.sam_epochs * steps_per_epoch
    res = data.spec.resolution
    logit_grid = 4 * (res // model_cfg.patch_size)

    history = []
    acc, count = 0.0, 0
    model.train()
    for step in range(total_steps):
        factor = lr_factor(step, total_steps, 0.05)
        for group in optimizer.param_groups:
            group["lr"] = tcfg.sam_lr * factor
        rng = np.random.default_rng((seed, 20, step))
        idx = rng.choice(len(data.sam_train), size=tcfg.sam_batch, replace=False)
        samples = [data.sam_train[i] for i in idx]
        images = torch.stack([s.image(res) for s in samples])
        feats = model.backbone_forward(images)
        losses = []
        for i, sample in enumerate(samples):
            sparse, dense = model.prompt_encode(sample.prompt(res), res)
            logits = model.mask_decode(feats[i], sparse, dense)
            gt = _gt_grid(sample, logit_grid)
            losses.append(
                focal_loss(logits, gt, loss_cfg.focal_gamma).value
                + dice_loss(logits, gt).value / loss_cfg.focal_dice_ratio
            )
        loss = torch.stack(losses).mean()
        _check_finite(loss, "segmenter teacher training", step)
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        torch.nn.utils.clip_grad_norm_(model.parameters(), 1.0)
        optimizer.step()
        acc += float(loss.detach())
        count += 1
        if (step + 1) % steps_per_epoch == 0:
            history.append(
                {"epoch": (step + 1) // steps_per_epoch, "loss": acc / count}
            )
            acc, count = 0.0, 0
    model.eval()
    return model, history
