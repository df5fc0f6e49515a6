"""Three-stage merge trainer: head probing, rehearsal-based multi-task
distillation, and resolution adaptation.

Batches are a pure function of (seed, step) so runs are reproducible and a
resumed run consumes exactly the batches the uninterrupted one would have.
"""

from __future__ import annotations

import copy
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .checkpoint import Checkpoint, checkpoint_from_model
from .config import LossConfig, StagePlan
from .data import DataBundle, ClipSample, SamSample
from .errors import ConfigError, TrainingError
from .losses import LossValue, cosine_distill, fd_loss, total_loss, zero_loss
from .metrics import write_csv
from .model import MergedModel, init_clip_head_from_backbone


def set_deterministic(seed: int) -> None:
    """Single-threaded deterministic mode; call before building models."""
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True)
    torch.set_num_threads(1)


@dataclass
class TeacherBundle:
    clip: MergedModel
    sam: MergedModel

    def eval(self) -> "TeacherBundle":
        self.clip.eval()
        self.sam.eval()
        return self


class TeacherCache:
    """Optional precomputed teacher outputs, keyed by (stream, sample id, res).

    The reference path recomputes teacher forwards every step; the cached
    path must agree with it to 1e-6 (it is the same function, memoized).
    """

    def __init__(self):
        self.store: dict[tuple, torch.Tensor] = {}
        self.hits = 0
        self.misses = 0

    def get_or_compute(self, key: tuple, fn) -> torch.Tensor:
        if key in self.store:
            self.hits += 1
            return self.store[key]
        self.misses += 1
        value = fn().detach()
        self.store[key] = value
        return value


def clip_batch_images(samples: list[ClipSample], resolution: int) -> torch.Tensor:
    return torch.stack([s.image(resolution) for s in samples])


def clip_batch_size(plan: StagePlan, resolution: int) -> int:
    """Images per alignment batch at a given resolution.

    plan.n_clip is the count at the lowest planned resolution; higher
    resolutions get proportionally fewer images (constant pixel throughput,
    mirroring variable-batch sampling), never fewer than 4.
    """
    base = min(plan.resolutions)
    scaled = int(round(plan.n_clip * (base / resolution) ** 2))
    return max(4, min(plan.n_clip, scaled))


def make_mixed_batch(
    clip_data: list[ClipSample],
    sam_data: list[SamSample],
    plan: StagePlan,
    step: int,
    seed: int,
    sam_resolution: int,
) -> tuple[dict, dict]:
    """Deterministic batches for one step.

    The alignment batch cycles through plan.resolutions round-robin (batch
    size scaled per resolution); the segmentation batch always runs at the
    high resolution.
    """
    if plan.n_clip > 0 and not clip_data:
        raise ConfigError("alignment dataset empty but n_clip > 0")
    if plan.n_sam > 0 and not sam_data:
        raise ConfigError("segmentation dataset empty but n_sam > 0")
    rng = np.random.default_rng((seed, step))
    clip_batch: dict = {"samples": [], "images": None, "resolution": None}
    if plan.n_clip > 0:
        res = plan.resolutions[step % len(plan.resolutions)]
        n_images = clip_batch_size(plan, res)
        idx = rng.choice(len(clip_data), size=n_images, replace=len(clip_data) < n_images)
        samples = [clip_data[i] for i in idx]
        clip_batch = {
            "samples": samples,
            "images": clip_batch_images(samples, res),
            "resolution": res,
        }
    sam_batch: dict = {"samples": [], "images": None, "resolution": sam_resolution}
    if plan.n_sam > 0:
        idx = rng.choice(len(sam_data), size=plan.n_sam, replace=len(sam_data) < plan.n_sam)
        samples = [sam_data[i] for i in idx]
        sam_batch = {
            "samples": samples,
            "images": torch.stack([s.image(sam_resolution) for s in samples]),
            "resolution": sam_resolution,
        }
    return clip_batch, sam_batch


def build_param_groups(model: MergedModel, plan: StagePlan) -> list[dict]:
    """Optimizer param groups for the trainable set, with per-group LRs.

    Frozen groups are excluded entirely; the text table is a buffer and can
    never appear here.
    """
    groups = []
    named = model.param_groups()
    for name in plan.trainable:
        if name not in named:
            raise ConfigError(f"unknown param group {name!r}")
        mult = plan.lr_multipliers.get(name, 1.0)
        groups.append(
            {"params": named[name], "lr": plan.base_lr * mult, "name": name, "mult": mult}
        )
    return groups


def lr_factor(step: int, total_steps: int, warmup_fraction: float) -> float:
    """Cosine decay with linear warmup; factor in (0, 1]."""
    warmup = max(1, int(round(warmup_fraction * total_steps)))
    if step < warmup:
        return (step + 1) / warmup
    span = max(1, total_steps - warmup)
    return 0.5 * (1.0 + math.cos(math.pi * (step - warmup) / span))


def apply_freeze(model: MergedModel, plan: StagePlan) -> None:
    trainable = set(plan.trainable)
    for name, params in model.param_groups().items():
        flag = name in trainable
        for p in params:
            p.requires_grad_(flag)


@dataclass
class StageResult:
    checkpoint: Checkpoint
    model: MergedModel
    history: list[dict]
    val_cosine_before: float
    val_cosine_after: float


def evaluate_val_cosine(
    model: MergedModel,
    teacher_clip: MergedModel,
    samples: list[ClipSample],
    resolution: int = 64,
    batch: int = 64,
) -> float:
    """Mean cosine-distillation loss on a validation split."""
    model.eval()
    losses = []
    with torch.no_grad():
        for i in range(0, len(samples), batch):
            images = clip_batch_images(samples[i : i + batch], resolution)
            student = model.embed_image(images)
            teacher = teacher_clip.embed_image(images)
            losses.append(cosine_distill(student, teacher).item() * len(samples[i : i + batch]))
    return float(sum(losses) / max(1, len(samples)))


def _sam_distill_loss(
    model: MergedModel,
    teachers: TeacherBundle,
    sam_batch: dict,
    loss_cfg: LossConfig,
    cache: TeacherCache | None,
) -> LossValue:
    samples = sam_batch["samples"]
    if not samples:
        return zero_loss()
    res = sam_batch["resolution"]
    feats = model.backbone_forward(sam_batch["images"])
    per_sample = []
    for i, sample in enumerate(samples):
        prompt = sample.prompt(res)
        sparse, dense = model.prompt_encode(prompt, res)
        student_logits = model.mask_decode(feats[i], sparse, dense)

        def teacher_fn(sample=sample, prompt=prompt):
            with torch.no_grad():
                return teachers.sam.predict_mask(sample.image(res), prompt)

        if cache is not None:
            teacher_scores = cache.get_or_compute(("sam", sample.sample_id, res), teacher_fn)
        else:
            teacher_scores = teacher_fn()
        per_sample.append(fd_loss(student_logits, teacher_scores, loss_cfg).value)
    value = torch.stack(per_sample).mean()
    return LossValue(value, {"fd": float(value.detach())})


def _clip_distill_loss(
    model: MergedModel,
    teachers: TeacherBundle,
    clip_batch: dict,
    cache: TeacherCache | None,
) -> LossValue:
    samples = clip_batch["samples"]
    if not samples:
        return zero_loss()
    res = clip_batch["resolution"]
    student = model.embed_image(clip_batch["images"])
    if cache is not None:
        rows = [
            cache.get_or_compute(
                ("clip", s.sample_id, res),
                lambda s=s: _teacher_embed_one(teachers.clip, s, res),
            )
            for s in samples
        ]
        teacher = torch.stack(rows)
    else:
        with torch.no_grad():
            teacher = teachers.clip.embed_image(clip_batch["images"])
    return cosine_distill(student, teacher)


def _teacher_embed_one(teacher: MergedModel, sample: ClipSample, res: int) -> torch.Tensor:
    with torch.no_grad():
        return teacher.embed_image(sample.image(res))


def save_train_state(path, model, optimizer, step, history, epoch_acc, epoch_count) -> None:
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    torch.save(
        {
            "model": model.state_dict(),
            "optimizer": optimizer.state_dict(),
            "step": step,
            "history": history,
            "epoch_acc": epoch_acc,
            "epoch_count": epoch_count,
        },
        path,
    )


def run_stage(
    model: MergedModel,
    teachers: TeacherBundle,
    data: DataBundle,
    plan: StagePlan,
    loss_cfg: LossConfig,
    seed: int,
    *,
    cache: TeacherCache | None = None,
    metrics_csv=None,
    state_path=None,
    resume_state=None,
    stop_after_steps: int | None = None,
) -> StageResult:
    """Run one training stage and return the tagged checkpoint.

    ``stop_after_steps`` + ``state_path`` support interrupt/resume testing;
    a resumed run is bit-identical to the uninterrupted one in deterministic
    mode because batches and LRs depend only on (seed, step).
    """
    teachers.eval()
    apply_freeze(model, plan)
    groups = build_param_groups(model, plan)
    optimizer = torch.optim.AdamW(
        [{"params": g["params"], "lr": g["lr"]} for g in groups],
        betas=(0.9, 0.999),
        weight_decay=plan.weight_decay,
    )
    steps_per_epoch = max(1, len(data.clip_train) // max(1, plan.n_clip))
    total_steps = plan.epochs * steps_per_epoch

    start_step = 0
    history: list[dict] = []
    epoch_acc: dict[str, float] = {}
    epoch_count = 0
    if resume_state is not None:
        state = torch.load(resume_state, weights_only=False)
        model.load_state_dict(state["model"])
        optimizer.load_state_dict(state["optimizer"])
        start_step = state["step"]
        history = state["history"]
        epoch_acc = state["epoch_acc"]
        epoch_count = state["epoch_count"]

    val_before = evaluate_val_cosine(model, teachers.clip, data.clip_val)
    model.train()

    for step in range(start_step, total_steps):
        if stop_after_steps is not None and step >= start_step + stop_after_steps:
            if state_path is not None:
                save_train_state(state_path, model, optimizer, step, history, epoch_acc, epoch_count)
            break
        factor = lr_factor(step, total_steps, plan.warmup_fraction)
        for group, spec_group in zip(optimizer.param_groups, groups):
            group["lr"] = spec_group["lr"] * factor

        clip_batch, sam_batch = make_mixed_batch(
            data.clip_train, data.sam_train, plan, step, seed, data.spec.resolution
        )
        l_clip = _clip_distill_loss(model, teachers, clip_batch, cache)
        l_sam = _sam_distill_loss(model, teachers, sam_batch, loss_cfg, cache)
        loss = total_loss(l_clip, l_sam, loss_cfg.lambda_sam)
        if not torch.isfinite(loss.value):
            raise TrainingError(f"non-finite loss at stage {plan.stage} step {step}")

        optimizer.zero_grad(set_to_none=True)
        loss.value.backward()
        if plan.grad_clip > 0:
            torch.nn.utils.clip_grad_norm_(
                [p for g in groups for p in g["params"]], plan.grad_clip
            )
        optimizer.step()

        epoch_acc["loss"] = epoch_acc.get("loss", 0.0) + loss.item()
        epoch_acc["clip"] = epoch_acc.get("clip", 0.0) + l_clip.item()
        epoch_acc["sam"] = epoch_acc.get("sam", 0.0) + l_sam.item()
        epoch_count += 1
        if (step + 1) % steps_per_epoch == 0:
            epoch = (step + 1) // steps_per_epoch
            history.append(
                {
                    "stage": plan.stage,
                    "epoch": epoch,
                    "step": step + 1,
                    "loss": epoch_acc["loss"] / epoch_count,
                    "clip_loss": epoch_acc["clip"] / epoch_count,
                    "sam_loss": epoch_acc["sam"] / epoch_count,
                    "lr_factor": factor,
                }
            )
            epoch_acc, epoch_count = {}, 0

    model.eval()
    val_after = evaluate_val_cosine(model, teachers.clip, data.clip_val)
    if metrics_csv is not None and history:
        write_csv(metrics_csv, history)
    ckpt = checkpoint_from_model(model, stage=plan.stage, seed=seed)
    return StageResult(ckpt, model, history, val_before, val_after)


def _require_stage(plan: StagePlan, expected: str) -> None:
    if plan.stage != expected:
        raise ConfigError(f"plan.stage must be {expected!r}, got {plan.stage!r}")


def run_stage_head_probe(model, teachers, data, plan, loss_cfg, seed, **kw) -> StageResult:
    """Stage I: only the alignment head trains, against the frozen aligner."""
    _require_stage(plan, "head_probe")
    return run_stage(model, teachers, data, plan, loss_cfg, seed, **kw)


def run_stage_multitask(model, teachers, data, plan, loss_cfg, seed, **kw) -> StageResult:
    """Stage II: all heads and the backbone train with per-group LRs."""
    _require_stage(plan, "multitask")
    return run_stage(model, teachers, data, plan, loss_cfg, seed, **kw)


def run_stage_resolution_adapt(model, teachers, data, plan, loss_cfg, seed, **kw) -> StageResult:
    """Stage III: alignment head only, cycling up to the high resolution."""
    _require_stage(plan, "resolution_adapt")
    return run_stage(model, teachers, data, plan, loss_cfg, seed, **kw)


def init_student_from_sam_teacher(sam_teacher: MergedModel, head_seed: int = 0) -> MergedModel:
    """Student starts as a copy of the segmentation teacher; the alignment
    head is then re-initialized from the backbone's last layer."""
    student = copy.deepcopy(sam_teacher)
    student.forward_counter = 0
    init_clip_head_from_backbone(student, seed=head_seed)
    return student
