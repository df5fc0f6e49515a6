"""Head probing: train a small task head on a frozen backbone.

Used to compare the representations of the segmenter teacher, the aligner
teacher and the merged student. The backbone is byte-asserted unchanged.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .checkpoint import Checkpoint, model_from_checkpoint
from .data import DataBundle, scene_label_map
from .errors import ConfigError, TrainingError
from .metrics import MetricReport, accuracy, miou
from .model import MergedModel, state_bytes
from .training import clip_batch_images

HEAD_KINDS = ("linear", "light_decoder")
TASKS = ("semseg", "classify")


def _make_head(kind: str, in_dim: int, out_dim: int) -> nn.Module:
    if kind == "linear":
        return nn.Conv2d(in_dim, out_dim, kernel_size=1)
    if kind == "light_decoder":
        return nn.Sequential(
            nn.Conv2d(in_dim, 64, kernel_size=3, padding=1),
            nn.GELU(),
            nn.Conv2d(64, out_dim, kernel_size=3, padding=1),
        )
    raise ConfigError(f"unknown head kind {kind!r}; expected one of {HEAD_KINDS}")


def _backbone_features(
    model: MergedModel, images: torch.Tensor, chunk: int = 32
) -> torch.Tensor:
    """(B,C,H,W) -> (B,D,G,G), detached; chunked to bound attention memory."""
    outs = []
    with torch.no_grad():
        for i in range(0, images.shape[0], chunk):
            feats = model.backbone_forward(images[i : i + chunk])
            outs.append(feats.permute(0, 3, 1, 2).contiguous())
    return torch.cat(outs)


def probe_backbone(
    ckpt: Checkpoint,
    head_kind: str,
    task: str,
    data: DataBundle,
    seed: int = 0,
    resolution: int = 128,
    epochs: int = 60,
    batch: int = 32,
    lr: float = 3e-3,
) -> MetricReport:
    """Train a fresh head on frozen backbone features; report the val metric.

    semseg probes train on segmentation-stream scenes against dense class
    maps (background included); classify probes train on alignment samples.
    """
    if task not in TASKS:
        raise ConfigError(f"unknown probe task {task!r}; expected one of {TASKS}")
    model = model_from_checkpoint(ckpt)
    model.eval()
    backbone_before = state_bytes(model.backbone)
    torch.manual_seed(seed)
    num_classes = model.text_table.num_classes
    grid = resolution // model.cfg.patch_size

    if task == "semseg":
        bg = num_classes
        train_scenes, val_scenes = data.sam_train_scenes, data.sam_val_scenes
        import vfmerge.data as vdata

        x_train = _backbone_features(
            model,
            torch.stack(
                [torch.from_numpy(vdata.rasterize(s, resolution)) for s in train_scenes]
            ),
        )
        y_train = torch.stack(
            [torch.from_numpy(scene_label_map(s, grid, bg)) for s in train_scenes]
        )
        head = _make_head(head_kind, model.cfg.embed_dim, num_classes + 1)
        opt = torch.optim.AdamW(head.parameters(), lr=lr, weight_decay=1e-4)
        rng = np.random.default_rng(seed)
        n = x_train.shape[0]
        for _epoch in range(epochs):
            order = rng.permutation(n)
            for i in range(0, n, batch):
                sel = order[i : i + batch]
                logits = head(x_train[sel])
                loss = F.cross_entropy(logits, y_train[sel])
                if not torch.isfinite(loss):
                    raise TrainingError("probe training diverged")
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
        head.eval()
        scores = []
        with torch.no_grad():
            for scene in val_scenes:
                img = torch.from_numpy(vdata.rasterize(scene, resolution)).unsqueeze(0)
                logits = head(_backbone_features(model, img))
                up = F.interpolate(
                    logits, size=(resolution, resolution), mode="bilinear", align_corners=False
                )
                pred = up.argmax(dim=1).squeeze(0).numpy()
                gt = scene_label_map(scene, resolution, bg)
                scores.append(miou(pred, gt, num_classes + 1))
        metric = {"miou": float(np.mean(scores))}
    else:
        x_train = _backbone_features(
            model, clip_batch_images(data.clip_train, resolution)
        ).mean(dim=(2, 3))
        y_train = torch.tensor([s.class_id for s in data.clip_train])
        head_lin = nn.Linear(model.cfg.embed_dim, num_classes)
        opt = torch.optim.AdamW(head_lin.parameters(), lr=lr, weight_decay=1e-4)
        rng = np.random.default_rng(seed)
        n = x_train.shape[0]
        for _epoch in range(epochs):
            order = rng.permutation(n)
            for i in range(0, n, batch):
                sel = order[i : i + batch]
                loss = F.cross_entropy(head_lin(x_train[sel]), y_train[sel])
                if not torch.isfinite(loss):
                    raise TrainingError("probe training diverged")
                opt.zero_grad(set_to_none=True)
                loss.backward()
                opt.step()
        head_lin.eval()
        with torch.no_grad():
            x_val = _backbone_features(
                model, clip_batch_images(data.clip_val, resolution)
            ).mean(dim=(2, 3))
            preds = head_lin(x_val).argmax(dim=-1).tolist()
        metric = {"accuracy": accuracy(preds, [s.class_id for s in data.clip_val])}

    if state_bytes(model.backbone) != backbone_before:
        raise TrainingError("probe modified the frozen backbone")
    return MetricReport(
        metrics=metric,
        seed=seed,
        extra={
            "head_kind": head_kind,
            "task": task,
            "resolution": resolution,
            "backbone_frozen": True,
            "stage": ckpt.metadata.get("stage", ""),
        },
    )
