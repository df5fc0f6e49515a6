"""Zero-shot inference pipelines: classification, text-prompted semantic
segmentation, geometric-prompted instance segmentation, and the composed
pipeline that refines alignment-head masks with the prompt-driven mask head.

All pipelines are deterministic given (model, image, rng seed) and read-only
over the model.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .errors import InputError
from .model import FG, GeometricPrompt, MergedModel, TextTable

BACKGROUND_NAME = "background"


@dataclass
class ClassEmbeddingSet:
    """Named unit-norm class embeddings; optionally one row is background."""

    names: list[str]
    embeddings: torch.Tensor  # (K, E), unit rows
    background_id: int | None = None

    def __post_init__(self):
        if len(self.names) != len(set(self.names)):
            raise InputError("class names must be unique")
        if len(self.names) != self.embeddings.shape[0]:
            raise InputError("names/embeddings length mismatch")

    def __len__(self) -> int:
        return len(self.names)

    @classmethod
    def from_text_table(
        cls,
        table: TextTable,
        names: list[str],
        class_names: list[str],
        include_background: bool = False,
        templates: bool = True,
    ) -> "ClassEmbeddingSet":
        """Look up inventory classes by name (template-averaged embeddings)."""
        ids = []
        for name in names:
            if name not in class_names:
                raise InputError(f"unknown class {name!r}; inventory: {class_names}")
            ids.append(class_names.index(name))
        rows = table.embeddings(ids, templates=templates)
        background_id = None
        if include_background:
            rows = torch.cat([rows, table.base[table.background_id].unsqueeze(0)])
            names = list(names) + [BACKGROUND_NAME]
            background_id = len(names) - 1
        return cls(names=list(names), embeddings=rows, background_id=background_id)


@dataclass
class LabelMap:
    """Dense per-pixel class ids with a legend."""

    ids: np.ndarray  # (H, W) int64
    legend: dict[int, str] = field(default_factory=dict)


def _upscale(grid: torch.Tensor, size: int) -> torch.Tensor:
    """Bilinear upscale of (..., G, G) logits to (..., size, size)."""
    squeeze = grid.dim() == 2
    if squeeze:
        grid = grid.unsqueeze(0)
    out = F.interpolate(
        grid.unsqueeze(0), size=(size, size), mode="bilinear", align_corners=False
    ).squeeze(0)
    return out.squeeze(0) if squeeze else out


def zero_shot_classify(
    model: MergedModel, image: torch.Tensor, classes: ClassEmbeddingSet
) -> tuple[int, np.ndarray]:
    """Argmax of cosine similarity between the pooled embedding and each class.

    Ties break toward the lowest class id.
    """
    if len(classes) == 0:
        raise InputError("empty class set")
    with torch.no_grad():
        pooled = model.embed_image(image)
        if pooled.dim() == 2:
            pooled = pooled.squeeze(0)
        scores = (classes.embeddings.to(pooled.dtype) @ pooled).cpu().numpy()
    return int(np.argmax(scores)), scores


def _patch_similarities(
    model: MergedModel, feats: torch.Tensor, classes: ClassEmbeddingSet
) -> torch.Tensor:
    """(G, G, K) cosine similarities between patch embeddings and class rows."""
    patch, _ = model.clip_head_forward(feats)
    patch = F.normalize(patch, dim=-1)
    return patch @ classes.embeddings.to(patch.dtype).T


def zero_shot_semseg(
    model: MergedModel, image: torch.Tensor, classes: ClassEmbeddingSet
) -> LabelMap:
    """Per-pixel argmax over per-patch class similarities, upscaled to image size."""
    if len(classes) == 0:
        raise InputError("empty class set")
    size = image.shape[-1]
    with torch.no_grad():
        feats = model.backbone_forward(image)
        if feats.dim() == 4:
            feats = feats.squeeze(0)
        sims = _patch_similarities(model, feats, classes)  # G,G,K
        logits = _upscale(sims.permute(2, 0, 1), size)  # K,H,W
        ids = logits.argmax(dim=0).cpu().numpy().astype(np.int64)
    return LabelMap(ids=ids, legend=dict(enumerate(classes.names)))


def instance_segment(
    model: MergedModel, image: torch.Tensor, boxes: list[tuple[float, float, float, float]]
) -> list[np.ndarray]:
    """One binary mask per prompt box, at image resolution (single backbone pass)."""
    size = image.shape[-1]
    masks = []
    if not boxes:
        return masks
    with torch.no_grad():
        feats = model.backbone_forward(image)
        if feats.dim() == 4:
            feats = feats.squeeze(0)
        for box in boxes:
            prompt = GeometricPrompt(boxes=[box])
            sparse, dense = model.prompt_encode(prompt, size)
            logits = model.mask_decode(feats, sparse, dense)
            mask = _upscale(logits, size) > 0
            masks.append(mask.cpu().numpy())
    return masks


def sample_points_from_logits(
    logits: torch.Tensor,
    threshold: float,
    n: int,
    rng: np.random.Generator,
    resolution: int,
) -> list[tuple[float, float]]:
    """Sample up to n cell centers, weighted by sigmoid(logit), from cells whose
    sigmoid exceeds the threshold; falls back to the single argmax cell.

    Points come back in image coordinates for a `resolution`-sized image.
    """
    if n < 1 or n > 3:
        raise InputError(f"n must be in 1..3, got {n}")
    probs = torch.sigmoid(logits.detach()).cpu().numpy().astype(np.float64)
    gm = probs.shape[-1]
    cell = resolution / gm
    flat = probs.reshape(-1)
    eligible = np.nonzero(flat > threshold)[0]
    if eligible.size == 0:
        idx = [int(np.argmax(flat))]
    else:
        k = min(n, eligible.size)
        weights = flat[eligible] / flat[eligible].sum()
        idx = rng.choice(eligible, size=k, replace=False, p=weights).tolist()
    points = []
    for i in idx:
        row, col = divmod(int(i), gm)
        points.append(((col + 0.5) * cell, (row + 0.5) * cell))
    return points


def compose_heads_semseg(
    model: MergedModel,
    image: torch.Tensor,
    classes: ClassEmbeddingSet,
    threshold: float = 0.5,
    n_points: int = 1,
    rng: np.random.Generator | None = None,
    mask_prior_scale: float = 10.0,
) -> LabelMap:
    """Alignment-head class maps refined per class by the mask head.

    One backbone pass serves both heads. Per present foreground class: its
    similarity map becomes a mask prior plus sampled point prompts, the mask
    head re-decodes it, and pixels take the class with the highest refined
    logit (background where no class is claimed). ``n_points=0`` skips
    refinement entirely and returns the upscaled alignment-head prediction.
    """
    if len(classes) == 0:
        raise InputError("empty class set")
    rng = rng or np.random.default_rng(0)
    size = image.shape[-1]
    legend = dict(enumerate(classes.names))
    with torch.no_grad():
        feats = model.backbone_forward(image)
        if feats.dim() == 4:
            feats = feats.squeeze(0)
        sims = _patch_similarities(model, feats, classes)  # G,G,K
        grid_ids = sims.argmax(dim=-1)

        def clip_only() -> LabelMap:
            up = _upscale(sims.permute(2, 0, 1), size)
            return LabelMap(ids=up.argmax(dim=0).cpu().numpy(), legend=legend)

        if n_points == 0:
            return clip_only()

        present = sorted(set(grid_ids.reshape(-1).tolist()))
        if classes.background_id is not None:
            present = [c for c in present if c != classes.background_id]
        if not present:
            return clip_only()

        g = sims.shape[0]
        refined = torch.full((len(classes), size, size), -torch.inf, dtype=sims.dtype)
        for cls_id in present:
            prior = _upscale(sims[:, :, cls_id] * mask_prior_scale, 4 * g)
            points = sample_points_from_logits(
                prior, threshold, n_points, rng, resolution=size
            )
            prompt = GeometricPrompt(
                points=[(x, y, FG) for x, y in points], mask_prior=prior
            )
            sparse, dense = model.prompt_encode(prompt, size)
            logits = model.mask_decode(feats, sparse, dense)
            refined[cls_id] = _upscale(logits, size)

        best = refined.max(dim=0)
        ids = best.indices.cpu().numpy().astype(np.int64)
        if classes.background_id is not None:
            ids[best.values.cpu().numpy() < 0] = classes.background_id
    return LabelMap(ids=ids, legend=legend)
