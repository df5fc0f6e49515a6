"""Synthetic shapes scenes and the two rehearsal datasets built from them.

A scene is a resolution-independent recipe (shape placements in normalized
coordinates plus a texture seed), so the same scene can be rasterized at
64/128px for the alignment stream and 256px for the segmentation stream.
Generation is a pure function of (spec, seed).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
import torch
from PIL import Image

from .config import DataConfig, SceneSpec, to_jsonable
from .errors import InputError
from .model import FG, GeometricPrompt

COLOR_RGB = {
    "red": (0.85, 0.15, 0.15),
    "green": (0.15, 0.75, 0.20),
    "blue": (0.15, 0.25, 0.85),
    "yellow": (0.85, 0.80, 0.15),
}

_PLACEMENT_GAP = 0.02  # normalized separation between instance supports


@dataclass(frozen=True)
class InstanceSpec:
    class_id: int
    shape: str
    color: tuple[float, float, float]
    cx: float
    cy: float
    size: float


@dataclass(frozen=True)
class Scene:
    instances: tuple[InstanceSpec, ...]
    texture_seed: int
    base_gray: float
    grad: tuple[float, float]
    noise: float = 0.05


def _support_radius(shape: str, size: float) -> float:
    if shape == "circle":
        return size
    if shape == "square":
        return size * 1.4143
    if shape == "triangle":
        return size * 1.15
    if shape == "cross":
        return size * 1.06
    raise InputError(f"unknown shape {shape!r}")


def sample_scene(spec: SceneSpec, rng: np.random.Generator) -> Scene:
    """Draw shape placements with disjoint supports (rejection sampling)."""
    n = int(rng.integers(spec.min_instances, spec.max_instances + 1))
    placed: list[InstanceSpec] = []
    radii: list[float] = []
    for _ in range(n):
        for _attempt in range(200):
            shape = spec.shapes[int(rng.integers(len(spec.shapes)))]
            color_name = spec.colors[int(rng.integers(len(spec.colors)))]
            class_id = spec.shapes.index(shape) * len(spec.colors) + spec.colors.index(
                color_name
            )
            size = float(rng.uniform(spec.min_size, spec.max_size))
            rs = _support_radius(shape, size)
            lo, hi = rs + _PLACEMENT_GAP, 1.0 - rs - _PLACEMENT_GAP
            if lo >= hi:
                continue
            cx = float(rng.uniform(lo, hi))
            cy = float(rng.uniform(lo, hi))
            if all(
                (cx - p.cx) ** 2 + (cy - p.cy) ** 2 >= (rs + pr + _PLACEMENT_GAP) ** 2
                for p, pr in zip(placed, radii)
            ):
                base = COLOR_RGB[color_name]
                jitter = rng.uniform(-0.05, 0.05, size=3)
                color = tuple(float(np.clip(c + j, 0.0, 1.0)) for c, j in zip(base, jitter))
                placed.append(InstanceSpec(class_id, shape, color, cx, cy, size))
                radii.append(rs)
                break
        # an unplaceable instance is silently dropped; the draw stays deterministic
    return Scene(
        instances=tuple(placed),
        texture_seed=int(rng.integers(2**31)),
        base_gray=float(rng.uniform(0.18, 0.42)),
        grad=(float(rng.uniform(-0.08, 0.08)), float(rng.uniform(-0.08, 0.08))),
        noise=spec.noise_level,
    )


def instance_mask(inst: InstanceSpec, resolution: int) -> np.ndarray:
    """Boolean (R, R) mask of one instance; pixel centers tested exactly."""
    coords = (np.arange(resolution) + 0.5) / resolution
    xx, yy = np.meshgrid(coords, coords)  # xx: columns, yy: rows
    dx, dy = xx - inst.cx, yy - inst.cy
    s = inst.size
    if inst.shape == "circle":
        return dx**2 + dy**2 <= s**2
    if inst.shape == "square":
        return (np.abs(dx) <= s) & (np.abs(dy) <= s)
    if inst.shape == "triangle":
        # apex-up triangle: apex (0,-s), base corners (+-0.95s, +0.75s)
        v0 = np.array([0.0, -s])
        v1 = np.array([-0.95 * s, 0.75 * s])
        v2 = np.array([0.95 * s, 0.75 * s])

        def half_plane(a, b):
            return (b[0] - a[0]) * (dy - a[1]) - (b[1] - a[1]) * (dx - a[0])

        # vertices wind clockwise in screen coords (y down), so interior is <= 0
        d0, d1, d2 = half_plane(v0, v1), half_plane(v1, v2), half_plane(v2, v0)
        return (d0 <= 0) & (d1 <= 0) & (d2 <= 0)
    if inst.shape == "cross":
        bar = s / 3.0
        horiz = (np.abs(dx) <= s) & (np.abs(dy) <= bar)
        vert = (np.abs(dx) <= bar) & (np.abs(dy) <= s)
        return horiz | vert
    raise InputError(f"unknown shape {inst.shape!r}")


def _texture(scene: Scene, resolution: int) -> np.ndarray:
    """Smooth low-frequency background, consistent across resolutions."""
    rng = np.random.default_rng(scene.texture_seed)
    coarse = rng.normal(0.0, 1.0, size=(1, 1, 16, 16)).astype(np.float32)
    smooth = torch.nn.functional.interpolate(
        torch.from_numpy(coarse), size=(resolution, resolution),
        mode="bilinear", align_corners=True,
    ).numpy()[0, 0]
    coords = (np.arange(resolution, dtype=np.float32) + 0.5) / resolution
    xx, yy = np.meshgrid(coords, coords)
    gx, gy = scene.grad
    return scene.base_gray + gx * xx + gy * yy + 0.05 * smooth


def rasterize(scene: Scene, resolution: int) -> np.ndarray:
    """Scene -> float32 image (3, R, R) in [0, 1]."""
    bg = _texture(scene, resolution)
    img = np.stack([bg, bg, bg]).astype(np.float32)
    rng = np.random.default_rng((scene.texture_seed, resolution))
    img += rng.normal(0.0, scene.noise, size=img.shape).astype(np.float32)
    for inst in scene.instances:
        mask = instance_mask(inst, resolution)
        for ch in range(3):
            img[ch][mask] = inst.color[ch]
    return np.clip(img, 0.0, 1.0)


def tight_box(mask: np.ndarray) -> tuple[float, float, float, float]:
    """Pixel box (x0, y0, x1, y1) spanning min/max mask coordinates."""
    rows, cols = np.nonzero(mask)
    if rows.size == 0:
        raise InputError("cannot box an empty mask")
    return (float(cols.min()), float(rows.min()), float(cols.max() + 1), float(rows.max() + 1))


def generate_scene(spec: SceneSpec, seed: int):
    """One rasterized scene: (image tensor (3,R,R), [(class_id, mask, box), ...])."""
    scene = sample_scene(spec, np.random.default_rng((99, seed)))
    image = torch.from_numpy(rasterize(scene, spec.resolution))
    out = []
    for inst in scene.instances:
        mask = instance_mask(inst, spec.resolution)
        out.append((inst.class_id, mask, tight_box(mask)))
    return image, out


def scene_label_map(scene: Scene, resolution: int, background_id: int) -> np.ndarray:
    """Dense int map: instance pixels get their class id, the rest background."""
    label = np.full((resolution, resolution), background_id, dtype=np.int64)
    for inst in scene.instances:
        label[instance_mask(inst, resolution)] = inst.class_id
    return label


# --- samples and bundles --------------------------------------------------


@dataclass(frozen=True)
class ClipSample:
    """Single-instance scene; class_id is for teacher training and eval only."""

    scene: Scene
    class_id: int
    sample_id: int

    def image(self, resolution: int) -> torch.Tensor:
        return torch.from_numpy(rasterize(self.scene, resolution))


@dataclass(frozen=True)
class SamSample:
    """One (image, prompt, mask) triple; prompts live in normalized coords."""

    scene: Scene
    scene_id: int
    instance_idx: int
    prompt_kind: str  # "point" | "box"
    point_norm: tuple[float, float]
    box_norm: tuple[float, float, float, float]
    sample_id: int

    def image(self, resolution: int) -> torch.Tensor:
        return torch.from_numpy(rasterize(self.scene, resolution))

    def gt_mask(self, resolution: int) -> np.ndarray:
        return instance_mask(self.scene.instances[self.instance_idx], resolution)

    def prompt(self, resolution: int) -> GeometricPrompt:
        if self.prompt_kind == "point":
            x, y = self.point_norm
            return GeometricPrompt(points=[(x * resolution, y * resolution, FG)])
        x0, y0, x1, y1 = self.box_norm
        return GeometricPrompt(
            boxes=[(x0 * resolution, y0 * resolution, x1 * resolution, y1 * resolution)]
        )


def unique_scenes(samples: list["SamSample"]) -> list[Scene]:
    seen, out = set(), []
    for s in samples:
        if s.scene_id not in seen:
            seen.add(s.scene_id)
            out.append(s.scene)
    return out


@dataclass
class DataBundle:
    spec: SceneSpec
    seed: int
    class_names: list[str]
    clip_train: list[ClipSample]
    clip_val: list[ClipSample]
    sam_train: list[SamSample]
    sam_val: list[SamSample]

    @property
    def sam_train_scenes(self) -> list[Scene]:
        return unique_scenes(self.sam_train)

    @property
    def sam_val_scenes(self) -> list[Scene]:
        return unique_scenes(self.sam_val)


def _split(indices: np.ndarray, val_fraction: float):
    n_val = int(round(len(indices) * val_fraction))
    return indices[n_val:], indices[:n_val]


def make_datasets(
    spec: SceneSpec, n_clip: int, n_sam: int, seed: int, val_fraction: float = 0.1
) -> DataBundle:
    """Build both streams with disjoint train/val splits, deterministic in seed."""
    clip_spec = replace(spec, min_instances=1, max_instances=1)
    clip_samples = []
    for i in range(n_clip):
        scene = sample_scene(clip_spec, np.random.default_rng((1, seed, i)))
        if not scene.instances:  # extremely unlikely; keep ids stable anyway
            continue
        clip_samples.append(ClipSample(scene, scene.instances[0].class_id, sample_id=i))

    sam_scene_list = [
        sample_scene(spec, np.random.default_rng((2, seed, i))) for i in range(n_sam)
    ]
    sam_samples: list[SamSample] = []
    res = spec.resolution
    for i, scene in enumerate(sam_scene_list):
        rng = np.random.default_rng((3, seed, i))
        for j, inst in enumerate(scene.instances):
            mask = instance_mask(inst, res)
            rows, cols = np.nonzero(mask)
            pick = int(rng.integers(rows.size))
            point = ((cols[pick] + 0.5) / res, (rows[pick] + 0.5) / res)
            x0, y0, x1, y1 = tight_box(mask)
            kind = "point" if rng.random() < 0.5 else "box"
            sam_samples.append(
                SamSample(
                    scene, i, j, kind, point,
                    (x0 / res, y0 / res, x1 / res, y1 / res),
                    sample_id=i * 8 + j,
                )
            )

    split_rng = np.random.default_rng((4, seed))
    clip_idx = split_rng.permutation(len(clip_samples))
    clip_tr, clip_va = _split(clip_idx, val_fraction)
    scene_idx = split_rng.permutation(n_sam)
    sam_tr_scenes, sam_va_scenes = _split(scene_idx, val_fraction)
    tr_set, va_set = set(sam_tr_scenes.tolist()), set(sam_va_scenes.tolist())

    return DataBundle(
        spec=spec,
        seed=seed,
        class_names=spec.class_names(),
        clip_train=[clip_samples[i] for i in clip_tr],
        clip_val=[clip_samples[i] for i in clip_va],
        sam_train=[s for s in sam_samples if s.scene_id in tr_set],
        sam_val=[s for s in sam_samples if s.scene_id in va_set],
    )


def bundle_from_config(cfg: DataConfig) -> DataBundle:
    return make_datasets(cfg.scene, cfg.n_clip, cfg.n_sam, cfg.seed, cfg.val_fraction)


# --- persistence ------------------------------------------------------------


def _save_png(path: Path, array: np.ndarray) -> None:
    if array.ndim == 3:  # (3,R,R) float in [0,1]
        arr = (np.clip(array, 0, 1) * 255).round().astype(np.uint8).transpose(1, 2, 0)
        Image.fromarray(arr, mode="RGB").save(path)
    else:  # boolean mask
        Image.fromarray((array.astype(np.uint8)) * 255, mode="L").save(path)


def save_dataset_dir(bundle: DataBundle, path) -> None:
    """Persist as index.json + per-sample image/mask PNGs and prompt JSONs."""
    path = Path(path)
    (path / "clip").mkdir(parents=True, exist_ok=True)
    (path / "sam").mkdir(parents=True, exist_ok=True)
    index = {
        "spec": to_jsonable(bundle.spec),
        "seed": bundle.seed,
        "class_names": bundle.class_names,
        "clip": {"train": [], "val": []},
        "sam": {"train": [], "val": []},
    }
    res = bundle.spec.resolution
    for split, samples in (("train", bundle.clip_train), ("val", bundle.clip_val)):
        for s in samples:
            stem = f"{s.sample_id:05d}"
            _save_png(path / "clip" / f"{stem}.png", rasterize(s.scene, res))
            with open(path / "clip" / f"{stem}.json", "w") as fh:
                json.dump({"class_id": s.class_id}, fh)
            index["clip"][split].append(stem)
    for split, samples in (("train", bundle.sam_train), ("val", bundle.sam_val)):
        for s in samples:
            stem = f"{s.sample_id:05d}"
            _save_png(path / "sam" / f"{stem}.png", rasterize(s.scene, res))
            _save_png(path / "sam" / f"{stem}_mask.png", s.gt_mask(res))
            with open(path / "sam" / f"{stem}.json", "w") as fh:
                json.dump(
                    {
                        "class_id": s.scene.instances[s.instance_idx].class_id,
                        "prompt": {
                            "kind": s.prompt_kind,
                            "point": list(s.point_norm),
                            "box": list(s.box_norm),
                        },
                    },
                    fh,
                )
            index["sam"][split].append(stem)
    with open(path / "index.json", "w") as fh:
        json.dump(index, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_dataset_dir(path) -> dict:
    """Read a persisted dataset back as arrays (images quantized to 8 bit)."""
    path = Path(path)
    with open(path / "index.json") as fh:
        index = json.load(fh)
    out = {"index": index, "clip": {}, "sam": {}}
    for split in ("train", "val"):
        out["clip"][split] = []
        for stem in index["clip"][split]:
            img = np.asarray(Image.open(path / "clip" / f"{stem}.png"), dtype=np.float32)
            with open(path / "clip" / f"{stem}.json") as fh:
                meta = json.load(fh)
            out["clip"][split].append(
                {"image": img.transpose(2, 0, 1) / 255.0, "class_id": meta["class_id"]}
            )
        out["sam"][split] = []
        for stem in index["sam"][split]:
            img = np.asarray(Image.open(path / "sam" / f"{stem}.png"), dtype=np.float32)
            mask = np.asarray(Image.open(path / "sam" / f"{stem}_mask.png")) > 127
            with open(path / "sam" / f"{stem}.json") as fh:
                meta = json.load(fh)
            out["sam"][split].append(
                {"image": img.transpose(2, 0, 1) / 255.0, "mask": mask, **meta}
            )
    return out


def split_fingerprint(bundle: DataBundle) -> str:
    """Stable hash over class inventory + split membership (golden-hash tests)."""
    import hashlib

    h = hashlib.sha256()
    h.update(",".join(bundle.class_names).encode())
    h.update(b"|clip_train:" + ",".join(str(s.sample_id) for s in bundle.clip_train).encode())
    h.update(b"|clip_val:" + ",".join(str(s.sample_id) for s in bundle.clip_val).encode())
    h.update(b"|sam_train:" + ",".join(str(s.sample_id) for s in bundle.sam_train).encode())
    h.update(b"|sam_val:" + ",".join(str(s.sample_id) for s in bundle.sam_val).encode())
    return h.hexdigest()[:16]
