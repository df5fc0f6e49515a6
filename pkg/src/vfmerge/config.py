"""Dataclass configs for models, data, training stages and experiments.

All configs round-trip through JSON. ``from_dict`` constructors are strict:
unknown keys raise :class:`ConfigError` so stale experiment files fail loudly.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from typing import Any

from .errors import ConfigError


def _strict_fields(cls, data: dict[str, Any]) -> dict[str, Any]:
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ConfigError(f"unknown keys for {cls.__name__}: {sorted(unknown)}")
    return data


@dataclass
class ModelConfig:
    """Architecture of the mini merged model.

    Desk-scale defaults: patch 8, 4-layer/64-dim/4-head backbone, 2-layer
    alignment head, 64-dim shared embedding space. Alignment-task images run
    at 64/128px, segmentation-task images at 256px.
    """

    patch_size: int = 8
    in_channels: int = 3
    embed_dim: int = 64
    depth: int = 4
    num_heads: int = 4
    mlp_ratio: float = 4.0
    clip_head_depth: int = 2
    clip_proj_hidden: int = 64
    text_embed_dim: int = 64
    decoder_rounds: int = 2
    decoder_heads: int = 2
    decoder_mlp_ratio: float = 2.0
    base_resolution: int = 64
    clip_resolutions: tuple[int, ...] = (64, 128)
    sam_resolution: int = 256
    num_classes: int = 12
    num_templates: int = 8
    template_scale: float = 0.1
    text_seed: int = 777

    def __post_init__(self):
        if self.clip_head_depth < 1:
            raise ConfigError("clip_head_depth must be >= 1")
        if self.embed_dim % self.num_heads != 0:
            raise ConfigError("embed_dim must be divisible by num_heads")
        if self.base_resolution % self.patch_size != 0:
            raise ConfigError("base_resolution must be divisible by patch_size")
        self.clip_resolutions = tuple(self.clip_resolutions)

    @property
    def base_grid(self) -> int:
        return self.base_resolution // self.patch_size

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ModelConfig":
        return cls(**_strict_fields(cls, data))


@dataclass
class SceneSpec:
    """Synthetic scene recipe: colored shapes on a textured background.

    The class inventory is the cross product of ``shapes`` x ``colors``
    (12 classes by default). Shape geometry lives in normalized [0,1]
    coordinates so one scene can be rasterized at any resolution.
    """

    resolution: int = 256
    shapes: tuple[str, ...] = ("circle", "square", "triangle", "cross")
    colors: tuple[str, ...] = ("red", "green", "blue")
    min_instances: int = 1
    max_instances: int = 3
    min_size: float = 0.10
    max_size: float = 0.22
    noise_level: float = 0.05
    min_area_px: int = 16

    def __post_init__(self):
        self.shapes = tuple(self.shapes)
        self.colors = tuple(self.colors)
        if self.min_instances < 1 or self.max_instances < self.min_instances:
            raise ConfigError("instance count range invalid")

    @property
    def num_classes(self) -> int:
        return len(self.shapes) * len(self.colors)

    def class_names(self) -> list[str]:
        return [f"{c} {s}" for s in self.shapes for c in self.colors]

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "SceneSpec":
        return cls(**_strict_fields(cls, data))


@dataclass
class DataConfig:
    """Dataset sizes and split ratio for the two rehearsal streams."""

    scene: SceneSpec = field(default_factory=SceneSpec)
    n_clip: int = 1200
    n_sam: int = 300
    val_fraction: float = 0.1
    seed: int = 0

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "DataConfig":
        data = dict(_strict_fields(cls, data))
        if "scene" in data and isinstance(data["scene"], dict):
            data["scene"] = SceneSpec.from_dict(data["scene"])
        return cls(**data)


@dataclass
class LossConfig:
    """Objective weights: lambda_sam mirrors the 1:10 task weighting."""

    lambda_sam: float = 10.0
    focal_gamma: float = 2.0
    focal_dice_ratio: float = 20.0
    teacher_binarize_threshold: float = 0.0

    def __post_init__(self):
        if self.lambda_sam < 0:
            raise ConfigError("lambda_sam must be >= 0")
        if self.focal_gamma < 0:
            raise ConfigError("focal_gamma must be >= 0")

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "LossConfig":
        return cls(**_strict_fields(cls, data))


STAGE_NAMES = ("head_probe", "multitask", "resolution_adapt")
PARAM_GROUPS = ("backbone", "clip_head", "prompt_encoder", "mask_decoder")


@dataclass
class StagePlan:
    """One training stage: what trains, at which rates, on which resolutions."""

    stage: str
    epochs: int
    base_lr: float
    lr_multipliers: dict[str, float] = field(default_factory=dict)
    trainable: tuple[str, ...] = ("clip_head",)
    resolutions: tuple[int, ...] = (64, 128)
    n_clip: int = 64
    n_sam: int = 0
    weight_decay: float = 0.1
    warmup_fraction: float = 0.05
    grad_clip: float = 1.0

    def __post_init__(self):
        if self.stage not in STAGE_NAMES:
            raise ConfigError(f"unknown stage {self.stage!r}")
        self.trainable = tuple(self.trainable)
        self.resolutions = tuple(self.resolutions)
        unknown = set(self.trainable) - set(PARAM_GROUPS)
        if unknown:
            raise ConfigError(f"unknown param groups: {sorted(unknown)}")
        unknown = set(self.lr_multipliers) - set(PARAM_GROUPS)
        if unknown:
            raise ConfigError(f"unknown lr multiplier groups: {sorted(unknown)}")
        if any(m <= 0 for m in self.lr_multipliers.values()):
            raise ConfigError("lr multipliers must be > 0")
        if self.stage in ("head_probe", "resolution_adapt") and "backbone" in self.trainable:
            raise ConfigError(f"stage {self.stage} must freeze the backbone")

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "StagePlan":
        return cls(**_strict_fields(cls, data))


def default_stage_plans() -> dict[str, StagePlan]:
    """The three-stage recipe with desk-scale epochs (10/8/2)."""
    return {
        "head_probe": StagePlan(
            stage="head_probe",
            epochs=10,
            base_lr=8e-4,
            trainable=("clip_head",),
            resolutions=(64, 128),
            n_clip=64,
            n_sam=0,
        ),
        "multitask": StagePlan(
            stage="multitask",
            epochs=8,
            base_lr=4e-5,
            lr_multipliers={
                "backbone": 0.1,
                "clip_head": 1.0,
                "prompt_encoder": 0.1,
                "mask_decoder": 0.1,
            },
            trainable=PARAM_GROUPS,
            resolutions=(64, 128),
            n_clip=64,
            n_sam=4,
        ),
        "resolution_adapt": StagePlan(
            stage="resolution_adapt",
            epochs=2,
            base_lr=8e-4,
            trainable=("clip_head",),
            resolutions=(64, 128, 256),
            n_clip=64,
            n_sam=0,
        ),
    }


def naive_kd_plan(epochs: int = 8) -> StagePlan:
    """The forgetting control: alignment-only finetuning, uniform LR, hot rate.

    lambda_sam is forced to 0 by the caller; every group trains at the full
    head-probe learning rate so the backbone drifts freely.
    """
    return StagePlan(
        stage="multitask",
        epochs=epochs,
        base_lr=8e-4,
        lr_multipliers={g: 1.0 for g in PARAM_GROUPS},
        trainable=PARAM_GROUPS,
        resolutions=(64, 128),
        n_clip=64,
        n_sam=0,
    )


@dataclass
class TeacherTrainConfig:
    """Budgets for the two mini teacher runs."""

    clip_epochs: int = 8
    clip_batch: int = 32
    clip_lr: float = 1e-3
    sam_epochs: int = 6
    sam_batch: int = 4
    sam_lr: float = 1e-3
    weight_decay: float = 0.05

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "TeacherTrainConfig":
        return cls(**_strict_fields(cls, data))


@dataclass
class ExperimentConfig:
    """Everything one reproducible experiment needs, JSON-serializable."""

    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    data: DataConfig = field(default_factory=DataConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    stages: dict[str, StagePlan] = field(default_factory=default_stage_plans)
    teacher: TeacherTrainConfig = field(default_factory=TeacherTrainConfig)
    naive_epochs: int = 8
    wiseft_alphas: tuple[float, ...] = tuple(round(0.1 * i, 1) for i in range(11))
    out_dir: str = "out"

    def __post_init__(self):
        self.wiseft_alphas = tuple(self.wiseft_alphas)
        for name, plan in self.stages.items():
            if name != plan.stage:
                raise ConfigError(f"stage key {name!r} != plan.stage {plan.stage!r}")

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ExperimentConfig":
        data = dict(_strict_fields(cls, data))
        if "model" in data and isinstance(data["model"], dict):
            data["model"] = ModelConfig.from_dict(data["model"])
        if "data" in data and isinstance(data["data"], dict):
            data["data"] = DataConfig.from_dict(data["data"])
        if "loss" in data and isinstance(data["loss"], dict):
            data["loss"] = LossConfig.from_dict(data["loss"])
        if "teacher" in data and isinstance(data["teacher"], dict):
            data["teacher"] = TeacherTrainConfig.from_dict(data["teacher"])
        if "stages" in data and isinstance(data["stages"], dict):
            data["stages"] = {
                k: (StagePlan.from_dict(v) if isinstance(v, dict) else v)
                for k, v in data["stages"].items()
            }
        return cls(**data)

    @classmethod
    def from_json(cls, path) -> "ExperimentConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def to_json(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(to_jsonable(self), fh, indent=2, sort_keys=True)
            fh.write("\n")


def to_jsonable(obj: Any) -> Any:
    """Recursively convert dataclasses/tuples into plain JSON types."""
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: to_jsonable(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, dict):
        return {k: to_jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [to_jsonable(v) for v in obj]
    return obj


def config_hash(obj: Any) -> str:
    """Stable short hash of any config, for checkpoint metadata."""
    blob = json.dumps(to_jsonable(obj), sort_keys=True).encode()
    return hashlib.sha256(blob).hexdigest()[:16]
