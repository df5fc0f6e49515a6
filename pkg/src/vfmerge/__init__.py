"""vfmerge: merging a promptable segmenter and an image-text aligner into a
single backbone via rehearsal-based multi-task distillation, at desk scale."""

from .config import (
    DataConfig,
    ExperimentConfig,
    LossConfig,
    ModelConfig,
    SceneSpec,
    StagePlan,
    TeacherTrainConfig,
)
from .checkpoint import Checkpoint, load_model, save_model
from .model import GeometricPrompt, MergedModel, init_clip_head_from_backbone
from .losses import LossValue, cosine_distill, dice_loss, fd_loss, focal_loss, total_loss

__all__ = [
    "Checkpoint",
    "DataConfig",
    "ExperimentConfig",
    "GeometricPrompt",
    "LossConfig",
    "LossValue",
    "MergedModel",
    "ModelConfig",
    "SceneSpec",
    "StagePlan",
    "TeacherTrainConfig",
    "cosine_distill",
    "dice_loss",
    "fd_loss",
    "focal_loss",
    "init_clip_head_from_backbone",
    "load_model",
    "save_model",
    "total_loss",
]

__version__ = "0.1.0"
