import sys
from pathlib import Path

import pytest
import torch

sys.path.insert(0, str(Path(__file__).parent))  # for the shared oracles module

from vfmerge.config import ModelConfig, SceneSpec, StagePlan
from vfmerge.data import make_datasets
from vfmerge.model import MergedModel


@pytest.fixture(scope="session", autouse=True)
def _single_thread():
    torch.set_num_threads(1)


@pytest.fixture(scope="session")
def tiny_model_cfg() -> ModelConfig:
    return ModelConfig(
        patch_size=8,
        embed_dim=32,
        depth=2,
        num_heads=2,
        clip_head_depth=1,
        clip_proj_hidden=32,
        text_embed_dim=32,
        base_resolution=32,
        clip_resolutions=(32, 64),
        sam_resolution=64,
    )


@pytest.fixture(scope="session")
def micro_model_cfg() -> ModelConfig:
    """Sub-1k-parameter model for finite-difference gradient checks."""
    return ModelConfig(
        patch_size=4,
        in_channels=1,
        embed_dim=4,
        depth=1,
        num_heads=1,
        mlp_ratio=1.0,
        clip_head_depth=1,
        clip_proj_hidden=2,
        text_embed_dim=4,
        decoder_rounds=1,
        decoder_heads=1,
        decoder_mlp_ratio=1.0,
        base_resolution=8,
        clip_resolutions=(8,),
        sam_resolution=8,
        num_classes=3,
        num_templates=2,
    )


@pytest.fixture(scope="session")
def tiny_model(tiny_model_cfg) -> MergedModel:
    model = MergedModel(tiny_model_cfg, seed=0)
    model.eval()
    return model


@pytest.fixture(scope="session")
def tiny_bundle():
    return make_datasets(SceneSpec(resolution=64), n_clip=40, n_sam=10, seed=0)


@pytest.fixture()
def head_probe_plan() -> StagePlan:
    return StagePlan(
        stage="head_probe",
        epochs=1,
        base_lr=8e-4,
        trainable=("clip_head",),
        resolutions=(32, 64),
        n_clip=8,
        n_sam=0,
    )


@pytest.fixture()
def multitask_plan() -> StagePlan:
    return StagePlan(
        stage="multitask",
        epochs=1,
        base_lr=4e-4,
        lr_multipliers={
            "backbone": 0.1,
            "clip_head": 1.0,
            "prompt_encoder": 0.1,
            "mask_decoder": 0.1,
        },
        trainable=("backbone", "clip_head", "prompt_encoder", "mask_decoder"),
        resolutions=(32, 64),
        n_clip=8,
        n_sam=2,
    )
