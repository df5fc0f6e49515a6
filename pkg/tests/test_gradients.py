"""Autodiff vs central finite differences for every loss, through the whole
model, at float64 on a sub-1k-parameter instance."""

import numpy as np
import pytest
import torch

from gradcheck import relative_gradient_error
from vfmerge.losses import cosine_distill, dice_loss, fd_loss, focal_loss
from vfmerge.model import FG, GeometricPrompt, MergedModel

TOL = 1e-4


@pytest.fixture(scope="module")
def micro_model(micro_model_cfg):
    model = MergedModel(micro_model_cfg, seed=3).double()
    model.eval()
    return model


@pytest.fixture(scope="module")
def micro_inputs(micro_model_cfg):
    rng = np.random.default_rng(11)
    res = micro_model_cfg.sam_resolution
    image = torch.tensor(rng.uniform(size=(1, res, res)), dtype=torch.float64)
    target_vec = torch.tensor(rng.normal(size=micro_model_cfg.text_embed_dim))
    target_vec = target_vec / target_vec.norm()
    grid = 4 * (res // micro_model_cfg.patch_size)
    mask_targets = torch.tensor(
        rng.integers(0, 2, size=(grid, grid)), dtype=torch.float64
    )
    teacher_scores = torch.tensor(rng.normal(0, 2, size=(grid, grid)))
    prompt = GeometricPrompt(points=[(res * 0.4, res * 0.6, FG)])
    return image, target_vec, mask_targets, teacher_scores, prompt


def test_micro_model_is_small(micro_model):
    n = sum(p.numel() for p in micro_model.parameters())
    assert n <= 1000, f"micro model has {n} parameters"


def test_cosine_gradients(micro_model, micro_inputs):
    image, target, *_ = micro_inputs

    def loss_fn(m):
        return cosine_distill(m.embed_image(image), target).value

    assert relative_gradient_error(micro_model, loss_fn) < TOL


def test_focal_gradients(micro_model, micro_inputs):
    image, _, mask_targets, _, prompt = micro_inputs

    def loss_fn(m):
        return focal_loss(m.predict_mask(image, prompt), mask_targets, 2.0).value

    assert relative_gradient_error(micro_model, loss_fn) < TOL


def test_dice_gradients(micro_model, micro_inputs):
    image, _, mask_targets, _, prompt = micro_inputs

    def loss_fn(m):
        return dice_loss(m.predict_mask(image, prompt), mask_targets).value

    assert relative_gradient_error(micro_model, loss_fn) < TOL


def test_fd_gradients(micro_model, micro_inputs):
    image, _, _, teacher_scores, prompt = micro_inputs

    def loss_fn(m):
        return fd_loss(m.predict_mask(image, prompt), teacher_scores).value

    assert relative_gradient_error(micro_model, loss_fn) < TOL
