import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import bce_oracle, cosine_oracle, dice_oracle, fd_oracle, focal_oracle
from vfmerge.config import LossConfig
from vfmerge.errors import InputError, NumericError
from vfmerge.losses import cosine_distill, dice_loss, fd_loss, focal_loss, total_loss


def unit(v):
    t = torch.tensor(v, dtype=torch.float64)
    return t / t.norm()


class TestCosine:
    def test_identical_vectors_zero(self):
        v = unit([1.0, 2.0, -3.0])
        assert cosine_distill(v, v).item() == pytest.approx(0.0, abs=1e-12)

    def test_orthogonal_one(self):
        a = torch.tensor([1.0, 0.0])
        b = torch.tensor([0.0, 1.0])
        assert cosine_distill(a, b).item() == pytest.approx(1.0, abs=1e-12)

    def test_antipodal_two(self):
        v = unit([0.3, -0.4, 0.5])
        assert cosine_distill(v, -v).item() == pytest.approx(2.0, abs=1e-12)

    def test_nonfinite_raises(self):
        v = torch.tensor([float("nan"), 0.0])
        with pytest.raises(NumericError):
            cosine_distill(v, v)

    def test_shape_mismatch(self):
        with pytest.raises(InputError):
            cosine_distill(torch.ones(3), torch.ones(4))


class TestFocal:
    def test_saturated_correct_is_tiny(self):
        logits = torch.full((8, 8), 30.0)
        targets = torch.ones(8, 8)
        assert focal_loss(logits, targets, 2.0).item() < 1e-9

    def test_scalar_closed_form(self):
        # logit 0, target 1, gamma 2: (1/2)^2 * ln 2
        loss = focal_loss(torch.zeros(1), torch.ones(1), 2.0)
        assert loss.item() == pytest.approx(0.25 * math.log(2), abs=1e-9)

    def test_gamma_zero_is_bce(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            logits = rng.normal(0, 4, size=(5, 5))
            targets = rng.integers(0, 2, size=(5, 5))
            ours = focal_loss(
                torch.tensor(logits), torch.tensor(targets, dtype=torch.float64), 0.0
            ).item()
            assert ours == pytest.approx(bce_oracle(logits, targets), abs=1e-9)


class TestDice:
    def test_perfect_overlap_near_zero(self):
        logits = torch.where(torch.rand(6, 6) > 0.5, 30.0, -30.0)
        targets = (logits > 0).double()
        assert dice_loss(logits.double(), targets).item() < 1e-3

    def test_hand_evaluated_formula(self):
        # saturated p=[1,1,0,0], t=[1,0,0,0], eps->0: 1 - 2/3
        logits = torch.tensor([40.0, 40.0, -40.0, -40.0])
        targets = torch.tensor([1.0, 0.0, 0.0, 0.0])
        assert dice_loss(logits, targets, eps=0.0).item() == pytest.approx(1 / 3, abs=1e-6)

    def test_empty_mask_with_smoothing(self):
        logits = torch.full((5, 5), -40.0)
        targets = torch.zeros(5, 5)
        assert dice_loss(logits, targets).item() == pytest.approx(0.0, abs=1e-6)


class TestFd:
    def test_agreement_limit(self):
        t = torch.full((4, 4), 10.0)
        assert fd_loss(t, t).item() < 1e-3

    def test_disagreement_limit(self):
        teacher = torch.full((4, 4), 10.0)
        student = torch.full((4, 4), -10.0)
        loss = fd_loss(student, teacher)
        expected = focal_loss(student, torch.ones(4, 4), 2.0).item()
        expected += dice_loss(student, torch.ones(4, 4)).item() / 20.0
        assert loss.item() == pytest.approx(expected, rel=1e-6)
        assert loss.item() > 5.0  # near-maximal focal term

    def test_threshold_is_strict(self):
        # teacher exactly at threshold: pixel is background
        teacher = torch.zeros(3, 3)
        student = torch.full((3, 3), -30.0)  # confident background
        assert fd_loss(student, teacher).item() < 1e-3

    def test_components_recorded(self):
        loss = fd_loss(torch.randn(4, 4), torch.randn(4, 4))
        assert set(loss.components) == {"focal", "dice"}


class TestTotal:
    def test_arithmetic(self):
        from vfmerge.losses import LossValue

        l_clip = LossValue(torch.tensor(0.2))
        l_sam = LossValue(torch.tensor(0.05))
        assert total_loss(l_clip, l_sam, 10.0).item() == pytest.approx(0.7, abs=1e-7)

    def test_lambda_zero_is_clip_only(self):
        from vfmerge.losses import LossValue

        l_clip = LossValue(torch.tensor(0.37))
        l_sam = LossValue(torch.tensor(123.0))
        assert total_loss(l_clip, l_sam, 0.0).item() == pytest.approx(0.37, abs=1e-7)

    def test_default_weighting_is_one_to_ten(self):
        assert LossConfig().lambda_sam == 10.0


class TestRandomizedOracles:
    """1000 randomized comparisons against the independent scalar oracles."""

    def test_battery(self):
        rng = np.random.default_rng(7)
        cfg = LossConfig()
        for i in range(250):
            shape = (int(rng.integers(1, 6)), int(rng.integers(1, 6)))
            logits = rng.normal(0, 3, size=shape)
            targets = rng.integers(0, 2, size=shape).astype(np.float64)
            teacher = rng.normal(0, 3, size=shape)
            gamma = float(rng.uniform(0, 4))
            tl = torch.tensor(logits)
            tt = torch.tensor(targets)

            got = focal_loss(tl, tt, gamma).item()
            assert got == pytest.approx(focal_oracle(logits, targets, gamma), abs=1e-6)
            assert got >= 0.0

            got = dice_loss(tl, tt).item()
            assert got == pytest.approx(dice_oracle(logits, targets), abs=1e-6)
            assert 0.0 <= got <= 1.0

            got = fd_loss(tl, torch.tensor(teacher), cfg).item()
            assert got == pytest.approx(
                fd_oracle(logits, teacher, cfg.focal_gamma, cfg.focal_dice_ratio), abs=1e-6
            )

            dim = int(rng.integers(2, 8))
            a = rng.normal(size=dim)
            b = rng.normal(size=dim)
            a, b = a / np.linalg.norm(a), b / np.linalg.norm(b)
            got = cosine_distill(torch.tensor(a), torch.tensor(b)).item()
            assert got == pytest.approx(cosine_oracle(a, b), abs=1e-6)
            assert -1e-9 <= got <= 2.0 + 1e-9


@given(
    logits=st.lists(st.floats(-20, 20), min_size=2, max_size=16),
    bits=st.lists(st.integers(0, 1), min_size=2, max_size=16),
    gamma=st.floats(0, 5),
)
@settings(max_examples=60, deadline=None)
def test_focal_nonnegative_property(logits, bits, gamma):
    n = min(len(logits), len(bits))
    loss = focal_loss(
        torch.tensor(logits[:n], dtype=torch.float64),
        torch.tensor(bits[:n], dtype=torch.float64),
        gamma,
    )
    assert loss.item() >= 0.0


@given(seed=st.integers(0, 10_000))
@settings(max_examples=40, deadline=None)
def test_batch_order_invariance(seed):
    rng = np.random.default_rng(seed)
    logits = torch.tensor(rng.normal(size=(6, 4, 4)))
    teacher = torch.tensor(rng.normal(size=(6, 4, 4)))
    perm = torch.tensor(rng.permutation(6))
    a = fd_loss(logits, teacher).item()
    b = fd_loss(logits[perm], teacher[perm]).item()
    assert a == pytest.approx(b, abs=1e-6)

    emb = torch.tensor(rng.normal(size=(6, 8)))
    emb = emb / emb.norm(dim=-1, keepdim=True)
    tgt = torch.tensor(rng.normal(size=(6, 8)))
    tgt = tgt / tgt.norm(dim=-1, keepdim=True)
    assert cosine_distill(emb, tgt).item() == pytest.approx(
        cosine_distill(emb[perm], tgt[perm]).item(), abs=1e-6
    )
