"""Tests for objective module."""

import math

import numpy as np
import pytest

from sbsm_fit.autodiff import Tensor, backward, finite_diff_check, grad_of, parameter, tsum
from sbsm_fit.config import LossWeights
from sbsm_fit.errors import FitError
from sbsm_fit.objective import (
    Discriminator,
    LossBreakdown,
    adversarial_losses,
    check_finite,
    def_regularizer,
    distance_transform,
    feature_loss,
    generator_loss,
    hyp_loss,
    hypothesis_probs,
    image_loss,
    mask_loss,
    total_loss,
)
from sbsm_fit.selftest import brute_force_distance


def _square_mask(size=16, lo=4, hi=12):
    mask = np.zeros((size, size))
    mask[lo:hi, lo:hi] = 1.0
    return mask


class TestDistanceTransform:
    """Test the Euclidean distance transform."""

    def test_two_by_two(self):
        dt = distance_transform(np.array([[1.0, 0.0], [0.0, 0.0]]))
        assert np.allclose(dt, [[0.0, 1.0], [1.0, math.sqrt(2.0)]])

    def test_zero_on_foreground(self):
        mask = _square_mask()
        assert np.all(distance_transform(mask)[mask > 0] == 0.0)

    def test_empty_mask_is_flagged(self, caplog):
        dt, flagged = distance_transform(np.zeros((3, 4)), return_flag=True)
        assert flagged
        assert np.allclose(dt, 5.0)
        assert "empty mask" in caplog.text

    def test_matches_brute_force(self):
        rng = np.random.default_rng(0)
        for _ in range(5):
            mask = (rng.random((12, 12)) < 0.1).astype(float)
            if not mask.any():
                continue
            assert np.allclose(distance_transform(mask), brute_force_distance(mask), atol=1e-12)


class TestReconstructionLosses:
    """Test mask, image and feature losses."""

    def test_mask_perfect_match(self):
        mask = _square_mask()
        assert mask_loss(mask, mask, 0.1).item() == pytest.approx(0.0)

    def test_mask_worked_example(self):
        target = np.array([[1.0, 0.0], [0.0, 0.0]])
        loss = mask_loss(np.ones((2, 2)), target, 1.0).item()
        assert loss == pytest.approx(0.75 + (2.0 + math.sqrt(2.0)) / 4.0)

    def test_mask_grows_with_distance_from_target(self):
        target = _square_mask()
        wrong = _square_mask(lo=0, hi=6)
        losses = [mask_loss(target + t * (wrong - target), target, 0.1).item() for t in (0.0, 0.25, 0.5, 1.0)]
        assert losses == sorted(losses)
        assert losses[0] < losses[-1]

    def test_mask_gradient(self):
        target = _square_mask(8, 2, 6)
        pred = parameter(np.random.default_rng(1).random((8, 8)))
        assert finite_diff_check(lambda: mask_loss(pred, target, 0.1), [pred]) < 1e-6

    def test_image_loss_hard_l1(self):
        mask = np.ones((4, 4))
        pred = np.full((4, 4, 3), 0.3)
        image = np.full((4, 4, 3), 0.2)
        assert image_loss(pred, image, mask, mask, hard_l1=True).item() == pytest.approx(0.3)
        assert image_loss(pred, image, mask, mask).item() == pytest.approx(0.3, abs=1e-5)

    def test_image_loss_disjoint_masks(self):
        pred_mask = _square_mask(8, 0, 4)
        target_mask = _square_mask(8, 4, 8)
        loss = image_loss(np.ones((8, 8, 3)), np.zeros((8, 8, 3)), pred_mask, target_mask)
        assert loss.item() == 0.0

    def test_feature_loss(self):
        mask = np.ones((4, 4))
        loss = feature_loss(np.full((4, 4, 16), 0.6), np.full((4, 4, 16), 0.5), mask, mask)
        assert loss.item() == pytest.approx(0.16)

    def test_feature_loss_reaches_mask(self):
        mask = parameter(np.full((2, 2), 0.5))
        grads = backward(feature_loss(np.ones((2, 2, 4)), np.zeros((2, 2, 4)), mask, np.ones((2, 2))))
        assert np.all(grad_of(grads, mask) > 0.0)

    def test_image_gradient(self):
        rng = np.random.default_rng(8)
        pred = parameter(rng.random((5, 5, 3)))
        pred_mask = parameter(rng.uniform(0.1, 0.9, (5, 5)))
        target_mask = (rng.random((5, 5)) < 0.6).astype(float)
        image = rng.random((5, 5, 3))
        err = finite_diff_check(lambda: image_loss(pred, image, pred_mask, target_mask), [pred, pred_mask], abs_tol=1e-8)
        assert err < 1e-6

    def test_feature_gradient(self):
        rng = np.random.default_rng(9)
        pred = parameter(rng.standard_normal((5, 5, 4)))
        pred_mask = parameter(rng.uniform(0.1, 0.9, (5, 5)))
        target_mask = (rng.random((5, 5)) < 0.6).astype(float)
        features = rng.standard_normal((5, 5, 4))
        err = finite_diff_check(
            lambda: feature_loss(pred, features, pred_mask, target_mask), [pred, pred_mask], abs_tol=1e-8
        )
        assert err < 1e-6


class TestHypotheses:
    """Test hypothesis scoring."""

    def test_hyp_loss_zero_at_match(self):
        assert hyp_loss(1.5, 1.5).item() == 0.0

    def test_hyp_loss_detaches_reconstruction(self):
        score, rec = parameter(0.0), parameter(2.0)
        loss = hyp_loss(score, rec)
        grads = backward(loss)
        assert loss.item() == pytest.approx(4.0)
        assert grad_of(grads, score) == pytest.approx(-4.0)
        assert grad_of(grads, rec) == 0.0

    def test_equal_scores_are_uniform(self):
        assert np.allclose(hypothesis_probs([0.3] * 4, 1.0), 0.25)

    def test_low_temperature_picks_best(self):
        probs = hypothesis_probs([0.0, 0.1, 0.2, 0.3], 0.01)
        assert probs[0] > 0.999

    def test_large_scores_are_stable(self):
        probs = hypothesis_probs([1e4, 1e4 + 1.0], 0.01)
        assert np.all(np.isfinite(probs))
        assert probs.sum() == pytest.approx(1.0)

    def test_bad_temperature(self):
        with pytest.raises(FitError):
            hypothesis_probs([0.0, 1.0], 0.0)


class TestRegularizers:
    """Test the deformation regularizer."""

    def test_constant_offset(self):
        offsets = np.zeros((10, 3))
        offsets[:, 0] = 0.1
        assert def_regularizer(offsets).item() == pytest.approx(0.01)

    def test_zero_offsets(self):
        assert def_regularizer(np.zeros((5, 3))).item() == 0.0

    def test_gradient(self):
        offsets = parameter(np.random.default_rng(10).normal(0.0, 0.1, (7, 3)))
        assert finite_diff_check(lambda: def_regularizer(offsets), [offsets]) < 1e-6


class TestDiscriminator:
    """Test the conditioned mask discriminator."""

    def test_zero_discriminator_outputs_zero(self):
        disc = Discriminator.create(np.random.default_rng(0), 8, value_dim=4, width=4, zero=True)
        logits = disc(np.random.default_rng(1).random((3, 8, 8)), np.ones(4))
        assert np.array_equal(logits.data, np.zeros(3))

    def test_batch_permutation(self):
        disc = Discriminator.create(np.random.default_rng(0), 16, value_dim=4, width=4)
        masks = np.random.default_rng(2).random((4, 16, 16))
        phi = np.random.default_rng(3).standard_normal(4)
        order = np.array([2, 0, 3, 1])
        assert np.allclose(disc(masks[order], phi).data, disc(masks, phi).data[order])

    def test_single_mask_is_batched(self):
        disc = Discriminator.create(np.random.default_rng(0), 8, value_dim=4, width=4)
        assert disc(np.zeros((8, 8)), np.zeros(4)).shape == (1,)

    def test_conditioning_gets_no_gradient(self):
        disc = Discriminator.create(np.random.default_rng(0), 8, value_dim=4, width=4)
        phi = parameter(np.ones(4))
        grads = backward(tsum(disc(np.random.default_rng(4).random((2, 8, 8)), phi)))
        assert np.all(grad_of(grads, phi) == 0.0)

    def test_conditioning_changes_output(self):
        disc = Discriminator.create(np.random.default_rng(0), 8, value_dim=4, width=4)
        masks = np.random.default_rng(5).random((1, 8, 8))
        assert disc(masks, np.zeros(4)).item() != disc(masks, np.ones(4)).item()

    def test_mask_gradient(self):
        disc = Discriminator.create(np.random.default_rng(0), 8, value_dim=4, width=4)
        masks = parameter(np.random.default_rng(6).random((1, 8, 8)))
        phi = np.random.default_rng(7).standard_normal(4)
        assert finite_diff_check(lambda: tsum(disc(masks, phi)), [masks], max_coords=32, abs_tol=1e-8) < 1e-5

    def test_bad_image_size(self):
        with pytest.raises(FitError):
            Discriminator.create(np.random.default_rng(0), 12)
        with pytest.raises(FitError):
            Discriminator.create(np.random.default_rng(0), 4)

    def test_wrong_mask_size(self):
        disc = Discriminator.create(np.random.default_rng(0), 8, value_dim=4, width=4)
        with pytest.raises(FitError):
            disc(np.zeros((1, 16, 16)), np.zeros(4))

    def test_wrong_conditioning_size(self):
        disc = Discriminator.create(np.random.default_rng(0), 8, value_dim=4, width=4)
        with pytest.raises(FitError):
            disc(np.zeros((1, 8, 8)), np.zeros(5))

    def test_adversarial_losses_at_zero(self):
        disc = Discriminator.create(np.random.default_rng(0), 8, value_dim=4, width=4, zero=True)
        real = _square_mask(8, 2, 6)[None]
        fake = _square_mask(8, 1, 5)[None]
        losses = adversarial_losses(disc, real, fake, np.zeros(4))
        assert losses.adv == pytest.approx(-2.0 * math.log(2.0))
        assert losses.r1 == pytest.approx(0.0)
        assert losses.gen_loss.item() == pytest.approx(math.log(2.0))
        assert losses.disc_loss.item() == pytest.approx(2.0 * math.log(2.0))

    def test_generator_gradient_reaches_fake(self):
        disc = Discriminator.create(np.random.default_rng(0), 8, value_dim=4, width=4)
        fake = parameter(np.random.default_rng(8).random((1, 8, 8)))
        grads = backward(generator_loss(disc, fake, np.zeros(4)))
        assert np.any(grad_of(grads, fake) != 0.0)

    def test_disc_loss_does_not_reach_fake(self):
        disc = Discriminator.create(np.random.default_rng(0), 8, value_dim=4, width=4)
        fake = parameter(np.random.default_rng(9).random((1, 8, 8)))
        real = _square_mask(8, 2, 6)[None]
        losses = adversarial_losses(disc, real, fake, np.zeros(4), r1_gamma=0.0)
        grads = backward(losses.disc_loss)
        assert np.all(grad_of(grads, fake) == 0.0)

    def test_r1_is_non_negative(self):
        disc = Discriminator.create(np.random.default_rng(0), 8, value_dim=4, width=4)
        real = _square_mask(8, 2, 6)[None]
        losses = adversarial_losses(disc, real, real, np.zeros(4))
        assert losses.r1 >= 0.0


class TestAggregation:
    """Test weighted totals and breakdowns."""

    def test_unit_terms_sum_weights(self):
        parts = {name: 1.0 for name in ("mask", "image", "feature", "hyp", "adv", "art", "deform")}
        assert total_loss(parts, LossWeights()) == pytest.approx(81.3)

    def test_tensor_terms(self):
        parts = {"mask": Tensor(0.5), "image": Tensor(2.0)}
        assert total_loss(parts, LossWeights()).item() == pytest.approx(7.0)

    def test_unknown_term(self):
        with pytest.raises(FitError):
            total_loss({"bogus": 1.0}, LossWeights())

    def test_check_finite_names_term(self):
        with pytest.raises(FitError) as excinfo:
            check_finite({"mask": Tensor(1.0), "image": Tensor(np.nan)})
        assert excinfo.value.term == "image"

    def test_check_finite_passes(self):
        check_finite({"mask": Tensor(1.0), "adv": 0.0})

    def test_breakdown_from_parts(self):
        breakdown = LossBreakdown.from_parts({"mask": 1.0, "image": 2.0}, LossWeights())
        assert breakdown.mask == 1.0
        assert breakdown.total == pytest.approx(12.0)
        assert breakdown.deform == 0.0

    def test_running_mean(self):
        mean = LossBreakdown(mask=1.0, total=2.0).mean_with(LossBreakdown(mask=3.0, total=6.0), 1)
        assert mean.mask == pytest.approx(2.0)
        assert mean.total == pytest.approx(4.0)
        assert list(mean.as_dict()) == ["mask", "image", "feature", "hyp", "adv", "art", "deform", "total"]
