import math

import numpy as np
import pytest
from numpy.testing import assert_allclose

from sedmtl import autodiff as ad
from sedmtl import losses
from sedmtl.errors import ArgumentError, DimensionError
from sedmtl.losses import SceneTarget


class TestSceneTarget:
    def test_one_hot_valid(self):
        t = SceneTarget.one_hot(2, 4)
        assert_allclose(t.probs, [0, 0, 1, 0])

    def test_one_hot_rejects_soft_vector(self):
        with pytest.raises(ArgumentError):
            SceneTarget("one_hot", [0.5, 0.5])

    def test_soft_must_normalize(self):
        with pytest.raises(ArgumentError):
            SceneTarget.soft([0.5, 0.6])

    def test_weights_validation(self):
        with pytest.raises(ArgumentError):
            losses.LossWeights(alpha=-1.0)
        with pytest.raises(ArgumentError):
            losses.LossWeights(temperature=0.0)


class TestEventLoss:
    def test_zero_logits_single_cell(self):
        out = losses.event_loss(ad.tensor([[0.0]]), np.array([[1.0]]))
        assert_allclose(out.values, math.log(2.0), atol=1e-12)
        out = losses.event_loss(ad.tensor([[0.0]]), np.array([[0.0]]))
        assert_allclose(out.values, math.log(2.0), atol=1e-12)

    def test_confident_positive(self):
        # s(y) = 0.9 for the active cell: loss is -ln 0.9
        y = math.log(0.9 / 0.1)
        out = losses.event_loss(ad.tensor([[y]]), np.array([[1.0]]))
        assert_allclose(out.values, -math.log(0.9), atol=1e-12)

    def test_masked_frames_contribute_nothing(self):
        rng = np.random.default_rng(0)
        logits = rng.normal(size=(3, 5))
        roll = (rng.random((3, 5)) < 0.4).astype(float)
        mask = np.array([1.0, 1.0, 1.0, 0.0, 0.0])
        base = losses.event_loss(ad.tensor(logits), roll, mask).values
        perturbed = logits.copy()
        perturbed[:, 3:] = 100.0
        after = losses.event_loss(ad.tensor(perturbed), roll, mask).values
        assert base == after

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            losses.event_loss(ad.tensor(np.zeros((2, 3))), np.zeros((3, 2)))
        with pytest.raises(DimensionError):
            losses.event_loss(ad.tensor(np.zeros((2, 3))), np.zeros((2, 3)), np.zeros(4))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(1)
        logits = ad.tensor(rng.normal(size=(3, 4)))
        roll = (rng.random((3, 4)) < 0.5).astype(float)
        mask = np.array([1.0, 1.0, 0.0, 1.0])
        report = ad.grad_check(lambda t: losses.event_loss(t, roll, mask), [logits])
        assert report.max_rel_err < 1e-6


class TestSceneHardLoss:
    def test_uniform_logits(self):
        out = losses.scene_hard_loss(
            ad.tensor([0.0, 0.0, 0.0, 0.0]), SceneTarget.one_hot(1, 4)
        )
        assert_allclose(out.values, math.log(4.0), atol=1e-12)

    def test_two_logits(self):
        out = losses.scene_hard_loss(ad.tensor([1.0, 2.0]), SceneTarget.one_hot(1, 2))
        assert_allclose(out.values, 0.31326168751822286, atol=1e-12)

    def test_confident_correct_drives_loss_to_zero(self):
        out = losses.scene_hard_loss(
            ad.tensor([40.0, 0.0, 0.0]), SceneTarget.one_hot(0, 3)
        )
        assert out.values < 1e-12

    def test_rejects_soft_target(self):
        with pytest.raises(ArgumentError):
            losses.scene_hard_loss(ad.tensor([0.0, 0.0]), SceneTarget.soft([0.5, 0.5]))

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(2)
        logits = ad.tensor(rng.normal(size=4))
        target = SceneTarget.one_hot(2, 4)
        report = ad.grad_check(lambda t: losses.scene_hard_loss(t, target), [logits])
        assert report.max_rel_err < 1e-6


class TestDistillTargets:
    def test_uniform_logits(self):
        assert_allclose(losses.distill_targets(np.zeros(4), 2.0), np.full(4, 0.25))

    def test_matches_softmax_values(self):
        assert_allclose(
            losses.distill_targets(np.array([1.0, 2.0]), 1.0),
            [0.2689414213699951, 0.7310585786300049],
            atol=1e-12,
        )

    def test_high_temperature_limit(self):
        p = losses.distill_targets(np.array([1.0, 2.0]), 1000.0)
        assert np.abs(p - 0.5).max() < 1e-3


class TestSoftSceneLoss:
    def test_matching_distributions_give_entropy(self):
        # q == p == uniform: cross-entropy equals the entropy ln 4
        out = losses.soft_scene_loss(ad.tensor(np.zeros(4)), np.full(4, 0.25), 1.0)
        assert_allclose(out.values, math.log(4.0), atol=1e-12)

    def test_one_hot_target_reduces_to_hard_loss(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            logits = rng.normal(scale=3.0, size=4)
            idx = int(rng.integers(0, 4))
            target = SceneTarget.one_hot(idx, 4)
            hard = losses.scene_hard_loss(ad.tensor(logits), target).values
            soft = losses.soft_scene_loss(ad.tensor(logits), target.probs, 1.0).values
            assert abs(hard - soft) <= 1e-12

    def test_hand_computed_value(self):
        # -(0.3 ln 0.26894 + 0.7 ln 0.73106), from the softmax of [1, 2]
        out = losses.soft_scene_loss(ad.tensor([1.0, 2.0]), np.array([0.3, 0.7]), 1.0)
        assert_allclose(out.values, 0.6132616875182228, atol=1e-12)

    def test_rejects_unnormalized_target(self):
        with pytest.raises(ArgumentError):
            losses.soft_scene_loss(ad.tensor([0.0, 0.0]), np.array([0.6, 0.6]), 1.0)

    def test_gibbs_inequality(self):
        rng = np.random.default_rng(4)
        p = np.array([0.1, 0.2, 0.3, 0.4])
        entropy = float(-(p * np.log(p)).sum())
        for _ in range(100):
            w = rng.normal(scale=3.0, size=4)
            out = losses.soft_scene_loss(ad.tensor(w), p, 1.0).values
            assert out >= entropy - 1e-12
        # equality iff q == p: logits = ln p (any shift) give q = p
        out = losses.soft_scene_loss(ad.tensor(np.log(p)), p, 1.0).values
        assert abs(out - entropy) < 1e-9

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(5)
        logits = ad.tensor(rng.normal(size=4))
        p = np.array([0.4, 0.3, 0.2, 0.1])
        report = ad.grad_check(
            lambda t: losses.soft_scene_loss(t, p, 2.0), [logits]
        )
        assert report.max_rel_err < 1e-6

    def test_gradients_flow_to_student_logits_only(self):
        logits = ad.tensor([1.0, -1.0, 0.5])
        p = losses.distill_targets(np.array([2.0, 0.0, 1.0]), 2.0)
        with ad.Tape() as tape:
            loss = losses.soft_scene_loss(logits, p, 2.0)
        tape.backward(loss)
        assert logits.grad is not None


class TestCombinedObjectives:
    def test_mtl_alpha_zero(self):
        e1, e2 = ad.tensor(1.25), ad.tensor(2.0)
        assert losses.mtl_objective(e1, e2, 0.0).values == e1.values

    def test_mtl_weighting_arithmetic(self):
        e1, e2 = ad.tensor(1.0), ad.tensor(2.0)
        assert_allclose(losses.mtl_objective(e1, e2, 0.0001).values, 1.0002)
        assert_allclose(losses.mtl_objective(e1, e2, 1.0).values, 3.0)

    def test_proposed_beta_zero(self):
        e1, e3 = ad.tensor(0.75), ad.tensor(0.5)
        assert losses.proposed_objective(e1, e3, 0.0).values == e1.values

    def test_proposed_arithmetic(self):
        out = losses.proposed_objective(ad.tensor(1.0), ad.tensor(0.5), 1.0)
        assert_allclose(out.values, 1.5)

    def test_linear_in_weight(self):
        e1, es = ad.tensor(1.0), ad.tensor(0.7)
        for combine in (losses.mtl_objective, losses.proposed_objective):
            vals = [combine(e1, es, w).values for w in (0.5, 1.0, 2.0)]
            assert_allclose(vals[1] - vals[0], 0.35, atol=1e-12)
            assert_allclose(vals[2] - vals[1], 0.7, atol=1e-12)

    def test_objective_gradients_reach_both_terms(self):
        rng = np.random.default_rng(6)
        event_logits = ad.tensor(rng.normal(size=(2, 3)))
        scene_logits = ad.tensor(rng.normal(size=4))
        roll = np.zeros((2, 3))
        with ad.Tape() as tape:
            e1 = losses.event_loss(event_logits, roll)
            e3 = losses.soft_scene_loss(scene_logits, np.full(4, 0.25), 1.0)
            loss = losses.proposed_objective(e1, e3, 0.5)
        tape.backward(loss)
        assert event_logits.grad is not None and np.any(event_logits.grad != 0)
        assert scene_logits.grad is not None and np.any(scene_logits.grad != 0)
