import math

import numpy as np
import pytest

from detkd import tensor as T
from detkd.geometry import Box, LabeledProposal, assign_pyramid_level
from detkd.harness.checks import random_pyramid
from detkd.models import FeaturePyramid, UnsupportedPairError
from detkd.sgfi import (
    SgfiConfig,
    SgfiModule,
    compute_match_weights,
    make_masks,
    masked_imitation_loss,
    sgfi_core,
    sgfi_loss,
)
from detkd.tensor import Tensor


def proposal(box, level):
    return LabeledProposal(Box(*box), 1, 0, 0, level)


class TestMatchWeights:
    def test_worked_example(self):
        e = math.e
        alpha = compute_match_weights(np.array([[1.0], [0.0]]), np.array([1.0]), 1.0)
        np.testing.assert_allclose(alpha.data, [e / (e + 1), 1 / (e + 1)], atol=1e-12)

    def test_temperature_sharpens(self):
        ks, kt = np.array([[1.0], [0.0]]), np.array([1.0])
        hot = compute_match_weights(ks, kt, 10.0).data
        cold = compute_match_weights(ks, kt, 0.1).data
        assert cold[0] > hot[0] > 0.5
        assert abs(hot[0] - 0.5) < 0.03

    def test_batched_rows_sum_to_one(self, rng):
        alpha = compute_match_weights(rng.normal(size=(6, 3, 4)), rng.normal(size=(6, 4)), 0.5).data
        assert alpha.shape == (6, 3)
        np.testing.assert_allclose(alpha.sum(axis=1), 1.0)

    def test_nonpositive_tau(self):
        with pytest.raises(ValueError):
            compute_match_weights(np.ones((2, 1)), np.ones(1), 0.0)

    def test_level_permutation_permutes_weights(self, rng):
        ks, kt = rng.normal(size=(4, 3)), rng.normal(size=3)
        perm = np.array([2, 0, 3, 1])
        np.testing.assert_allclose(
            compute_match_weights(ks[perm], kt, 0.7).data, compute_match_weights(ks, kt, 0.7).data[perm]
        )


class TestCore:
    def test_single_level_reduces_to_mse(self, rng):
        adapted = Tensor(rng.normal(size=(3, 1, 5)))
        teacher = rng.normal(size=(3, 5))
        loss, alpha = sgfi_core(adapted, Tensor(rng.normal(size=(3, 1, 2))), Tensor(rng.normal(size=(3, 2))), 1.0, teacher)
        np.testing.assert_allclose(alpha.data, 1.0)
        np.testing.assert_allclose(loss.data, np.mean((adapted.data[:, 0] - teacher) ** 2))

    def test_identical_levels_give_zero(self, rng):
        feat = rng.normal(size=(2, 6))
        adapted = Tensor(np.repeat(feat[:, None, :], 3, axis=1))
        loss, _ = sgfi_core(adapted, Tensor(rng.normal(size=(2, 3, 4))), Tensor(rng.normal(size=(2, 4))), 0.3, feat)
        assert abs(float(loss.data)) < 1e-24

    def test_gradient_through_tau(self, rng):
        adapted = Tensor(rng.normal(size=(2, 2, 3)))
        ks, kt = Tensor(rng.normal(size=(2, 2, 4))), Tensor(rng.normal(size=(2, 4)))
        teacher = rng.normal(size=(2, 3))
        log_tau = Tensor(0.2, requires_grad=True)
        (g,) = T.backward(sgfi_core(adapted, ks, kt, T.exp(log_tau), teacher)[0], [log_tau])
        h = 1e-6

        def f(v):
            return float(sgfi_core(adapted, ks, kt, math.exp(v), teacher)[0].data)

        assert abs(float(g) - (f(0.2 + h) - f(0.2 - h)) / (2 * h)) < 1e-6


class TestSgfiLoss:
    def setup_pair(self, rng, c_s=3, c_t=4):
        s = random_pyramid(rng, c_s)
        t = random_pyramid(rng, c_t)
        module = SgfiModule(c_s, c_t, s.num_levels, SgfiConfig(c_key=3, roi_size=4), rng)
        return s, t, module

    def test_empty_proposals(self, rng):
        s, t, module = self.setup_pair(rng)
        assert float(sgfi_loss([], s, t, module).data) == 0.0
        loss, alpha = sgfi_loss([], s, t, module, return_weights=True)
        assert alpha.shape == (0, 3)

    def test_copied_single_level_with_identity_adapter_is_zero(self, rng):
        t = random_pyramid(rng, 3, sizes=((8, 8),))
        s = FeaturePyramid([Tensor(t.levels[0].data.copy())], t.sizes, t.strides)
        module = SgfiModule(3, 3, 1, SgfiConfig(c_key=3, roi_size=4), rng)
        module.adap.maps[0].weight.data = np.eye(3)
        props = [proposal((2, 2, 14, 12), 0), proposal((0, 0, 30, 30), 0)]
        assert float(sgfi_loss(props, s, t, module).data) < 1e-24

    def test_weights_shape(self, rng):
        s, t, module = self.setup_pair(rng)
        boxes = [(1, 1, 9, 9), (3, 2, 28, 30), (0, 5, 20, 17)]
        props = [proposal(b, assign_pyramid_level(Box(*b), 3)) for b in boxes]
        loss, alpha = sgfi_loss(props, s, t, module, return_weights=True)
        assert alpha.shape == (3, 3)
        np.testing.assert_allclose(alpha.sum(axis=1), 1.0)
        assert float(loss.data) > 0

    def test_channel_mismatch(self, rng):
        s, t, module = self.setup_pair(rng)
        with pytest.raises(ValueError, match="channel"):
            sgfi_loss([proposal((0, 0, 8, 8), 0)], t, s, module)

    def test_wrong_level_count(self, rng):
        s = random_pyramid(rng, 3)
        t = random_pyramid(rng, 4)
        module = SgfiModule(3, 4, 2, SgfiConfig(c_key=3), rng)
        with pytest.raises(ValueError, match="adaptation"):
            sgfi_loss([proposal((0, 0, 8, 8), 0)], s, t, module)

    def test_bad_tau_init(self, rng):
        with pytest.raises(ValueError):
            SgfiModule(3, 4, 2, SgfiConfig(tau_init=0.0), rng)


class TestMasks:
    SHAPES = [(8, 8, 4), (4, 4, 8)]

    def test_whole(self):
        m = make_masks([], self.SHAPES, "whole")
        assert m.num_positive == 64 + 16

    def test_gt_box_cells(self):
        m = make_masks([Box(4, 4, 12, 8)], self.SHAPES, "gt_box")
        expected = np.zeros((8, 8))
        expected[1:2, 1:3] = 1
        np.testing.assert_array_equal(m.levels[0], expected)
        expected = np.zeros((4, 4))
        expected[0:1, 0:2] = 1
        np.testing.assert_array_equal(m.levels[1], expected)

    def test_unknown_kind(self):
        with pytest.raises(ValueError):
            make_masks([], self.SHAPES, "fine")

    def test_loss_value(self, rng):
        s = random_pyramid(rng, 2, sizes=((2, 2),))
        t = random_pyramid(rng, 2, sizes=((2, 2),))
        from detkd.models import AdaptationMap

        adap = AdaptationMap(2, 2, 1, rng)
        adap.maps[0].weight.data = np.eye(2)
        mask = make_masks([Box(0, 0, 4, 4)], [(2, 2, 4)], "gt_box")
        assert mask.num_positive == 1
        expected = 0.5 * np.sum((s.levels[0].data[0] - t.levels[0].data[0]) ** 2)
        np.testing.assert_allclose(float(masked_imitation_loss(s, t, mask, adap).data), expected)

    def test_empty_mask_is_zero(self, rng):
        s, t = random_pyramid(rng, 2), random_pyramid(rng, 2)
        from detkd.models import AdaptationMap

        mask = make_masks([], [(h, w, st) for (h, w), st in zip(s.sizes, s.strides)], "gt_box")
        assert float(masked_imitation_loss(s, t, mask, AdaptationMap(2, 2, 3, rng)).data) == 0.0

    def test_misaligned_pyramids(self, rng):
        s = random_pyramid(rng, 2, sizes=((4, 4), (2, 2)))
        t = random_pyramid(rng, 2)
        from detkd.models import AdaptationMap

        with pytest.raises(UnsupportedPairError):
            masked_imitation_loss(s, t, make_masks([], [(4, 4, 4), (2, 2, 8)], "whole"), AdaptationMap(2, 2, 2, rng))
