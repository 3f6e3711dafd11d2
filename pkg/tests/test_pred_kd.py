import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from detkd import tensor as T
from detkd.pred_kd import (
    class_aware_reg_loss,
    cls_kd_loss,
    convert_dense_logits,
    gather_class,
    naive_reg_kd,
    total_loss,
)
from detkd.tensor import Tensor


class TestClsKd:
    def test_uniform_pair_is_ln2(self):
        loss = cls_kd_loss(np.array([[0.5, 0.5]]), Tensor(np.array([[0.5, 0.5]])))
        np.testing.assert_allclose(float(loss.data), math.log(2), rtol=1e-12)

    def test_minimised_at_teacher(self, rng):
        p_t = np.array([[0.6, 0.3, 0.1]])
        best = float(cls_kd_loss(p_t, Tensor(p_t)).data)
        for _ in range(20):
            q = rng.dirichlet(np.ones(3))[None]
            assert float(cls_kd_loss(p_t, Tensor(q)).data) >= best - 1e-12

    def test_zero_student_probability_is_finite(self):
        loss = cls_kd_loss(np.array([[1.0, 0.0]]), Tensor(np.array([[0.0, 1.0]])))
        assert np.isfinite(float(loss.data))

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            cls_kd_loss(np.ones((2, 3)) / 3, Tensor(np.ones((2, 2)) / 2))


class TestRegKd:
    def test_naive_value(self):
        reg_t = np.array([[1.0, 2.0, 3.0, 4.0], [0.0, 0.0, 0.0, 0.0]])
        reg_s = Tensor(np.array([[0.0, 2.0, 3.0, 5.0], [1.0, -1.0, 0.0, 0.0]]))
        assert float(naive_reg_kd(reg_t, reg_s).data) == pytest.approx((2 + 2) / 2)

    def test_class_aware_cancellation(self):
        p = np.array([[0.5, 0.5]])
        reg_t = np.zeros((1, 2, 4))
        reg_s = np.zeros((1, 2, 4))
        reg_t[0, 0] = 2.0
        reg_t[0, 1] = -2.0
        assert float(class_aware_reg_loss(p, reg_t, Tensor(reg_s)).data) == 0.0

    @given(
        seed=st.integers(0, 2**31),
        n=st.integers(1, 5),
        c=st.integers(1, 6),
    )
    def test_one_hot_reduces_to_naive(self, seed, n, c):
        rng = np.random.default_rng(seed)
        labels = rng.integers(1, c + 1, size=n)
        p = np.eye(c)[labels - 1]
        reg_t, reg_s = rng.normal(size=(n, c, 4)), Tensor(rng.normal(size=(n, c, 4)))
        ca = float(class_aware_reg_loss(p, reg_t, reg_s).data)
        naive = float(naive_reg_kd(reg_t[np.arange(n), labels - 1], gather_class(reg_s, labels)).data)
        assert abs(ca - naive) <= 1e-12

    def test_shape_checks(self):
        with pytest.raises(ValueError):
            class_aware_reg_loss(np.ones((2, 3)), np.zeros((2, 3, 4)), Tensor(np.zeros((2, 2, 4))))
        with pytest.raises(ValueError):
            naive_reg_kd(np.zeros((2, 4)), Tensor(np.zeros((3, 4))))

    def test_empty(self):
        assert float(naive_reg_kd(np.zeros((0, 4)), Tensor(np.zeros((0, 4)))).data) == 0.0
        assert float(class_aware_reg_loss(np.zeros((0, 2)), np.zeros((0, 2, 4)), Tensor(np.zeros((0, 2, 4)))).data) == 0.0


class TestConversion:
    def test_worked_value(self):
        # columns (c1, c2); c1 holds the maximum so it maps to 1
        out = convert_dense_logits(Tensor(np.array([[0.0, 1.0, 0.0]]))).data
        np.testing.assert_allclose(out, [[1.0, math.exp(-1)]], atol=1e-9)

    def test_equal_logits(self):
        np.testing.assert_allclose(convert_dense_logits(Tensor(np.zeros((2, 3)))).data, 1.0)

    def test_softmax_values(self):
        p = T.softmax(Tensor(np.array([[0.0, 1.0, 0.0]])), axis=1).data
        np.testing.assert_allclose(p, [[0.2119, 0.5761, 0.2119]], atol=1e-4)

    def test_background_winner_scales_below_one(self):
        out = convert_dense_logits(Tensor(np.array([[3.0, 1.0, 0.0]]))).data
        assert out.max() < 1.0

    @given(hnp.arrays(np.float64, (4, 5), elements=st.floats(-30, 30)))
    def test_range_and_argmax(self, logits):
        out = convert_dense_logits(Tensor(logits)).data
        assert np.all(out > 0) and np.all(out <= 1.0)
        fg_wins = logits[:, 1:].max(axis=1) >= logits.max(axis=1)
        rows = np.flatnonzero(fg_wins)
        np.testing.assert_allclose(out[rows, logits[rows, 1:].argmax(axis=1)], 1.0)


class TestTotalLoss:
    def test_weighted_sum(self):
        total = total_loss({"gt": Tensor(1.0), "feat": Tensor(2.0)}, weights={"feat": 0.5})
        assert float(total.data) == 2.0

    def test_mode_recipes(self):
        with pytest.raises(ValueError, match="not valid"):
            total_loss({"cls_dense": Tensor(1.0)}, mode="homogeneous")
        with pytest.raises(ValueError, match="not valid"):
            total_loss({"reg": Tensor(1.0)}, mode="heterogeneous")
        with pytest.raises(ValueError):
            total_loss({}, mode="other")
        assert float(total_loss({"gt": 1.0, "cls_dense": 2.0}, mode="heterogeneous").data) == 3.0
