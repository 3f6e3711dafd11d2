import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from detkd import tensor as T
from detkd.optim import OptimizerState, cosine_lr, sgd_step
from detkd.oracle import finite_diff_grad, relative_error
from detkd.tensor import Tensor

finite = st.floats(-20, 20, allow_nan=False, allow_infinity=False)


def numeric_vs_analytic(fn, *shapes, seed=0):
    rng = np.random.default_rng(seed)
    xs = [Tensor(rng.normal(size=s), requires_grad=True) for s in shapes]
    grads = T.backward(fn(*xs), xs)
    num = finite_diff_grad(lambda: float(fn(*xs).data), {str(i): x.data for i, x in enumerate(xs)})
    return max(relative_error(g, num[str(i)]) for i, g in enumerate(grads))


class TestElementwise:
    def test_relu(self):
        np.testing.assert_array_equal(T.relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])

    def test_add_zeros_is_identity(self, rng):
        x = Tensor(rng.normal(size=(3, 4)))
        np.testing.assert_array_equal(T.add(x, T.zeros_like(x)).data, x.data)

    def test_square_gradient_at_three(self):
        x = Tensor([3.0], requires_grad=True)
        (g,) = T.backward(T.tsum(T.mul(x, x)), [x])
        np.testing.assert_allclose(g, [6.0], atol=1e-12)
        num = finite_diff_grad(lambda: float((x.data**2).sum()), {"x": x.data})
        np.testing.assert_allclose(num["x"], [6.0], atol=1e-9)

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            T.add(Tensor(np.ones(3)), Tensor(np.ones((3, 1))))

    def test_scalar_broadcasts(self):
        out = T.mul(Tensor(np.ones((2, 2))), 3.0)
        np.testing.assert_array_equal(out.data, np.full((2, 2), 3.0))

    def test_log_of_nonpositive_fails(self):
        with pytest.raises(ValueError):
            T.log(Tensor([0.0, 1.0]))

    def test_explicit_broadcast(self):
        row = Tensor([[1.0, 2.0]], requires_grad=True)
        out = T.broadcast_to(row, (3, 2))
        (g,) = T.backward(T.tsum(out), [row])
        np.testing.assert_array_equal(g, [[3.0, 3.0]])


class TestMatmul:
    def test_identity(self, rng):
        m = rng.normal(size=(2, 3))
        np.testing.assert_array_equal(T.matmul(Tensor(np.eye(2)), m).data, m)

    def test_hand_value(self):
        out = T.matmul(Tensor([[1.0, 2.0], [3.0, 4.0]]), Tensor([[5.0], [6.0]]))
        np.testing.assert_array_equal(out.data, [[17.0], [39.0]])

    @pytest.mark.parametrize("seed", range(10))
    def test_gradient(self, seed):
        err = numeric_vs_analytic(lambda a, b: T.tsum(T.matmul(a, b)), (3, 4), (4, 2), seed=seed)
        assert err <= 1e-6

    def test_inner_dimension_checked(self):
        with pytest.raises(ValueError):
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))


class TestSoftmax:
    def test_uniform(self):
        np.testing.assert_allclose(T.softmax(Tensor([0.0, 0.0, 0.0])).data, [1 / 3] * 3, atol=1e-15)

    def test_hand_value(self):
        np.testing.assert_allclose(T.softmax(Tensor([1.0, 2.0])).data, [0.2689414213699951, 0.7310585786300049])

    @given(arrays(np.float64, (4, 5), elements=finite), st.floats(-50, 50))
    def test_probability_rows_and_shift(self, x, c):
        p = T.softmax(Tensor(x), axis=1).data
        assert (p >= 0).all()
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)
        np.testing.assert_allclose(T.softmax(Tensor(x + c), axis=1).data, p, atol=1e-12)

    def test_large_inputs_stay_finite(self):
        p = T.softmax(Tensor([1000.0, 0.0, -1000.0])).data
        assert np.isfinite(p).all()

    @pytest.mark.parametrize("seed", range(10))
    def test_gradient(self, seed):
        w = np.random.default_rng(100 + seed).normal(size=(3, 4))
        err = numeric_vs_analytic(lambda x: T.tsum(T.mul(T.softmax(x, axis=1), w)), (3, 4), seed=seed)
        assert err <= 1e-4


class TestReductions:
    def test_mse_identity(self, rng):
        v = rng.normal(size=5)
        assert float(T.mse(Tensor(v), v).data) == 0.0

    def test_mse_hand_value(self):
        assert float(T.mse(Tensor([1.0, 2.0]), [3.0, 2.0]).data) == 2.0

    def test_cosine_orthogonal(self):
        assert float(T.cosine_similarity(Tensor([[1.0, 0.0]]), Tensor([[0.0, 1.0]])).data[0]) == 0.0

    def test_cosine_zero_vector_is_finite(self):
        assert np.isfinite(T.cosine_similarity(Tensor([[0.0, 0.0]]), Tensor([[1.0, 0.0]])).data).all()

    def test_mse_stationary_at_target(self, rng):
        c = rng.normal(size=4)
        x = Tensor(c.copy(), requires_grad=True)
        (g,) = T.backward(T.mse(x, c), [x])
        np.testing.assert_array_equal(g, np.zeros(4))

    @pytest.mark.parametrize(
        "name,fn",
        [
            ("sum_axis", lambda x: T.tsum(T.mul(T.tsum(x, axis=0), T.tsum(x, axis=0)))),
            ("mean", lambda x: T.mul(T.mean(x), T.mean(x))),
            ("l1", lambda x: T.l1(x, np.full((3, 4), 5.0))),
            ("cosine", lambda x: T.tsum(T.cosine_similarity(x, np.arange(12.0).reshape(3, 4)))),
            ("log_softmax", lambda x: T.tsum(T.take(T.log_softmax(x, axis=1), (slice(None), 0)))),
            ("max", lambda x: T.tsum(T.tmax(x, axis=1))),
            ("sqrt_exp", lambda x: T.tsum(T.sqrt(T.exp(x)))),
        ],
    )
    def test_gradients(self, name, fn):
        for seed in range(10):
            assert numeric_vs_analytic(fn, (3, 4), seed=seed) <= 1e-4, name


class TestBackward:
    def test_unused_param_gets_zero(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        p = Tensor([[1.0]], requires_grad=True)
        grads = T.backward(T.tsum(T.mul(x, x)), [x, p])
        np.testing.assert_array_equal(grads[1], np.zeros((1, 1)))
        assert grads[1].shape == p.shape

    def test_shared_node_accumulates(self):
        x = Tensor(2.0, requires_grad=True)
        y = T.mul(x, x)
        (g,) = T.backward(T.add(y, y), [x])
        assert float(g) == 8.0

    def test_needs_scalar_loss(self):
        with pytest.raises(ValueError):
            T.backward(Tensor(np.ones(2), requires_grad=True), [])

    def test_deep_chain(self):
        x = Tensor(1.0, requires_grad=True)
        y = x
        for _ in range(3000):
            y = T.scale(y, 1.0)
        (g,) = T.backward(y, [x])
        assert float(g) == 1.0


class TestOptimizer:
    def test_reference_defaults(self):
        s = OptimizerState(10)
        assert s.momentum == 0.9 and s.weight_decay == 1e-4

    def test_cosine_endpoints(self):
        assert cosine_lr(0, 100, 0.3, 0.01) == 0.3
        assert math.isclose(cosine_lr(100, 100, 0.3, 0.01), 0.01)

    @given(st.integers(1, 500))
    def test_cosine_nonincreasing(self, total):
        lrs = [cosine_lr(t, total, 1.0) for t in range(total + 1)]
        assert all(a >= b for a, b in zip(lrs, lrs[1:]))

    def test_plain_sgd_step(self):
        p = {"w": Tensor(1.0)}
        sgd_step(p, {"w": np.array(1.0)}, OptimizerState(10, lr0=0.1, momentum=0.0, weight_decay=0.0))
        assert math.isclose(float(p["w"].data), 0.9)

    def test_momentum_accumulates(self):
        p = {"w": Tensor(0.0)}
        state = OptimizerState(10, lr0=1.0, lr_min=1.0, momentum=0.5, weight_decay=0.0)
        for _ in range(2):
            sgd_step(p, {"w": np.array(1.0)}, state)
        assert float(p["w"].data) == -2.5

    def test_overrun_rejected(self):
        state = OptimizerState(1)
        p = {"w": Tensor(0.0)}
        sgd_step(p, {"w": np.array(1.0)}, state)
        with pytest.raises(ValueError):
            sgd_step(p, {"w": np.array(1.0)}, state)


class TestCheckpoint:
    def test_round_trip(self, tmp_path, rng):
        params = {"a": Tensor(rng.normal(size=(2, 3))), "b": Tensor(rng.normal(size=4))}
        T.save_params(tmp_path / "p.json", params)
        back = T.load_params(tmp_path / "p.json")
        for k in params:
            np.testing.assert_array_equal(back[k], params[k].data)

    def test_version_checked(self):
        with pytest.raises(ValueError):
            T.params_from_json({"format_version": 99, "params": {}})
