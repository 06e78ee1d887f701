import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from sacdnet.nn.rng import RngStream
from sacdnet.nn.tensor import (
    Tensor,
    add,
    backward,
    bce_loss,
    concat,
    dropout_mask,
    embedding_lookup,
    masked_mean,
    matmul,
    mul,
    reshape,
    scale,
    softmax_rows,
    tmean,
    tsum,
)

from gradcheck import check_gradients


class TestSoftmaxRows:
    def test_uniform_on_constant_row(self):
        out = softmax_rows(Tensor([[0.0, 0.0, 0.0]]))
        np.testing.assert_allclose(out.data, [[1 / 3, 1 / 3, 1 / 3]])

    def test_large_logits_stay_finite(self):
        out = softmax_rows(Tensor([[1000.0, 0.0]]))
        assert np.isfinite(out.data).all()
        np.testing.assert_allclose(out.data, [[1.0, 0.0]], atol=1e-12)

    def test_hand_computed_row(self):
        out = softmax_rows(Tensor([[1.0, 2.0, 3.0]]))
        np.testing.assert_allclose(out.data, [[0.09003, 0.24473, 0.66524]],
                                   atol=1e-5)

    def test_rows_sum_to_one(self):
        rng = RngStream(1)
        x = Tensor(rng.normal(0, 5, (20, 7)))
        out = softmax_rows(x)
        np.testing.assert_allclose(out.data.sum(axis=-1), 1.0, atol=1e-9)

    def test_nonfinite_input_names_row(self):
        x = np.zeros((3, 4))
        x[2, 1] = np.nan
        with pytest.raises(ValueError, match=r"row \(2,\)"):
            softmax_rows(Tensor(x))

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-50, 50), min_size=2, max_size=8),
           st.floats(-100, 100))
    def test_shift_invariance(self, row, shift):
        base = softmax_rows(Tensor([row])).data
        shifted = softmax_rows(Tensor([[v + shift for v in row]])).data
        np.testing.assert_allclose(base, shifted, atol=1e-9)


class TestOpGradients:
    def test_matmul_weight_shared_over_batch(self):
        rng = RngStream(2)
        x = Tensor(rng.normal(0, 1, (3, 4, 5)))
        w = Tensor(rng.normal(0, 1, (5, 2)), requires_grad=True)
        check_gradients(lambda: tsum(matmul(x, w)), {"w": w})

    def test_add_bias_broadcast(self):
        rng = RngStream(3)
        x = Tensor(rng.normal(0, 1, (4, 6)), requires_grad=True)
        b = Tensor(rng.normal(0, 1, 6), requires_grad=True)
        check_gradients(lambda: tsum(add(x, b)), {"x": x, "b": b})

    def test_mul_and_scale(self):
        rng = RngStream(4)
        a = Tensor(rng.normal(0, 1, (3, 3)), requires_grad=True)
        b = Tensor(rng.normal(0, 1, (3, 3)), requires_grad=True)
        check_gradients(lambda: tsum(scale(mul(a, b), 2.5)), {"a": a, "b": b})

    def test_concat_splits_gradient(self):
        rng = RngStream(5)
        a = Tensor(rng.normal(0, 1, (2, 3)), requires_grad=True)
        b = Tensor(rng.normal(0, 1, (2, 4)), requires_grad=True)
        check_gradients(lambda: tmean(concat([a, b], axis=-1)), {"a": a, "b": b})

    def test_softmax_gradient(self):
        rng = RngStream(6)
        x = Tensor(rng.normal(0, 2, (4, 5)), requires_grad=True)
        w = Tensor(rng.normal(0, 1, (5, 1)), requires_grad=True)
        check_gradients(lambda: tsum(matmul(softmax_rows(x), w)),
                        {"x": x, "w": w})

    def test_masked_mean_gradient(self):
        rng = RngStream(7)
        x = Tensor(rng.normal(0, 1, (2, 5, 3)), requires_grad=True)
        mask = np.array([[True, False, True, True, False]] * 2)
        check_gradients(lambda: tsum(masked_mean(x, mask)), {"x": x})

    def test_embedding_gradient(self):
        rng = RngStream(8)
        table = Tensor(rng.normal(0, 1, (6, 4)), requires_grad=True)
        idx = np.array([[1, 3, 3], [5, 0, 2]])
        check_gradients(lambda: tsum(embedding_lookup(table, idx)), {"t": table})

    def test_reshape_gradient(self):
        rng = RngStream(9)
        x = Tensor(rng.normal(0, 1, (2, 6)), requires_grad=True)
        check_gradients(lambda: tsum(reshape(x, (3, 4))), {"x": x})


class TestBceLoss:
    def test_perfect_prediction_is_zero(self):
        loss = bce_loss(Tensor([1.0]), np.array([1.0]))
        assert float(loss.data) == pytest.approx(0.0, abs=1e-10)

    def test_coin_flip_is_ln2(self):
        loss = bce_loss(Tensor([0.5, 0.5]), np.array([0.0, 1.0]))
        assert float(loss.data) == pytest.approx(math.log(2.0), abs=1e-12)

    def test_confident_mistake(self):
        loss = bce_loss(Tensor([0.9]), np.array([0.0]))
        assert float(loss.data) == pytest.approx(-math.log(0.1), abs=1e-9)

    def test_length_mismatch_raises(self):
        with pytest.raises(ValueError, match="length mismatch"):
            bce_loss(Tensor([0.5, 0.5]), np.array([1.0]))

    def test_nonbinary_target_raises(self):
        with pytest.raises(ValueError, match="0 or 1"):
            bce_loss(Tensor([0.5]), np.array([0.3]))

    def test_gradient(self):
        rng = RngStream(10)
        p = Tensor(rng.uniform(0.05, 0.95, 8), requires_grad=True)
        y = (rng.random(8) < 0.5).astype(float)
        check_gradients(lambda: bce_loss(p, y), {"p": p})

    def test_nonnegative(self):
        rng = RngStream(11)
        for _ in range(20):
            p = Tensor(rng.uniform(0.0, 1.0, 10))
            y = (rng.random(10) < 0.5).astype(float)
            assert float(bce_loss(p, y).data) >= 0.0


class TestBackward:
    def test_sum_of_weights_gives_ones(self):
        w = Tensor(np.arange(6.0).reshape(2, 3), requires_grad=True)
        backward(tsum(w))
        np.testing.assert_array_equal(w.grad, np.ones((2, 3)))

    def test_repeated_backward_accumulates(self):
        w = Tensor(np.ones((2, 2)), requires_grad=True)
        loss = tsum(w)
        backward(loss)
        backward(loss)
        np.testing.assert_array_equal(w.grad, 2.0 * np.ones((2, 2)))

    def test_zero_grad_resets(self):
        w = Tensor(np.ones(3), requires_grad=True)
        backward(tsum(w))
        w.zero_grad()
        np.testing.assert_array_equal(w.grad, np.zeros(3))

    def test_graph_free_scalar_raises(self):
        with pytest.raises(ValueError, match="no recorded computation graph"):
            backward(Tensor(1.0))

    def test_nonscalar_loss_raises(self):
        w = Tensor(np.ones(3), requires_grad=True)
        out = scale(w, 2.0)
        with pytest.raises(ValueError, match="scalar"):
            backward(out)

    def test_diamond_graph_accumulates_both_paths(self):
        w = Tensor(np.array([[2.0]]), requires_grad=True)
        out = tsum(add(mul(w, w), w))  # d/dw (w^2 + w) = 2w + 1
        backward(out)
        np.testing.assert_allclose(w.grad, [[5.0]])

    def test_fixed_seed_forward_backward_is_bit_reproducible(self):
        def run():
            rng = RngStream(123)
            w = Tensor(rng.normal(0, 1, (4, 3)), requires_grad=True)
            x = Tensor(rng.normal(0, 1, (5, 4)))
            keep = rng.random((5, 3)) >= 0.3
            out = dropout_mask(matmul(x, w), keep, 0.3)
            backward(tsum(out))
            return w.grad.copy()

        first, second = run(), run()
        np.testing.assert_array_equal(first, second)


class TestDropoutMaskOp:
    def test_mask_scales_survivors(self):
        x = Tensor(np.ones((2, 2)))
        keep = np.array([[True, False], [True, True]])
        out = dropout_mask(x, keep, 0.5)
        np.testing.assert_allclose(out.data, [[2.0, 0.0], [2.0, 2.0]])

    def test_gradient_respects_mask(self):
        x = Tensor(np.ones((2, 2)), requires_grad=True)
        keep = np.array([[True, False], [False, True]])
        backward(tsum(dropout_mask(x, keep, 0.5)))
        np.testing.assert_allclose(x.grad, [[2.0, 0.0], [0.0, 2.0]])


class TestInvariants:
    def test_grad_allocated_only_for_trainables(self):
        a = Tensor(np.ones(3))
        b = Tensor(np.ones(3), requires_grad=True)
        assert a.grad is None
        assert b.grad is not None and not b.grad.any()

    def test_finite_forward_on_finite_input(self):
        rng = RngStream(12)
        x = Tensor(rng.normal(0, 10, (6, 6)))
        out = softmax_rows(scale(matmul(x, Tensor(rng.normal(0, 10, (6, 6)))), 0.1))
        assert np.isfinite(out.data).all()
