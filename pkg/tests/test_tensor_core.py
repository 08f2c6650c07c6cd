"""
File: test_tensor_core.py
Purpose: Tests for tensors, differentiable ops, backward and the finite-difference oracle
Version: 1.0.0
Last Updated: 2026-10-16
"""
import math

import numpy as np
import pytest

from src.exceptions import ContractError, DimensionError, NonFiniteError
from src.tensor_core import (GELU_A, GELU_C, Graph, Tensor, _make, add, attention, backward, concat, embedding,
                             finite_diff_check, gelu, is_grad_enabled, layer_norm, log, logsumexp, l2_normalize,
                             matmul, mean, no_grad, set_debug_finite, sigmoid, softmax_rows, softplus, take, tsum)


class TestTensor:
    """Test suite for the Tensor type."""

    def test_data_is_float64(self):
        t = Tensor([[1, 2], [3, 4]])
        assert t.data.dtype == np.float64
        assert t.shape == (2, 2)
        assert t.ndim == 2

    def test_item_needs_scalar(self):
        assert Tensor(3.5).item() == 3.5
        with pytest.raises(ContractError):
            Tensor([1.0, 2.0]).item()

    def test_division_only_by_constant(self):
        t = Tensor([2.0, 4.0])
        assert np.array_equal((t / 2).data, [1.0, 2.0])
        with pytest.raises(ContractError):
            t / Tensor(2.0)

    def test_detach_drops_graph(self):
        x = Tensor([1.0], requires_grad=True)
        y = (x * 2.0).detach()
        assert not y.requires_grad
        assert y.is_leaf


class TestElementwise:
    """Test suite for arithmetic and nonlinearities."""

    def test_broadcast_add_gradient_is_summed(self):
        x = Tensor(np.ones((3, 4)), requires_grad=True)
        b = Tensor(np.zeros(4), requires_grad=True)
        backward(tsum(add(x, b)))
        assert np.array_equal(b.grad, np.full(4, 3.0))
        assert np.array_equal(x.grad, np.ones((3, 4)))

    def test_incompatible_shapes_raise(self):
        with pytest.raises(DimensionError) as exc:
            add(Tensor(np.ones((2, 3))), Tensor(np.ones((4,))))
        assert "(2, 3)" in str(exc.value)
        with pytest.raises(DimensionError):
            matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))

    def test_sigmoid_and_gelu_at_zero(self):
        assert sigmoid(Tensor(0.0)).item() == 0.5
        assert gelu(Tensor(0.0)).item() == 0.0

    def test_gelu_matches_tanh_formula(self):
        x = np.linspace(-4, 4, 17)
        expected = 0.5 * x * (1 + np.tanh(GELU_C * (x + GELU_A * x ** 3)))
        assert np.allclose(gelu(Tensor(x)).data, expected, atol=1e-15)

    def test_softplus_is_stable(self):
        out = softplus(Tensor([-1000.0, 0.0, 1000.0])).data
        assert np.all(np.isfinite(out))
        assert out[0] == pytest.approx(0.0, abs=1e-300)
        assert out[1] == pytest.approx(math.log(2.0), abs=1e-15)
        assert out[2] == 1000.0


class TestReductions:
    """Test suite for softmax, logsumexp, layer_norm and l2_normalize."""

    def test_softmax_rows_sum_to_one(self, rng):
        p = softmax_rows(Tensor(rng.normal(size=(5, 7)) * 10)).data
        assert np.allclose(p.sum(axis=-1), 1.0, atol=1e-12)
        assert np.all(p >= 0)

    def test_softmax_shift_invariant_and_uniform(self):
        row = np.array([[1.0, 2.0, 3.0]])
        assert np.allclose(softmax_rows(Tensor(row)).data, softmax_rows(Tensor(row + 1000.0)).data, atol=1e-15)
        assert np.allclose(softmax_rows(Tensor(np.full((1, 4), 7.0))).data, 0.25)

    def test_logsumexp_large_values(self):
        out = logsumexp(Tensor([[1000.0, 1000.0]])).data
        assert out[0] == pytest.approx(1000.0 + math.log(2.0), abs=1e-12)

    def test_logsumexp_mask(self):
        x = Tensor([[0.0, 5.0, 0.0]])
        masked = logsumexp(x, np.array([[True, False, True]])).item()
        assert masked == pytest.approx(math.log(2.0), abs=1e-15)
        with pytest.raises(ContractError):
            logsumexp(x, np.array([[False, False, False]]))

    def test_layer_norm_identity(self, rng):
        x = Tensor(rng.normal(3.0, 5.0, size=(4, 8)))
        out = layer_norm(x, eps=0.0).data
        assert np.allclose(out.mean(axis=-1), 0.0, atol=1e-12)
        assert np.allclose(out.var(axis=-1), 1.0, atol=1e-12)

    def test_worked_rows(self):
        p = softmax_rows(Tensor([[2.0, 0.0]])).data[0]
        assert p == pytest.approx([0.880797, 0.119203], abs=1e-6)
        assert p[0] == pytest.approx(math.exp(2.0) / (math.exp(2.0) + 1.0), abs=1e-15)
        assert layer_norm(Tensor([[1.0, 2.0, 3.0]]), eps=1e-5).data[0] == pytest.approx([-1.224734, 0.0, 1.224734],
                                                                                         abs=1e-5)
        assert np.array_equal(layer_norm(Tensor([[5.0, 5.0, 5.0, 5.0]])).data, np.zeros((1, 4)))

    def test_layer_norm_needs_two_features(self):
        with pytest.raises(DimensionError):
            layer_norm(Tensor(np.ones((3, 1))))

    def test_l2_normalize(self, rng):
        out = l2_normalize(Tensor(rng.normal(size=(6, 5)))).data
        assert np.allclose(np.linalg.norm(out, axis=-1), 1.0, atol=1e-12)
        zero = l2_normalize(Tensor(np.zeros((1, 3)))).data
        assert np.all(np.isfinite(zero))
        assert np.array_equal(zero, np.zeros((1, 3)))


class TestIndexing:
    """Test suite for take, embedding and concat backward."""

    def test_take_scatter_adds(self):
        x = Tensor(np.arange(3.0), requires_grad=True)
        backward(tsum(take(x, np.array([0, 0, 1]))))
        assert np.array_equal(x.grad, [2.0, 1.0, 0.0])

    def test_embedding_bounds(self):
        table = Tensor(np.eye(4))
        assert np.array_equal(embedding(table, np.array([[3, 1]])).data[0], [[0, 0, 0, 1], [0, 1, 0, 0]])
        with pytest.raises(DimensionError):
            embedding(table, np.array([4]))

    def test_concat_splits_gradient(self):
        a = Tensor(np.ones((2, 2)), requires_grad=True)
        b = Tensor(np.ones((1, 2)), requires_grad=True)
        out = concat([a, b], axis=0)
        weights = Tensor(np.array([[1.0, 1.0], [2.0, 2.0], [3.0, 3.0]]))
        backward(tsum(out * weights))
        assert np.array_equal(a.grad, [[1.0, 1.0], [2.0, 2.0]])
        assert np.array_equal(b.grad, [[3.0, 3.0]])


class TestBackward:
    """Test suite for graph construction and gradient accumulation."""

    def test_shared_leaf_accumulates(self):
        x = Tensor([1.0, -2.0, 3.0], requires_grad=True)
        backward(tsum(x * x))
        assert np.array_equal(x.grad, [2.0, -4.0, 6.0])

    def test_matmul_worked_example(self):
        a = Tensor([[1.0, 2.0], [3.0, 4.0]])
        assert np.array_equal(matmul(a, Tensor([[5.0, 6.0], [7.0, 8.0]])).data, [[19.0, 22.0], [43.0, 50.0]])
        assert np.array_equal(matmul(Tensor(np.eye(2)), a).data, a.data)

    def test_second_pass_is_bitwise_identical(self, rng):
        w = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        x = Tensor(rng.normal(size=(5, 4)))
        loss = mean(gelu(layer_norm(matmul(x, w))) * 1.7)
        graph = backward(loss)
        first = w.grad.copy()
        w.grad = None
        backward(loss, graph)
        assert np.array_equal(w.grad, first)

    def test_non_scalar_loss_rejected(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with pytest.raises(ContractError):
            backward(x * 2.0)

    def test_graph_records_in_topological_order(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        y = tsum(sigmoid(x * 3.0))
        graph = Graph(y)
        assert [r.op for r in graph.records] == ["mul", "sigmoid", "sum"]
        assert graph.leaves == [x]

    def test_unreached_params_get_zero_grad(self):
        x = Tensor([1.0], requires_grad=True)
        unused = Tensor([5.0, 6.0], requires_grad=True)
        backward(tsum(x * 2.0), params=[x, unused])
        assert np.array_equal(unused.grad, [0.0, 0.0])

    def test_no_grad_records_nothing(self):
        x = Tensor([1.0], requires_grad=True)
        with no_grad():
            assert not is_grad_enabled()
            y = x * 2.0
        assert is_grad_enabled()
        assert not y.requires_grad

    def test_debug_finite_raises(self):
        set_debug_finite(True)
        try:
            with pytest.raises(NonFiniteError):
                with np.errstate(divide="ignore"):
                    log(Tensor([0.0]))
        finally:
            set_debug_finite(False)


class TestAttention:
    """Test suite for scaled dot-product attention."""

    def test_single_key_returns_value(self, rng):
        q = Tensor(rng.normal(size=(2, 5, 4)))
        k = Tensor(rng.normal(size=(2, 1, 4)))
        v = Tensor(rng.normal(size=(2, 1, 4)))
        out = attention(q, k, v, n_heads=2).data
        assert np.allclose(out, np.broadcast_to(v.data, (2, 5, 4)), atol=1e-15)

    def test_masked_keys_are_ignored(self, rng):
        q = Tensor(rng.normal(size=(1, 3, 4)))
        kv = rng.normal(size=(1, 3, 4))
        bias = np.array([0.0, 0.0, -1e9])[None, None, None, :]
        full = attention(q, Tensor(kv), Tensor(kv), 2, bias).data
        changed = kv.copy()
        changed[0, 2] = 100.0
        assert np.allclose(attention(q, Tensor(changed), Tensor(changed), 2, bias).data, full, atol=1e-12)

    def test_head_split_must_divide(self):
        x = Tensor(np.ones((1, 2, 6)))
        with pytest.raises(DimensionError):
            attention(x, x, x, n_heads=4)


class TestFiniteDifference:
    """Test suite for the finite-difference gradient oracle."""

    def test_mean_matmul_matches(self, rng):
        a = Tensor(rng.uniform(0.5, 1.5, size=(3, 3)), requires_grad=True)
        b = Tensor(rng.uniform(0.5, 1.5, size=(3, 3)), requires_grad=True)
        err = finite_diff_check(lambda: mean(matmul(a, b)), [a, b], h=1e-6)
        assert err < 1e-7

    def test_sum_of_squares(self, rng):
        x = Tensor(rng.uniform(0.5, 1.5, size=10), requires_grad=True)
        err = finite_diff_check(lambda: tsum(x * x), [x], h=1e-4)
        assert err < 1e-9

    def test_detects_wrong_gradient(self):
        x = Tensor([1.0, 2.0], requires_grad=True)

        def f():
            # Square whose backward is off by a factor of two
            return tsum(_make(x.data ** 2, (x,), "bad_square", lambda g: (g * x.data,)))
        assert finite_diff_check(f, [x]) > 0.4

    def test_step_bounds(self):
        x = Tensor([1.0], requires_grad=True)
        with pytest.raises(ContractError):
            finite_diff_check(lambda: tsum(x), [x], h=1e-2)

    def test_coordinate_sampling(self, rng):
        x = Tensor(rng.uniform(0.5, 1.5, size=50), requires_grad=True)
        err = finite_diff_check(lambda: tsum(x * x * x), [x], h=1e-5, floor=1e-4, max_coords=5, rng=rng)
        assert err < 1e-5
