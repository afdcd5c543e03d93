"""Tests for the reverse-mode tape: graph construction and backward sweeps."""

import numpy as np
import pytest

from lidarpose.autodiff import NonFiniteError, Tensor, backward_from
from lidarpose.nn import add, linear, mean_fuse, relu, reshape


class TestTensor:
    def test_value_coerced_to_float64(self):
        t = Tensor(np.arange(4, dtype=np.int32))
        assert t.value.dtype == np.float64

    def test_shape_and_size(self):
        t = Tensor(np.zeros((2, 3)))
        assert t.shape == (2, 3)
        assert t.size == 6

    def test_grad_starts_unset(self):
        assert Tensor(1.0).grad is None

    def test_ensure_grad_allocates_zeros(self):
        t = Tensor(np.ones((3, 2)))
        g = t.ensure_grad()
        assert g.shape == (3, 2)
        assert np.all(g == 0.0)
        assert t.ensure_grad() is g

    def test_nan_raises_with_node_name(self):
        with pytest.raises(NonFiniteError, match="bad_node"):
            Tensor(np.array([1.0, np.nan]), name="bad_node")

    def test_inf_raises(self):
        with pytest.raises(NonFiniteError):
            Tensor(np.array([np.inf]))

    def test_nonfinite_is_floating_point_error(self):
        # Callers may catch the stdlib base class.
        assert issubclass(NonFiniteError, FloatingPointError)

    def test_repr_names_tensor(self):
        assert "mytensor" in repr(Tensor(0.0, name="mytensor"))


class TestBackwardFrom:
    def test_chain_gradient(self):
        x = Tensor(np.array([[1.0, -2.0, 3.0]]))
        y = relu(x)
        backward_from([(y, np.ones_like(y.value))])
        assert np.array_equal(x.grad, [[1.0, 0.0, 1.0]])

    def test_shared_parent_accumulates_both_paths(self):
        # Diamond: x feeds two branches that are summed; dx = 2.
        x = Tensor(np.array([3.0]))
        y = add(x, x)
        backward_from([(y, np.array([1.0]))])
        assert np.array_equal(x.grad, [2.0])

    def test_multiple_roots_accumulate(self):
        x = Tensor(np.array([1.0, 2.0]))
        a = relu(x)
        b = add(x, Tensor(np.array([5.0, 5.0])))
        backward_from([(a, np.ones(2)), (b, np.full(2, 10.0))])
        assert np.array_equal(x.grad, [11.0, 11.0])

    def test_repeated_seed_tensor_adds(self):
        x = Tensor(np.array([4.0]))
        y = add(x, Tensor(np.array([1.0])))
        backward_from([(y, np.array([1.0])), (y, np.array([2.0]))])
        assert np.array_equal(x.grad, [3.0])

    def test_grads_reset_between_sweeps(self):
        x = Tensor(np.array([2.0]))
        y = add(x, x)
        backward_from([(y, np.array([1.0]))])
        first = x.grad.copy()
        backward_from([(y, np.array([1.0]))])
        assert np.array_equal(x.grad, first)

    def test_unreachable_grad_untouched(self):
        x = Tensor(np.array([1.0]))
        other = Tensor(np.array([7.0]))
        other.grad = np.array([123.0])
        y = relu(x)
        backward_from([(y, np.array([1.0]))])
        assert np.array_equal(other.grad, [123.0])

    def test_seed_shape_mismatch_raises(self):
        y = Tensor(np.zeros((2, 2)), name="y")
        with pytest.raises(ValueError, match="y"):
            backward_from([(y, np.zeros(3))])

    def test_deep_chain_no_recursion_limit(self):
        x = Tensor(np.array([0.5]))
        one = Tensor(np.array([1.0]))
        y = x
        for _ in range(5000):
            y = add(y, one)
        backward_from([(y, np.array([1.0]))])
        assert np.array_equal(x.grad, [1.0])

    def test_reused_intermediate_counted_once_per_path(self):
        # z = mean((w + w) reshaped); two uses of w through one add node.
        w = Tensor(np.arange(4.0).reshape(2, 2))
        s = add(w, w)
        flat = reshape(s, (4,))
        backward_from([(flat, np.full(4, 0.25))])
        assert np.allclose(w.grad, 0.5)

    def test_linear_chain_matches_manual(self):
        x = Tensor(np.array([[1.0, 2.0]]))
        w = Tensor(np.array([[3.0], [4.0]]))
        b = Tensor(np.array([0.5]))
        y = linear(x, w, b)
        backward_from([(y, np.array([[2.0]]))])
        assert np.array_equal(x.grad, [[6.0, 8.0]])
        assert np.array_equal(w.grad, [[2.0], [4.0]])
        assert np.array_equal(b.grad, [2.0])

    def test_fused_streams_split_gradient(self):
        a = Tensor(np.ones((1, 2, 2, 2)))
        b = Tensor(np.zeros((1, 2, 2, 2)))
        m = mean_fuse(a, b)
        backward_from([(m, np.ones_like(m.value))])
        assert np.all(a.grad == 0.5)
        assert np.all(b.grad == 0.5)
