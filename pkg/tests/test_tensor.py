"""Autodiff engine: op values, gradients, tape semantics."""

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from clipsr import tensor as T
from clipsr.errors import ContractError, DimensionError
from clipsr.gradcheck import check_gradients, numerical_grad
from clipsr.tensor import Tensor, backward, default_dtype, grad_of, no_grad


def leaf(rng, *shape, low=-1.0, high=1.0):
    return Tensor(rng.uniform(low, high, size=shape), requires_grad=True)


class TestMatmul:
    def test_identity(self):
        eye = Tensor(np.eye(2))
        assert np.array_equal((eye @ eye).data, np.eye(2))

    def test_hand_computed(self):
        out = Tensor([[1.0, 2.0], [3.0, 4.0]]) @ Tensor([[1.0], [1.0]])
        assert np.array_equal(out.data, [[3.0], [7.0]])

    def test_zero_left_operand(self, rng):
        out = Tensor(np.zeros((3, 4))) @ Tensor(rng.normal(size=(4, 2)))
        assert out.shape == (3, 2) and not out.data.any()

    def test_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 2\)"):
            Tensor(np.ones((2, 3))) @ Tensor(np.ones((4, 2)))

    def test_batched(self, rng):
        a, b = rng.normal(size=(2, 3, 4)), rng.normal(size=(2, 4, 5))
        np.testing.assert_allclose((Tensor(a) @ Tensor(b)).data, a @ b, rtol=1e-6)


class TestElementwise:
    def test_relu_values(self):
        assert np.array_equal(T.relu(Tensor([-1.0, 0.0, 2.0])).data, [0.0, 0.0, 2.0])

    def test_relu_all_negative(self, rng):
        assert not T.relu(Tensor(-rng.uniform(0.1, 1, size=(3, 3)))).data.any()

    def test_relu_gradient(self, f64):
        x = Tensor([-1.0, 2.0], requires_grad=True)
        gmap = backward(T.relu(x).sum())
        assert np.array_equal(gmap[x], [0.0, 1.0])

    def test_relu_subgradient_at_zero_is_zero(self):
        x = Tensor([0.0], requires_grad=True)
        backward(T.relu(x).sum())
        assert x.grad[0] == 0.0

    def test_sigmoid_is_stable(self):
        out = T.sigmoid(Tensor([-1000.0, 0.0, 1000.0])).data
        assert np.all(np.isfinite(out))
        np.testing.assert_allclose(out, [0.0, 0.5, 1.0], atol=1e-7)

    def test_softplus_is_stable(self):
        out = T.softplus(Tensor([-1000.0, 0.0, 1000.0], dtype=np.float64)).data
        np.testing.assert_allclose(out, [0.0, math.log(2.0), 1000.0])

    def test_broadcast_add_gradient(self, f64):
        a = Tensor(np.ones((2, 3)), requires_grad=True)
        b = Tensor(np.ones(3), requires_grad=True)
        gmap = backward((a + b).sum())
        assert gmap[b].shape == (3,)
        assert np.array_equal(gmap[b], [2.0, 2.0, 2.0])


class TestBackward:
    def test_sum_gives_ones(self, rng):
        x = leaf(rng, 3, 2)
        assert np.array_equal(backward(x.sum())[x], np.ones((3, 2), dtype=np.float32))

    def test_square_hand_case(self, f64):
        x = Tensor([1.0, 2.0], requires_grad=True)
        assert np.array_equal(backward((x * x).sum())[x], [2.0, 4.0])

    def test_disconnected_leaf_absent(self, rng):
        x, y = leaf(rng, 2), leaf(rng, 2)
        gmap = backward(x.sum())
        assert x in gmap and y not in gmap

    def test_non_scalar_raises(self, rng):
        with pytest.raises(ContractError):
            backward(leaf(rng, 2) * 2.0)

    def test_accumulates_across_calls(self, f64):
        x = Tensor([3.0], requires_grad=True)
        backward((x * 2.0).sum())
        backward((x * 5.0).sum())
        assert x.grad[0] == 7.0

    def test_reused_node_single_accumulation(self, f64):
        x = Tensor([1.5], requires_grad=True)
        y = x * x
        gmap = backward((y + y).sum())
        assert gmap[x][0] == pytest.approx(4 * 1.5)

    def test_tape_is_consumed(self, f64):
        x = Tensor([1.0], requires_grad=True)
        y = (x * 3.0).sum()
        backward(y)
        assert y._parents == () and not y.requires_grad

    def test_no_grad_records_nothing(self, rng):
        x = leaf(rng, 2)
        with no_grad():
            y = x * 2.0
        assert not y.requires_grad
        assert backward(y.sum()) == {}

    def test_grad_of_order(self, f64):
        a = Tensor([1.0], requires_grad=True)
        b = Tensor([2.0], requires_grad=True)
        ga, gb = grad_of((a * b).sum(), [a, b])
        assert ga[0] == 2.0 and gb[0] == 1.0


class TestDtype:
    def test_default_is_float32(self):
        assert Tensor([1.0]).dtype == np.float32

    def test_context_switch(self):
        with default_dtype(np.float64):
            assert Tensor([1.0]).dtype == np.float64
        assert Tensor([1.0]).dtype == np.float32


# every differentiable tensor-level op, each as (builder, input shapes, input range)
UNARY_CASES = {
    "neg": (lambda a: -a, (-1, 1)),
    "exp": (T.exp, (-1, 1)),
    "log": (T.log, (0.5, 2)),
    "sqrt": (T.sqrt, (0.5, 2)),
    "abs": (T.tabs, (0.2, 1)),
    "relu": (T.relu, (0.2, 1)),
    "sigmoid": (T.sigmoid, (-2, 2)),
    "tanh": (T.tanh, (-2, 2)),
    "softplus": (T.softplus, (-2, 2)),
    "power": (lambda a: T.power(a, 3.0), (0.5, 1.5)),
    "sum_axis": (lambda a: T.tsum(a, axis=1, keepdims=True), (-1, 1)),
    "mean_axis": (lambda a: T.mean(a, axis=0), (-1, 1)),
    "reshape": (lambda a: a.reshape(6, 4), (-1, 1)),
    "transpose": (lambda a: a.transpose(1, 0, 2), (-1, 1)),
    "swapaxes": (lambda a: T.swapaxes(a, 0, 2), (-1, 1)),
    "basic_index": (lambda a: a[1:, ::2], (-1, 1)),
    "fancy_index": (lambda a: a[np.array([0, 2, 0])], (-1, 1)),
    "where": (lambda a: T.where(np.arange(24).reshape(3, 4, 2) % 3 == 0, a, a * 2.0), (-1, 1)),
}

BINARY_CASES = {
    "add": (lambda a, b: a + b, (-1, 1)),
    "sub": (lambda a, b: a - b, (-1, 1)),
    "mul": (lambda a, b: a * b, (-1, 1)),
    "div": (lambda a, b: a / b, (0.5, 2)),
    "matmul": (lambda a, b: a @ b.transpose(0, 2, 1), (-1, 1)),
    "concat": (lambda a, b: T.concat([a, b], axis=1), (-1, 1)),
    "stack": (lambda a, b: T.stack([a, b], axis=0), (-1, 1)),
}


def _weighted(out, rng):
    w = Tensor(rng.normal(size=out.shape))
    return (out * w).sum()


class TestGradientSuite:
    @pytest.mark.parametrize("name", sorted(UNARY_CASES))
    def test_unary(self, name, f64, rng):
        fn, (lo, hi) = UNARY_CASES[name]
        x = leaf(rng, 3, 4, 2, low=lo, high=hi)
        w = rng.normal(size=fn(x).shape)
        err = check_gradients(lambda: (fn(x) * Tensor(w)).sum(), [x])
        assert err <= 1e-5, name

    @pytest.mark.parametrize("name", sorted(BINARY_CASES))
    def test_binary(self, name, f64, rng):
        fn, (lo, hi) = BINARY_CASES[name]
        a = leaf(rng, 3, 4, 2, low=lo, high=hi)
        b = leaf(rng, 3, 4, 2, low=lo, high=hi)
        w = rng.normal(size=fn(a, b).shape)
        err = check_gradients(lambda: (fn(a, b) * Tensor(w)).sum(), [a, b])
        assert err <= 1e-5, name

    def test_broadcast_binary(self, f64, rng):
        a, b = leaf(rng, 3, 4), leaf(rng, 4, low=0.5, high=2)
        err = check_gradients(lambda: ((a * b + b) / b).sum(), [a, b])
        assert err <= 1e-5

    def test_numerical_grad_on_quadratic(self, f64):
        x = Tensor([1.0, 2.0], requires_grad=True)
        np.testing.assert_allclose(numerical_grad(lambda: (x * x).sum(), x), [2.0, 4.0], rtol=1e-9)


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, hnp.array_shapes(min_dims=1, max_dims=3, max_side=4),
                  elements=st.floats(-1e3, 1e3)))
def test_ops_keep_finite_values(x):
    t = Tensor(x, dtype=np.float64)
    for out in (T.sigmoid(t), T.tanh(t), T.softplus(t), T.relu(t), T.tabs(t)):
        assert np.all(np.isfinite(out.data))


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**32 - 1))
def test_deterministic_forward(seed):
    x = np.random.default_rng(seed).normal(size=(3, 4))
    a = (T.sigmoid(Tensor(x)) @ Tensor(x.T)).data
    b = (T.sigmoid(Tensor(x)) @ Tensor(x.T)).data
    assert np.array_equal(a, b)
