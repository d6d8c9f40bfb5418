"""Composite primitives: convolution, pixel shuffle, softmax, attention, layer norm."""

import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra import numpy as hnp

from clipsr import functional as F
from clipsr.errors import ConfigurationError, DimensionError
from clipsr.gradcheck import check_gradients
from clipsr.tensor import Tensor


def conv_reference(x, w, stride, pad):
    """Nested-loop cross-correlation used as the oracle."""
    n, c, h, wd = x.shape
    o, _, kh, kw = w.shape
    xp = np.zeros((n, c, h + 2 * pad, wd + 2 * pad))
    xp[:, :, pad:pad + h, pad:pad + wd] = x
    ho = (h + 2 * pad - kh) // stride + 1
    wo = (wd + 2 * pad - kw) // stride + 1
    out = np.zeros((n, o, ho, wo))
    for b in range(n):
        for oc in range(o):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ic in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                acc += xp[b, ic, i * stride + u, j * stride + v] * w[oc, ic, u, v]
                    out[b, oc, i, j] = acc
    return out


def shuffle_reference(x, r):
    n, cr2, h, w = x.shape
    c = cr2 // (r * r)
    out = np.empty((n, c, h * r, w * r), dtype=x.dtype)
    for b, ch, y, xx, dy, dx in itertools.product(range(n), range(c), range(h), range(w), range(r), range(r)):
        out[b, ch, r * y + dy, r * xx + dx] = x[b, ch * r * r + dy * r + dx, y, xx]
    return out


class TestConv2d:
    def test_one_by_one_identity(self, rng):
        x = rng.normal(size=(2, 1, 4, 5)).astype(np.float32)
        out = F.conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1), dtype=np.float32)))
        assert np.array_equal(out.data, x)

    def test_ones_kernel_on_ones(self):
        out = F.conv2d(Tensor(np.ones((1, 1, 5, 5))), Tensor(np.ones((1, 1, 3, 3))), pad=1).data[0, 0]
        assert out[2, 2] == 9.0
        assert out[0, 0] == 4.0 and out[0, 4] == 4.0 and out[4, 0] == 4.0 and out[4, 4] == 4.0
        assert out[0, 2] == 6.0

    def test_zero_kernel(self, rng):
        out = F.conv2d(Tensor(rng.normal(size=(1, 2, 4, 4))), Tensor(np.zeros((3, 2, 3, 3))), pad=1)
        assert out.shape == (1, 3, 4, 4) and not out.data.any()

    @pytest.mark.parametrize("stride,pad,k", [(1, 0, 3), (1, 1, 3), (2, 1, 4), (2, 0, 2), (1, 2, 5)])
    def test_matches_nested_loops(self, stride, pad, k, f64, rng):
        x = rng.normal(size=(2, 3, 8, 8))
        w = rng.normal(size=(4, 3, k, k))
        b = rng.normal(size=4)
        out = F.conv2d(Tensor(x), Tensor(w), Tensor(b), stride=stride, pad=pad).data
        ref = conv_reference(x, w, stride, pad) + b.reshape(1, 4, 1, 1)
        np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)

    def test_non_integral_extent(self):
        with pytest.raises(ConfigurationError, match="non-integral"):
            F.conv2d(Tensor(np.ones((1, 1, 8, 8))), Tensor(np.ones((1, 1, 3, 3))), stride=2, pad=1)

    def test_channel_mismatch(self):
        with pytest.raises(DimensionError):
            F.conv2d(Tensor(np.ones((1, 2, 4, 4))), Tensor(np.ones((1, 3, 3, 3))))

    @pytest.mark.parametrize("stride,pad,k", [(1, 1, 3), (2, 1, 4)])
    def test_gradients(self, stride, pad, k, f64, rng):
        x = Tensor(rng.normal(size=(2, 2, 6, 6)), requires_grad=True)
        w = Tensor(rng.normal(size=(3, 2, k, k)), requires_grad=True)
        b = Tensor(rng.normal(size=3), requires_grad=True)
        wt = rng.normal(size=F.conv2d(x, w, b, stride, pad).shape)
        err = check_gradients(lambda: (F.conv2d(x, w, b, stride, pad) * Tensor(wt)).sum(), [x, w, b])
        assert err <= 1e-5


class TestPixelShuffle:
    def test_identity_for_r1(self, rng):
        x = rng.normal(size=(2, 3, 4, 4))
        assert np.array_equal(F.pixel_shuffle(Tensor(x), 1).data, x)

    def test_four_values_to_grid(self):
        out = F.pixel_shuffle(Tensor(np.array([1.0, 2.0, 3.0, 4.0]).reshape(1, 4, 1, 1)), 2)
        assert out.shape == (1, 1, 2, 2)
        assert np.array_equal(out.data[0, 0], [[1.0, 2.0], [3.0, 4.0]])

    def test_shape_arithmetic(self):
        assert F.pixel_shuffle(Tensor(np.zeros((2, 16, 3, 3))), 2).shape == (2, 4, 6, 6)

    def test_indivisible_channels(self):
        with pytest.raises(ConfigurationError):
            F.pixel_shuffle(Tensor(np.zeros((1, 6, 2, 2))), 2)

    @pytest.mark.parametrize("r", [2, 3])
    def test_matches_index_formula(self, r, rng):
        x = rng.normal(size=(2, 2 * r * r, 3, 2))
        assert np.array_equal(F.pixel_shuffle(Tensor(x), r).data, shuffle_reference(x, r))

    def test_gradient(self, f64, rng):
        x = Tensor(rng.normal(size=(1, 8, 2, 3)), requires_grad=True)
        wt = Tensor(rng.normal(size=(1, 2, 4, 6)))
        assert check_gradients(lambda: (F.pixel_shuffle(x, 2) * wt).sum(), [x]) <= 1e-5


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 3), st.integers(1, 3), st.integers(1, 3), st.integers(1, 3), st.integers(1, 3),
       st.integers(0, 2**31))
def test_shuffle_roundtrip_and_multiset(n, c, h, w, r, seed):
    x = np.random.default_rng(seed).normal(size=(n, c * r * r, h, w))
    y = F.pixel_shuffle(Tensor(x), r).data
    assert np.array_equal(np.sort(y, axis=None), np.sort(x, axis=None))
    assert np.array_equal(F.pixel_unshuffle(Tensor(y), r).data, x)


class TestSoftmax:
    def test_symmetric(self):
        np.testing.assert_allclose(F.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])

    def test_large_inputs(self):
        out = F.softmax(Tensor([1000.0, 1000.0])).data
        assert np.all(np.isfinite(out))
        np.testing.assert_allclose(out, [0.5, 0.5])

    def test_closed_form(self, f64):
        np.testing.assert_allclose(F.softmax(Tensor([0.0, math.log(3.0)])).data, [0.25, 0.75], rtol=1e-12)

    def test_bad_axis(self):
        with pytest.raises(DimensionError):
            F.softmax(Tensor(np.zeros((2, 2))), axis=2)

    @pytest.mark.parametrize("axis", [0, 1, -1])
    def test_gradient(self, axis, f64, rng):
        x = Tensor(rng.normal(size=(3, 4, 2)), requires_grad=True)
        wt = Tensor(rng.normal(size=(3, 4, 2)))
        assert check_gradients(lambda: (F.softmax(x, axis) * wt).sum(), [x]) <= 1e-5

    def test_log_softmax_gradient(self, f64, rng):
        x = Tensor(rng.normal(size=(3, 5)), requires_grad=True)
        wt = Tensor(rng.normal(size=(3, 5)))
        assert check_gradients(lambda: (F.log_softmax(x) * wt).sum(), [x]) <= 1e-5

    def test_cross_entropy_uniform(self, f64):
        assert F.cross_entropy(Tensor(np.zeros((4, 4))), [0, 1, 2, 3]).item() == pytest.approx(math.log(4))

    def test_cross_entropy_gradient(self, f64, rng):
        x = Tensor(rng.normal(size=(4, 5)), requires_grad=True)
        assert check_gradients(lambda: F.cross_entropy(x, [0, 3, 1, 4]), [x]) <= 1e-5


@settings(max_examples=60, deadline=None)
@given(hnp.arrays(np.float32, hnp.array_shapes(min_dims=1, max_dims=3, max_side=5),
                  elements=st.floats(-1e3, 1e3, width=32)))
def test_softmax_sums_to_one(x):
    out = F.softmax(Tensor(x), axis=-1).data
    assert np.all(out >= 0)
    np.testing.assert_allclose(out.sum(axis=-1), 1.0, atol=1e-6)


class TestAttention:
    def test_single_token_returns_v(self, rng):
        q, k, v = (Tensor(rng.normal(size=(1, 4))) for _ in range(3))
        np.testing.assert_allclose(F.scaled_dot_attention(q, k, v).data, v.data, rtol=1e-6)

    def test_identical_keys_average_values(self, rng):
        q = Tensor(np.ones((3, 2)))
        k = Tensor(np.ones((3, 2)))
        v = Tensor(rng.normal(size=(3, 2)))
        out = F.scaled_dot_attention(q, k, v).data
        np.testing.assert_allclose(out, np.tile(v.data.mean(axis=0), (3, 1)), rtol=1e-5)

    def test_two_token_closed_form(self, f64):
        # d = 1: scores for query 1 against keys (1, 2) are (1, 2)
        q, k, v = Tensor([[1.0]]), Tensor([[1.0], [2.0]]), Tensor([[10.0], [20.0]])
        out, w = F.scaled_dot_attention(q, k, v, return_weights=True)
        p = 1.0 / (1.0 + math.e)
        np.testing.assert_allclose(w.data, [[p, 1 - p]], rtol=1e-12)
        np.testing.assert_allclose(out.data, [[10 * p + 20 * (1 - p)]], rtol=1e-12)

    def test_mask_blocks_key(self, f64):
        q, k, v = Tensor([[1.0]]), Tensor([[1.0], [2.0]]), Tensor([[10.0], [20.0]])
        out = F.scaled_dot_attention(q, k, v, mask=np.array([[0.0, -1e9]]))
        np.testing.assert_allclose(out.data, [[10.0]])

    def test_width_mismatch(self):
        with pytest.raises(DimensionError):
            F.scaled_dot_attention(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 4))), Tensor(np.ones((2, 4))))

    def test_length_mismatch(self):
        with pytest.raises(DimensionError):
            F.scaled_dot_attention(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))), Tensor(np.ones((3, 3))))

    def test_gradient(self, f64, rng):
        q, k, v = (Tensor(rng.normal(size=(2, 3, 4)), requires_grad=True) for _ in range(3))
        wt = Tensor(rng.normal(size=(2, 3, 4)))
        assert check_gradients(lambda: (F.scaled_dot_attention(q, k, v) * wt).sum(), [q, k, v]) <= 1e-5


class TestLayerNorm:
    def test_constant_vector(self, f64):
        gain, bias = Tensor([2.0, 2.0, 2.0]), Tensor([0.5, -1.0, 3.0])
        out = F.layer_norm(Tensor([4.0, 4.0, 4.0]), gain=gain, bias=bias)
        np.testing.assert_allclose(out.data, bias.data)

    def test_two_values(self, f64):
        np.testing.assert_allclose(F.layer_norm(Tensor([1.0, 3.0])).data, [-1.0, 1.0], atol=1e-5)

    def test_mean_equals_bias(self, f64, rng):
        out = F.layer_norm(Tensor(rng.normal(size=(5, 16))), bias=Tensor(np.full(16, 0.3)))
        np.testing.assert_allclose(out.data.mean(axis=-1), 0.3, atol=1e-12)

    def test_gradient(self, f64, rng):
        x = Tensor(rng.normal(size=(3, 6)), requires_grad=True)
        g = Tensor(rng.normal(size=6), requires_grad=True)
        b = Tensor(rng.normal(size=6), requires_grad=True)
        wt = Tensor(rng.normal(size=(3, 6)))
        assert check_gradients(lambda: (F.layer_norm(x, gain=g, bias=b) * wt).sum(), [x, g, b]) <= 1e-5


class TestSmallOps:
    def test_avg_pool(self):
        x = Tensor(np.arange(16.0).reshape(1, 1, 4, 4))
        np.testing.assert_allclose(F.avg_pool2d(x, 2).data[0, 0], [[2.5, 4.5], [10.5, 12.5]])

    def test_avg_pool_indivisible(self):
        with pytest.raises(ConfigurationError):
            F.avg_pool2d(Tensor(np.zeros((1, 1, 5, 5))), 2)

    def test_l2_normalize_unit(self, rng):
        out = F.l2_normalize(Tensor(rng.normal(size=(4, 7)))).data
        np.testing.assert_allclose(np.linalg.norm(out, axis=-1), 1.0, rtol=1e-6)

    def test_cosine_of_parallel_vectors(self, f64):
        assert F.cosine_similarity(Tensor([1.0, 2.0]), Tensor([2.0, 4.0])).item() == pytest.approx(1.0)

    @pytest.mark.parametrize("op", ["avg_pool", "l2_normalize", "linear"])
    def test_gradients(self, op, f64, rng):
        x = Tensor(rng.normal(size=(2, 2, 4, 4)), requires_grad=True)
        w = Tensor(rng.normal(size=(4, 3)), requires_grad=True)
        b = Tensor(rng.normal(size=3), requires_grad=True)
        fns = {
            "avg_pool": (lambda: (F.avg_pool2d(x, 2) ** 2).sum(), [x]),
            "l2_normalize": (lambda: (F.l2_normalize(x) * Tensor(np.arange(4.0))).sum(), [x]),
            "linear": (lambda: (F.linear(x, w, b) ** 2).sum(), [x, w, b]),
        }
        fn, leaves = fns[op]
        assert check_gradients(fn, leaves) <= 1e-5
