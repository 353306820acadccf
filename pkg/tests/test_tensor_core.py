"""Tensor primitive tests: every op against an independent oracle."""

import math

import numpy as np
import pytest

from m2rnn import tensor_core as tc


def naive_matmul(a, b):
    """Scalar triple-loop oracle, ascending inner index."""
    m, kk = a.shape
    n = b.shape[1]
    out = np.zeros((m, n))
    for i in range(m):
        for j in range(n):
            s = 0.0
            for k in range(kk):
                s += a[i, k] * b[k, j]
            out[i, j] = s
    return out


class TestMatmul:
    def test_identity(self):
        rng = np.random.default_rng(0)
        b = rng.standard_normal((3, 2))
        assert np.array_equal(tc.matmul(np.eye(3), b), b)

    def test_zeros(self):
        rng = np.random.default_rng(1)
        b = rng.standard_normal((2, 4))
        assert np.array_equal(tc.matmul(np.zeros((2, 2)), b), np.zeros((2, 4)))

    def test_matches_triple_loop_exactly(self):
        rng = np.random.default_rng(2)
        a = rng.standard_normal((4, 5))
        b = rng.standard_normal((5, 3))
        assert np.array_equal(tc.matmul(a, b), naive_matmul(a, b))

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(tc.DimensionError, match=r"\(2, 3\).*\(4, 2\)"):
            tc.matmul(np.zeros((2, 3)), np.zeros((4, 2)))

    def test_associativity_on_small_integers(self):
        rng = np.random.default_rng(3)
        a = rng.integers(-4, 5, (4, 4)).astype(np.float64)
        b = rng.integers(-4, 5, (4, 4)).astype(np.float64)
        c = rng.integers(-4, 5, (4, 4)).astype(np.float64)
        left = tc.matmul(tc.matmul(a, b), c)
        right = tc.matmul(a, tc.matmul(b, c))
        assert np.array_equal(left, right)

    def test_non_contiguous_operands(self):
        rng = np.random.default_rng(4)
        a = rng.standard_normal((5, 4))
        b = rng.standard_normal((3, 5))
        assert np.array_equal(tc.matmul(a.T, b.T), naive_matmul(a.T.copy(), b.T.copy()))


class TestOuter:
    def test_basis_vector(self):
        u = np.array([1.0, 0.0, 0.0])
        v = np.array([1.0, 2.0])
        out = tc.outer(u, v)
        assert np.array_equal(out[0], v)
        assert np.array_equal(out[1:], np.zeros((2, 2)))

    def test_zero_vector(self):
        assert np.array_equal(tc.outer(np.zeros(3), np.ones(4)), np.zeros((3, 4)))

    def test_rank_at_most_one(self):
        rng = np.random.default_rng(5)
        out = tc.outer(rng.standard_normal(4), rng.standard_normal(5))
        # all 2x2 minors vanish
        for i in range(3):
            for j in range(4):
                minor = out[i, j] * out[i + 1, j + 1] - out[i, j + 1] * out[i + 1, j]
                assert abs(minor) < 1e-12


class TestActivations:
    def test_fixed_points(self):
        zero = np.zeros(1)
        assert tc.silu(zero)[0] == 0.0
        assert tc.tanh(zero)[0] == 0.0
        assert tc.sigmoid(zero)[0] == 0.5

    def test_silu_is_x_times_sigmoid(self):
        rng = np.random.default_rng(6)
        x = rng.standard_normal(50) * 4
        assert np.allclose(tc.silu(x), x * tc.sigmoid(x), rtol=0, atol=0)

    def test_silu_derivative_matches_finite_differences(self):
        rng = np.random.default_rng(7)
        x = rng.standard_normal(20)
        fd = tc.finite_difference_grad(lambda v: float(np.sum(tc.silu(v))), x, eps=1e-6)
        assert np.max(np.abs(tc.silu_grad(x) - fd)) < 1e-8

    def test_extreme_inputs_stay_finite(self):
        x = np.array([-1000.0, -50.0, 0.0, 50.0, 1000.0])
        for fn in (tc.tanh, tc.sigmoid, tc.silu):
            assert np.all(np.isfinite(fn(x)))


class TestCausalConv:
    def test_identity_tap(self):
        rng = np.random.default_rng(8)
        x = rng.standard_normal((6, 3))
        kernel = np.zeros((4, 3))
        kernel[3] = 1.0
        out = tc.causal_depthwise_conv1d(x, kernel, np.zeros(3))
        assert np.array_equal(out, x)

    def test_causality(self):
        rng = np.random.default_rng(9)
        x = rng.standard_normal((7, 2))
        kernel = rng.standard_normal((4, 2))
        bias = rng.standard_normal(2)
        base = tc.causal_depthwise_conv1d(x, kernel, bias)
        for t in range(6):
            bumped = x.copy()
            bumped[t + 1:] += rng.standard_normal(bumped[t + 1:].shape)
            out = tc.causal_depthwise_conv1d(bumped, kernel, bias)
            assert np.array_equal(out[: t + 1], base[: t + 1])

    def test_matches_direct_convolution_sum(self):
        rng = np.random.default_rng(10)
        tlen, nchan = 9, 3
        x = rng.standard_normal((tlen, nchan))
        kernel = rng.standard_normal((4, nchan))
        bias = rng.standard_normal(nchan)
        expected = np.zeros((tlen, nchan))
        for t in range(tlen):
            for c in range(nchan):
                acc = bias[c]
                for j in range(4):
                    src = t - 3 + j
                    if 0 <= src < tlen:
                        acc += kernel[j, c] * x[src, c]
                expected[t, c] = acc
        out = tc.causal_depthwise_conv1d(x, kernel, bias)
        assert np.allclose(out, expected, rtol=1e-15, atol=1e-15)

    def test_backward_matches_finite_differences(self):
        rng = np.random.default_rng(11)
        x = rng.standard_normal((6, 2))
        kernel = rng.standard_normal((4, 2))
        weights = rng.standard_normal((6, 2))
        dx, dkernel, dbias = tc.causal_depthwise_conv1d_backward(x, kernel, weights)

        fd_x = tc.finite_difference_grad(
            lambda v: float(np.sum(tc.causal_depthwise_conv1d(v, kernel) * weights)),
            x, eps=1e-6)
        fd_k = tc.finite_difference_grad(
            lambda v: float(np.sum(tc.causal_depthwise_conv1d(x, v) * weights)),
            kernel, eps=1e-6)
        fd_b = tc.finite_difference_grad(
            lambda v: float(np.sum(tc.causal_depthwise_conv1d(x, kernel, v) * weights)),
            np.zeros(2), eps=1e-6)
        assert np.max(np.abs(dx - fd_x)) < 1e-8
        assert np.max(np.abs(dkernel - fd_k)) < 1e-8
        assert np.max(np.abs(dbias - fd_b)) < 1e-8


class TestRMSNorm:
    def test_unit_input(self):
        y, s = tc.rmsnorm_forward(np.ones(8), np.ones(8))
        assert abs(s - 1.0) < 1e-5
        assert np.allclose(y, np.ones(8), atol=1e-5)

    def test_scale_invariance_at_zero_eps(self):
        rng = np.random.default_rng(12)
        x = rng.standard_normal(10)
        w = rng.standard_normal(10)
        y1, _ = tc.rmsnorm_forward(x, w, eps=0.0)
        y2, _ = tc.rmsnorm_forward(3.7 * x, w, eps=0.0)
        assert np.allclose(y1, y2, rtol=1e-12)

    def test_matches_direct_formula(self):
        rng = np.random.default_rng(13)
        x = rng.standard_normal(12)
        w = rng.standard_normal(12)
        y, s = tc.rmsnorm_forward(x, w, eps=0.0)
        s_ref = 1.0 / math.sqrt(sum(v * v for v in x) / 12)
        assert abs(s - s_ref) < 1e-12 * abs(s_ref)
        assert np.allclose(y, w * x * s_ref, rtol=1e-12)

    def test_argmax_invariance(self):
        rng = np.random.default_rng(14)
        for _ in range(20):
            x = rng.standard_normal(9)
            w = rng.standard_normal(9)
            y, _ = tc.rmsnorm_forward(x, w)
            assert np.argmax(y) == np.argmax(w * x)

    def test_backward_zero_upstream(self):
        rng = np.random.default_rng(15)
        x = rng.standard_normal(6)
        w = rng.standard_normal(6)
        _, s = tc.rmsnorm_forward(x, w)
        dx, dw = tc.rmsnorm_backward(x, w, s, np.zeros(6))
        assert np.array_equal(dx, np.zeros(6))
        assert np.array_equal(dw, np.zeros(6))

    @pytest.mark.parametrize("seed", range(5))
    def test_backward_matches_finite_differences(self, seed):
        rng = np.random.default_rng(100 + seed)
        x = rng.standard_normal(11)
        w = rng.standard_normal(11)
        weights = rng.standard_normal(11)
        _, s = tc.rmsnorm_forward(x, w)
        dx, dw = tc.rmsnorm_backward(x, w, s, weights)
        fd_x = tc.finite_difference_grad(
            lambda v: float(np.sum(tc.rmsnorm_forward(v, w)[0] * weights)), x, 1e-6)
        fd_w = tc.finite_difference_grad(
            lambda v: float(np.sum(tc.rmsnorm_forward(x, v)[0] * weights)), w, 1e-6)
        scale = max(np.max(np.abs(fd_x)), 1e-9)
        assert np.max(np.abs(dx - fd_x)) / scale < 1e-6
        scale = max(np.max(np.abs(fd_w)), 1e-9)
        assert np.max(np.abs(dw - fd_w)) / scale < 1e-6


class TestFiniteDifferences:
    def test_quadratic(self):
        rng = np.random.default_rng(16)
        x = rng.standard_normal(7)
        grad = tc.finite_difference_grad(lambda v: float(np.sum(v * v)), x)
        assert np.max(np.abs(grad - 2 * x)) < 1e-8

    def test_constant(self):
        grad = tc.finite_difference_grad(lambda v: 3.5, np.ones(4))
        assert np.array_equal(grad, np.zeros(4))

    def test_does_not_mutate_input(self):
        x = np.ones(3)
        tc.finite_difference_grad(lambda v: float(np.sum(v)), x)
        assert np.array_equal(x, np.ones(3))


class TestAscendingSum:
    def test_matches_sequential_loop(self):
        rng = np.random.default_rng(17)
        x = rng.standard_normal(1000)
        acc = 0.0
        for v in x:
            acc += v
        assert tc.ascending_sum(x) == acc

    def test_empty(self):
        assert tc.ascending_sum(np.zeros(0)) == 0.0
