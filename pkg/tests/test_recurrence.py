"""Recurrence tests: forward semantics, gate properties, state invariants,
and the dual-oracle gradient checks."""

import copy

import numpy as np
import pytest

from m2rnn import tensor_core as tc
from m2rnn import verify
from m2rnn.recurrence import (ConfigError, RecurrenceInputs, clip_state_gradient,
                              forget_gate, forget_gate_init, m2rnn_backward,
                              m2rnn_forward, m2rnn_forward_cached,
                              readout_from_states, unfused_forward)


def random_inputs(seed, b=2, t=5, n=3, k=8, v=4, f_mode="uniform"):
    rng = np.random.default_rng(seed)
    if f_mode == "uniform":
        f = rng.uniform(0.05, 0.95, (b, t, n))
    elif f_mode == "ones":
        f = np.ones((b, t, n))
    else:
        f = np.zeros((b, t, n))
    return RecurrenceInputs(
        q=rng.standard_normal((b, t, k)),
        k=rng.standard_normal((b, t, k)),
        v=rng.standard_normal((b, t, n, v)),
        f=f,
        h0=rng.uniform(-1.0, 1.0, (b, n, k, v)),
        w=rng.standard_normal((n, v, v)) * 0.4,
    )


class TestForgetGate:
    def test_alpha_one_is_reflected_sigmoid(self):
        rng = np.random.default_rng(0)
        x = rng.standard_normal(1000) * 6
        for beta in (0.0, 0.7, 3.0):
            psi = forget_gate(x, 1.0, beta)
            ref = tc.sigmoid(-x - beta)
            assert np.max(np.abs(psi - ref)) < 1e-12

    def test_value_at_minus_beta(self):
        for alpha, beta in [(1.0, 0.0), (2.5, 1.5), (7.0, 4.0)]:
            psi = forget_gate(np.array([-beta]), alpha, beta)
            assert abs(psi[0] - 2.0 ** (-alpha)) < 1e-12

    def test_monotone_decreasing_and_in_unit_interval(self):
        rng = np.random.default_rng(1)
        grid = np.linspace(-30.0, 30.0, 1000)
        for _ in range(10):
            alpha = rng.uniform(0.3, 8.0)
            beta = rng.uniform(0.1, 8.0)
            psi = forget_gate(grid, alpha, beta)
            assert np.all(np.diff(psi) < 0)
            assert np.all(psi > 0.0) and np.all(psi < 1.0)

    def test_extreme_inputs(self):
        psi = forget_gate(np.array([-1e6, 1e6]), 3.0, 2.0)
        assert abs(psi[0] - 1.0) < 1e-12
        assert psi[1] >= 0.0 and psi[1] < 1e-100


class TestForgetGateInit:
    def test_degenerate_range(self):
        params = forget_gate_init(5, (1.0, 1.0), (2.0, 2.0), seed=0)
        assert np.array_equal(params.alpha, np.ones(5))
        assert np.allclose(params.beta, 2.0, rtol=1e-12)

    def test_log_uniform_beta_mean(self):
        params = forget_gate_init(10000, (1.0, 8.0), (1.0, 8.0), seed=3)
        log_beta = np.log(params.beta)
        expected = (np.log(1.0) + np.log(8.0)) / 2
        sigma = (np.log(8.0) - np.log(1.0)) / np.sqrt(12)
        assert abs(log_beta.mean() - expected) < 3 * sigma / np.sqrt(10000)

    def test_deterministic(self):
        a = forget_gate_init(7, (1.0, 4.0), (0.5, 6.0), seed=11)
        b = forget_gate_init(7, (1.0, 4.0), (0.5, 6.0), seed=11)
        assert np.array_equal(a.alpha, b.alpha)
        assert np.array_equal(a.beta, b.beta)

    def test_invalid_ranges(self):
        with pytest.raises(ConfigError):
            forget_gate_init(3, (0.0, 1.0), (1.0, 2.0), seed=0)
        with pytest.raises(ConfigError):
            forget_gate_init(3, (1.0, 2.0), (-1.0, 2.0), seed=0)
        with pytest.raises(ConfigError):
            forget_gate_init(3, (2.0, 1.0), (1.0, 2.0), seed=0)


class TestForward:
    def test_full_state_preservation(self):
        inputs = random_inputs(0, f_mode="ones")
        y, h_t = m2rnn_forward(inputs)
        assert np.array_equal(h_t, inputs.h0)
        b, t, n, v = y.shape
        for ti in range(t):
            expected = np.einsum("bnkv,bk->bnv", inputs.h0, inputs.q[:, ti])
            assert np.allclose(y[:, ti], expected, rtol=1e-12, atol=1e-12)

    def test_single_step_closed_form(self):
        rng = np.random.default_rng(2)
        k = rng.standard_normal((1, 1, 4))
        v = rng.standard_normal((1, 1, 1, 3))
        q = rng.standard_normal((1, 1, 4))
        inputs = RecurrenceInputs(q=q, k=k, v=v, f=np.zeros((1, 1, 1)),
                                  h0=np.zeros((1, 1, 4, 3)), w=np.zeros((1, 3, 3)))
        y, h_t = m2rnn_forward(inputs)
        z = np.tanh(np.outer(k[0, 0], v[0, 0, 0]))
        assert np.allclose(h_t[0, 0], z, rtol=1e-15)
        assert np.allclose(y[0, 0, 0], z.T @ q[0, 0], rtol=1e-15)

    def test_fused_matches_unfused_bitwise(self):
        inputs = random_inputs(3)
        y_fused, h_fused = m2rnn_forward(inputs)
        y_ref, h_ref = unfused_forward(inputs)
        assert np.array_equal(y_fused, y_ref)
        assert np.array_equal(h_fused, h_ref)

    def test_batch_independence(self):
        inputs = random_inputs(4, b=3)
        y, h_t = m2rnn_forward(inputs)
        perm = [2, 0, 1]
        permuted = RecurrenceInputs(q=inputs.q[perm], k=inputs.k[perm],
                                    v=inputs.v[perm], f=inputs.f[perm],
                                    h0=inputs.h0[perm], w=inputs.w)
        y_p, h_p = m2rnn_forward(permuted)
        assert np.array_equal(y_p, y[perm])
        assert np.array_equal(h_p, h_t[perm])

    def test_shape_mismatch_raises(self):
        inputs = random_inputs(5)
        inputs.v = inputs.v[:, :, :, :2]
        with pytest.raises(tc.DimensionError):
            m2rnn_forward(inputs)

    def test_state_boundedness(self):
        inputs = random_inputs(6, b=1, t=1000, n=2, k=6, v=5)
        h_full = m2rnn_forward_cached(inputs)
        assert np.max(np.abs(h_full)) <= 1.0


class TestForwardCached:
    def test_last_slice_equals_final_state(self):
        inputs = random_inputs(7)
        _, h_t = m2rnn_forward(inputs)
        h_full = m2rnn_forward_cached(inputs)
        assert np.array_equal(h_full[:, -1], h_t)

    def test_all_slices_equal_h0_when_gate_saturated(self):
        inputs = random_inputs(8, f_mode="ones")
        h_full = m2rnn_forward_cached(inputs)
        for ti in range(h_full.shape[1]):
            assert np.array_equal(h_full[:, ti], inputs.h0)

    def test_readout_reproduces_forward_bitwise(self):
        inputs = random_inputs(9)
        y, _ = m2rnn_forward(inputs)
        h_full = m2rnn_forward_cached(inputs)
        assert np.array_equal(readout_from_states(h_full, inputs.q), y)


class TestBackward:
    def test_zero_upstream_gives_zero_gradients(self):
        inputs = random_inputs(10)
        h_full = m2rnn_forward_cached(inputs)
        dy = np.zeros_like(inputs.v)
        for clip in (None, 0.5):
            grads = m2rnn_backward(inputs, h_full, dy, clip=clip)
            for field in ("dq", "dk", "dv", "dw", "df", "dh0"):
                assert np.array_equal(getattr(grads, field),
                                      np.zeros_like(getattr(grads, field)))

    def test_single_step_value_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(11)
        k = rng.standard_normal((1, 1, 4))
        q = rng.standard_normal((1, 1, 4))
        v = rng.standard_normal((1, 1, 1, 3))
        weights = rng.standard_normal((1, 1, 1, 3))

        def make(v_arr):
            return RecurrenceInputs(q=q, k=k, v=v_arr, f=np.zeros((1, 1, 1)),
                                    h0=np.zeros((1, 1, 4, 3)),
                                    w=np.zeros((1, 3, 3)))

        inputs = make(v)
        h_full = m2rnn_forward_cached(inputs)
        grads = m2rnn_backward(inputs, h_full, weights)
        fd = tc.finite_difference_grad(
            lambda arr: float(np.sum(m2rnn_forward(make(arr))[0] * weights)), v)
        assert np.max(np.abs(grads.dv - fd)) < 1e-9

    def test_dual_oracle_random_instance(self):
        inputs, weights = verify.random_recurrence_instance(123)
        hand = verify.recurrence_hand_grads(inputs, weights)
        taped = verify.tape_recurrence_grads(inputs, weights)
        for field, name in (("q", "dq"), ("k", "dk"), ("v", "dv"),
                            ("w", "dw"), ("f", "df"), ("h0", "dh0")):
            fd = verify.recurrence_fd_grad(inputs, weights, field)
            got = getattr(hand, name)
            assert verify.rel_err(got, fd) <= 1e-4, f"{name} vs finite differences"
            assert verify.rel_err(got, taped[name]) <= 1e-10, f"{name} vs tape"

    def test_h_full_shape_mismatch_raises(self):
        inputs = random_inputs(12)
        h_full = m2rnn_forward_cached(inputs)
        with pytest.raises(tc.DimensionError):
            m2rnn_backward(inputs, h_full[:, :-1], np.zeros_like(inputs.v))


class TestClipping:
    def test_below_threshold_is_identity(self):
        rng = np.random.default_rng(13)
        p = rng.standard_normal((4, 3)) * 0.01
        assert np.array_equal(clip_state_gradient(p, 10.0), p)

    def test_clipped_norm_is_exact(self):
        rng = np.random.default_rng(14)
        p = rng.standard_normal((6, 5))
        p *= 10.0 / np.linalg.norm(p)
        clipped = clip_state_gradient(p, 1.0)
        assert abs(np.linalg.norm(clipped) - 1.0) < 1e-12

    def test_disabled_clip_matches_oracles_and_enabled_never_grows(self):
        inputs, weights = verify.random_recurrence_instance(15)
        h_full = m2rnn_forward_cached(inputs)
        free = m2rnn_backward(inputs, h_full, weights, clip=None)
        clipped = m2rnn_backward(inputs, h_full, weights, clip=0.25)
        # the clipped state gradient is never larger slice-wise
        b, n = inputs.h0.shape[:2]
        for bi in range(b):
            for ni in range(n):
                norm_free = np.linalg.norm(free.dh0[bi, ni])
                norm_clip = np.linalg.norm(clipped.dh0[bi, ni])
                assert norm_clip <= norm_free + 1e-12
                assert norm_clip <= 0.25 + 1e-12


class TestGradientInvariantSweep:
    @pytest.mark.parametrize("seed", range(5))
    def test_dual_oracle_sweep(self, seed):
        inputs, weights = verify.random_recurrence_instance(seed, t=4, k=6, v=3)
        hand = verify.recurrence_hand_grads(inputs, weights)
        taped = verify.tape_recurrence_grads(inputs, weights)
        for field, name in (("q", "dq"), ("v", "dv"), ("w", "dw"), ("f", "df")):
            fd = verify.recurrence_fd_grad(inputs, weights, field)
            got = getattr(hand, name)
            assert verify.rel_err(got, fd) <= 1e-4
            assert verify.rel_err(got, taped[name]) <= 1e-10
