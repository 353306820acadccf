"""Reverse-mode tape tests: known adjoints, cross-oracle agreement,
determinism, and the topological-order internal check."""

import numpy as np
import pytest

from m2rnn import tensor_core as tc
from m2rnn.tape import Tape


class TestKnownAdjoints:
    def test_matmul_adjoints(self):
        rng = np.random.default_rng(0)
        a = rng.standard_normal((3, 4))
        b = rng.standard_normal((4, 2))
        g = rng.standard_normal((3, 2))
        tape = Tape()
        av = tape.input(a)
        bv = tape.input(b)
        loss = tape.dot(tape.matmul(av, bv), tape.constant(g))
        grads = tape.backward(loss)
        assert np.allclose(grads.of(av), tc.matmul(g, b.T), rtol=1e-14)
        assert np.allclose(grads.of(bv), tc.matmul(a.T, g), rtol=1e-14)

    def test_outer_adjoints(self):
        rng = np.random.default_rng(1)
        u = rng.standard_normal(3)
        v = rng.standard_normal(5)
        g = rng.standard_normal((3, 5))
        tape = Tape()
        uv = tape.input(u)
        vv = tape.input(v)
        loss = tape.dot(tape.outer(uv, vv), tape.constant(g))
        grads = tape.backward(loss)
        assert np.allclose(grads.of(uv), g @ v, rtol=1e-14)
        assert np.allclose(grads.of(vv), g.T @ u, rtol=1e-14)

    def test_unused_input_gets_zero_gradient(self):
        tape = Tape()
        used = tape.input(np.ones(3))
        unused = tape.input(np.ones(2))
        loss = tape.sum(used)
        grads = tape.backward(loss)
        assert np.array_equal(grads.of(unused), np.zeros(2))


class TestCrossOracle:
    @pytest.mark.parametrize("seed", range(5))
    def test_three_op_chain_matches_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((3, 3))
        w = rng.standard_normal((3, 3))
        g = rng.standard_normal((3, 3))

        def build(xv_arr):
            tape = Tape()
            xv = tape.input(xv_arr)
            wv = tape.constant(w)
            y = tape.silu(tape.tanh(tape.matmul(xv, wv)))
            return tape, xv, tape.dot(y, tape.constant(g))

        tape, xv, loss = build(x)
        grads = tape.backward(loss)
        fd = tc.finite_difference_grad(
            lambda arr: float(build(arr)[2].value), x, eps=1e-5)
        scale = max(np.max(np.abs(fd)), 1e-9)
        assert np.max(np.abs(grads.of(xv) - fd)) / scale < 1e-6

    def test_conv_and_rmsnorm_against_finite_differences(self):
        rng = np.random.default_rng(7)
        x = rng.standard_normal((5, 3))
        kernel = rng.standard_normal((4, 3))
        w = rng.standard_normal(3)
        g = rng.standard_normal((5, 3))

        def loss_value(x_arr):
            tape = Tape()
            xv = tape.input(x_arr)
            kv = tape.constant(kernel)
            conv = tape.conv1d(xv, kv)
            rows = [tape.rmsnorm(tape.index(conv, t), tape.constant(w))
                    for t in range(5)]
            total = None
            for t, row in enumerate(rows):
                term = tape.dot(row, tape.constant(g[t]))
                total = term if total is None else tape.add(total, term)
            return tape, xv, total

        tape, xv, loss = loss_value(x)
        grads = tape.backward(loss)
        fd = tc.finite_difference_grad(lambda arr: float(loss_value(arr)[2].value),
                                       x, eps=1e-6)
        scale = max(np.max(np.abs(fd)), 1e-9)
        assert np.max(np.abs(grads.of(xv) - fd)) / scale < 1e-6


class TestDeterminism:
    def test_identical_graphs_give_bit_identical_gradients(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((4, 4))
        g = rng.standard_normal((4, 4))

        def run():
            tape = Tape()
            xv = tape.input(x)
            y = tape.tanh(tape.matmul(xv, xv))
            loss = tape.dot(y, tape.constant(g))
            return tape.backward(loss).of(xv)

        assert np.array_equal(run(), run())


class TestInternalChecks:
    def test_backward_requires_scalar(self):
        tape = Tape()
        xv = tape.input(np.ones((2, 2)))
        with pytest.raises(ValueError, match="scalar"):
            tape.backward(xv)

    def test_topological_order_violation_is_internal_error(self):
        tape = Tape()
        xv = tape.input(np.ones(2))
        with pytest.raises(RuntimeError, match="topological"):
            tape._emit("bogus", (5,), np.ones(2), None)
