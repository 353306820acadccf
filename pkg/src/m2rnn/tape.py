"""Minimal reverse-mode tape used as an independent gradient oracle.

Forward builds a topologically-ordered node list over a small primitive set;
``Tape.backward`` walks it in exact reverse order with fixed accumulation
order, so gradients of identical graphs are bit-identical across runs.

The tape exists to check hand-written backward passes, so composite ops
(silu, rmsnorm) are built from primitives rather than given closed-form
adjoints of their own.
"""

from dataclasses import dataclass, field

import numpy as np

from . import tensor_core as tc


def _unbroadcast(g, shape):
    """Reduce a broadcast gradient back to the parent shape."""
    g = np.asarray(g)
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


@dataclass(frozen=True)
class Var:
    """Handle to a tape node."""
    tape: "Tape"
    idx: int

    @property
    def value(self):
        return self.tape.nodes[self.idx].value

    @property
    def shape(self):
        return np.shape(self.value)


@dataclass
class TapeNode:
    op: str
    parents: tuple
    value: object
    vjp: object  # callable grad -> tuple of parent grads, or None for leaves


@dataclass
class Tape:
    nodes: list = field(default_factory=list)

    def _emit(self, op, parents, value, vjp):
        idx = len(self.nodes)
        for p in parents:
            if p >= idx:
                raise RuntimeError("internal error: tape is not in topological order")
        self.nodes.append(TapeNode(op, tuple(parents), value, vjp))
        return Var(self, idx)

    # --- leaves ------------------------------------------------------------

    def input(self, value):
        return self._emit("input", (), tc.asarray64(value), None)

    def constant(self, value):
        return self._emit("const", (), tc.asarray64(value), None)

    # --- arithmetic ---------------------------------------------------------

    def add(self, a, b):
        av, bv = a.value, b.value
        return self._emit("add", (a.idx, b.idx), av + bv,
                          lambda g: (_unbroadcast(g, np.shape(av)),
                                     _unbroadcast(g, np.shape(bv))))

    def sub(self, a, b):
        av, bv = a.value, b.value
        return self._emit("sub", (a.idx, b.idx), av - bv,
                          lambda g: (_unbroadcast(g, np.shape(av)),
                                     _unbroadcast(-g, np.shape(bv))))

    def mul(self, a, b):
        av, bv = a.value, b.value
        return self._emit("mul", (a.idx, b.idx), av * bv,
                          lambda g: (_unbroadcast(g * bv, np.shape(av)),
                                     _unbroadcast(g * av, np.shape(bv))))

    def smul(self, a, s):
        """Tensor times scalar variable."""
        av, sv = a.value, s.value
        return self._emit("smul", (a.idx, s.idx), av * sv,
                          lambda g: (g * sv, np.sum(g * av)))

    def scale(self, a, c):
        c = float(c)
        return self._emit("scale", (a.idx,), a.value * c, lambda g: (g * c,))

    def add_const(self, a, c):
        return self._emit("add_const", (a.idx,), a.value + c, lambda g: (g,))

    def matmul(self, a, b):
        av, bv = a.value, b.value
        return self._emit("matmul", (a.idx, b.idx), tc.matmul(av, bv),
                          lambda g: (tc.matmul(g, bv.T), tc.matmul(av.T, g)))

    def outer(self, u, v):
        uv, vv = u.value, v.value
        return self._emit("outer", (u.idx, v.idx), tc.outer(uv, vv),
                          lambda g: (tc.matmul(g, vv[:, None])[:, 0],
                                     tc.matmul(g.T, uv[:, None])[:, 0]))

    def transpose(self, a):
        return self._emit("transpose", (a.idx,), a.value.T.copy(),
                          lambda g: (g.T.copy(),))

    def reshape(self, a, shape):
        old = np.shape(a.value)
        return self._emit("reshape", (a.idx,), a.value.reshape(shape),
                          lambda g: (g.reshape(old),))

    def index(self, a, key):
        av = a.value

        def vjp(g):
            da = np.zeros_like(av)
            np.add.at(da, key, g)
            return (da,)

        return self._emit("index", (a.idx,), np.asarray(av[key]).copy(), vjp)

    def sum(self, a):
        av = a.value
        return self._emit("sum", (a.idx,), np.sum(av),
                          lambda g: (np.full_like(av, float(g)),))

    def dot(self, a, b):
        return self.sum(self.mul(a, b))

    # --- nonlinearities -----------------------------------------------------

    def tanh(self, a):
        y = tc.tanh(a.value)
        return self._emit("tanh", (a.idx,), y, lambda g: (g * (1.0 - y * y),))

    def sigmoid(self, a):
        y = tc.sigmoid(a.value)
        return self._emit("sigmoid", (a.idx,), y, lambda g: (g * y * (1.0 - y),))

    def silu(self, a):
        return self.mul(a, self.sigmoid(a))

    def exp(self, a):
        y = tc.exp(a.value)
        return self._emit("exp", (a.idx,), y, lambda g: (g * y,))

    def log1p(self, a):
        av = a.value
        return self._emit("log1p", (a.idx,), tc.log1p(av),
                          lambda g: (g / (1.0 + av),))

    def rsqrt(self, a):
        y = 1.0 / np.sqrt(a.value)
        return self._emit("rsqrt", (a.idx,), y, lambda g: (-0.5 * g * y ** 3,))

    def conv1d(self, x, kernel, bias=None):
        xv, kv = x.value, kernel.value
        parents = (x.idx, kernel.idx)
        bv = None if bias is None else bias.value
        value = tc.causal_depthwise_conv1d(xv, kv, bv)

        def vjp(g):
            dx, dk, db = tc.causal_depthwise_conv1d_backward(xv, kv, g)
            if bias is None:
                return (dx, dk)
            return (dx, dk, db)

        if bias is not None:
            parents = parents + (bias.idx,)
        return self._emit("conv1d", parents, value, vjp)

    def rmsnorm(self, x, w, eps=tc.RMS_EPS):
        """RMSNorm of a single feature vector, composed from primitives."""
        nfeat = x.shape[-1]
        ssq = self.sum(self.mul(x, x))
        s = self.rsqrt(self.add_const(self.scale(ssq, 1.0 / nfeat), eps))
        return self.smul(self.mul(w, x), s)

    # --- reverse sweep -------------------------------------------------------

    def backward(self, loss):
        """Gradients of a scalar loss node w.r.t. every tape node.

        Returns a Gradients view; accumulation visits nodes in exact reverse
        emission order.
        """
        if np.size(self.nodes[loss.idx].value) != 1:
            raise ValueError("backward requires a scalar loss node")
        grads = [None] * len(self.nodes)
        grads[loss.idx] = np.ones_like(self.nodes[loss.idx].value)
        for idx in range(loss.idx, -1, -1):
            g = grads[idx]
            node = self.nodes[idx]
            if g is None or node.vjp is None:
                continue
            parent_grads = node.vjp(g)
            for pidx, pg in zip(node.parents, parent_grads):
                if grads[pidx] is None:
                    grads[pidx] = np.zeros_like(self.nodes[pidx].value, dtype=np.float64)
                grads[pidx] = grads[pidx] + pg
        return Gradients(self, grads)


@dataclass
class Gradients:
    tape: Tape
    _grads: list

    def of(self, var):
        g = self._grads[var.idx]
        if g is None:
            return np.zeros_like(self.tape.nodes[var.idx].value, dtype=np.float64)
        return g
