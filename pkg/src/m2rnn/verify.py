"""Dual-oracle gradient verification suite.

Every hand-written backward pass is checked against central finite
differences (loose tolerance, truncation-limited) and, where the tape can
express the graph, against the reverse-mode tape (tight tolerance). The CLI
gradcheck command drives this; the test suite asserts the same bounds.
"""

import copy
from dataclasses import dataclass

import numpy as np

from . import baselines as bl
from . import layer as ml
from . import tensor_core as tc
from .recurrence import RecurrenceInputs, m2rnn_backward, m2rnn_forward, m2rnn_forward_cached
from .tape import Tape

FD_TOL = 1e-4
TAPE_TOL = 1e-10
RMS_FD_TOL = 1e-6


@dataclass
class CheckRow:
    group: str
    name: str
    rel_err: float
    tol: float

    @property
    def ok(self):
        return self.rel_err <= self.tol


def rel_err(got, ref):
    scale = max(float(np.max(np.abs(ref))), 1e-8)
    return float(np.max(np.abs(got - ref))) / scale


def _loss_weights(rng, shape):
    return rng.standard_normal(shape)


# --- recurrence ------------------------------------------------------------------

def random_recurrence_instance(seed, b=2, t=6, n=3, k=8, v=4):
    rng = np.random.default_rng(seed)
    inputs = RecurrenceInputs(
        q=rng.standard_normal((b, t, k)),
        k=rng.standard_normal((b, t, k)),
        v=rng.standard_normal((b, t, n, v)),
        f=rng.uniform(0.05, 0.95, (b, t, n)),
        h0=rng.uniform(-1.0, 1.0, (b, n, k, v)),
        w=rng.standard_normal((n, v, v)) * 0.4,
    )
    return inputs, _loss_weights(rng, (b, t, n, v))


def recurrence_hand_grads(inputs, weights, clip=None):
    h_full = m2rnn_forward_cached(inputs)
    return m2rnn_backward(inputs, h_full, weights, clip=clip)


def recurrence_fd_grad(inputs, weights, field, eps=1e-5):
    def loss(arr):
        patched = copy.deepcopy(inputs)
        setattr(patched, field, arr)
        y, _ = m2rnn_forward(patched)
        return float(np.sum(y * weights))

    return tc.finite_difference_grad(loss, getattr(inputs, field), eps)


def tape_recurrence_grads(inputs, weights):
    """The recurrence composed step by step from tape primitives."""
    b, t, n, kd, vd = inputs.validate()
    tape = Tape()
    q_v = tape.input(inputs.q)
    k_v = tape.input(inputs.k)
    v_v = tape.input(inputs.v)
    f_v = tape.input(inputs.f)
    h0_v = tape.input(inputs.h0)
    w_v = tape.input(inputs.w)
    loss = None
    for ni in range(n):
        w_n = tape.index(w_v, ni)
        for bi in range(b):
            h = tape.index(h0_v, (bi, ni))
            for ti in range(t):
                kt = tape.index(k_v, (bi, ti))
                vt = tape.index(v_v, (bi, ti, ni))
                qt = tape.index(q_v, (bi, ti))
                ft = tape.index(f_v, (bi, ti, ni))
                z = tape.tanh(tape.add(tape.matmul(h, w_n), tape.outer(kt, vt)))
                omf = tape.add_const(tape.scale(ft, -1.0), 1.0)
                h = tape.add(tape.smul(h, ft), tape.smul(z, omf))
                y = tape.matmul(tape.transpose(h), tape.reshape(qt, (kd, 1)))
                term = tape.dot(y, tape.constant(weights[bi, ti, ni].reshape(vd, 1)))
                loss = term if loss is None else tape.add(loss, term)
    grads = tape.backward(loss)
    return {"dq": grads.of(q_v), "dk": grads.of(k_v), "dv": grads.of(v_v),
            "df": grads.of(f_v), "dh0": grads.of(h0_v), "dw": grads.of(w_v)}


def check_recurrence(seed):
    inputs, weights = random_recurrence_instance(seed)
    hand = recurrence_hand_grads(inputs, weights)
    taped = tape_recurrence_grads(inputs, weights)
    rows = []
    for field, grad_name in (("q", "dq"), ("k", "dk"), ("v", "dv"),
                             ("w", "dw"), ("f", "df"), ("h0", "dh0")):
        got = getattr(hand, grad_name)
        fd = recurrence_fd_grad(inputs, weights, field)
        rows.append(CheckRow("recurrence-fd", grad_name, rel_err(got, fd), FD_TOL))
        rows.append(CheckRow("recurrence-tape", grad_name,
                             rel_err(got, taped[grad_name]), TAPE_TOL))
    return rows


# --- layer ------------------------------------------------------------------------

def check_layer(seed, b=1, t=4, d=16, n=2, k=8, v=4, transition_init="identity"):
    rng = np.random.default_rng(seed)
    params = ml.init_layer_params(d, n, k, v, seed=seed,
                                  transition_init=transition_init,
                                  alpha_range=(1.0, 2.0), beta_range=(0.5, 1.5))
    x = rng.standard_normal((b, t, d))
    weights = rng.standard_normal((b, t, d))
    _, _, cache = ml.layer_forward_train(params, x)
    grads, dx = ml.layer_backward(params, cache, weights)

    rows = []

    def layer_loss_x(arr):
        o, _, _ = ml.layer_forward_train(params, arr)
        return float(np.sum(o * weights))

    rows.append(CheckRow("layer-fd", "dx",
                         rel_err(dx, tc.finite_difference_grad(layer_loss_x, x, 1e-6)),
                         FD_TOL))
    for name, arr in params.named_tensors():
        def loss(a, nm=name):
            patched = copy.deepcopy(params)
            dict(patched.named_tensors())[nm][...] = a
            o, _, _ = ml.layer_forward_train(patched, x)
            return float(np.sum(o * weights))

        fd = tc.finite_difference_grad(loss, arr, 1e-6)
        rows.append(CheckRow("layer-fd", name, rel_err(grads[name], fd), FD_TOL))
    return rows


# --- baselines ----------------------------------------------------------------------

def _tape_linear_rows(tape, x_var, w_var, b, t, ti):
    """x[:, ti] @ W as a tape node, one batch of rows."""
    xt = tape.index(x_var, (slice(None), ti))
    return tape.matmul(xt, w_var)


def tape_vector_rnn_grads(params, x, weights):
    b, t, d = x.shape
    tape = Tape()
    x_v = tape.input(x)
    w_v = tape.input(params.w)
    wt = tape.transpose(w_v)
    h = tape.constant(np.zeros((b, d)))
    loss = None
    for ti in range(t):
        h = tape.tanh(tape.add(tape.matmul(h, wt), tape.index(x_v, (slice(None), ti))))
        term = tape.dot(h, tape.constant(weights[:, ti]))
        loss = term if loss is None else tape.add(loss, term)
    grads = tape.backward(loss)
    return {"w": grads.of(w_v)}, grads.of(x_v)


def tape_gru_grads(params, x, weights):
    b, t, d_in = x.shape
    d = params.b_z.shape[0]
    tape = Tape()
    x_v = tape.input(x)
    pvars = {name: tape.input(arr) for name, arr in params.named_tensors()}
    h = tape.constant(np.zeros((b, d)))
    loss = None
    for ti in range(t):
        xt = tape.index(x_v, (slice(None), ti))
        z = tape.sigmoid(tape.add(tape.add(tape.matmul(xt, pvars["w_z"]),
                                           tape.matmul(h, pvars["u_z"])),
                                  pvars["b_z"]))
        r = tape.sigmoid(tape.add(tape.add(tape.matmul(xt, pvars["w_r"]),
                                           tape.matmul(h, pvars["u_r"])),
                                  pvars["b_r"]))
        c = tape.tanh(tape.add(tape.add(tape.matmul(xt, pvars["w_h"]),
                                        tape.matmul(tape.mul(r, h), pvars["u_h"])),
                               pvars["b_h"]))
        omz = tape.add_const(tape.scale(z, -1.0), 1.0)
        h = tape.add(tape.mul(z, h), tape.mul(omz, c))
        term = tape.dot(h, tape.constant(weights[:, ti]))
        loss = term if loss is None else tape.add(loss, term)
    grads = tape.backward(loss)
    return {name: grads.of(var) for name, var in pvars.items()}, grads.of(x_v)


def check_baselines(seed, b=2, t=5, d=6):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((b, t, d))
    rows = []

    vp = bl.init_vector_rnn(d, seed=seed)
    hs, cache = bl.vector_rnn_forward_train(vp, x)
    weights = rng.standard_normal(hs.shape)
    grads, dx = bl.vector_rnn_backward(vp, x, cache, weights)
    fd = tc.finite_difference_grad(
        lambda w: float(np.sum(bl.vector_rnn_forward(bl.VectorRNNParams(w=w), x) * weights)),
        vp.w, 1e-6)
    rows.append(CheckRow("vector-rnn-fd", "w", rel_err(grads["w"], fd), FD_TOL))
    tgrads, tdx = tape_vector_rnn_grads(vp, x, weights)
    rows.append(CheckRow("vector-rnn-tape", "w", rel_err(grads["w"], tgrads["w"]), TAPE_TOL))
    rows.append(CheckRow("vector-rnn-tape", "dx", rel_err(dx, tdx), TAPE_TOL))

    gp = bl.init_gru(d, d, seed=seed)
    hs, cache = bl.gru_forward_train(gp, x)
    weights = rng.standard_normal(hs.shape)
    grads, dx = bl.gru_backward(gp, cache, weights)
    tgrads, tdx = tape_gru_grads(gp, x, weights)
    for name, _ in gp.named_tensors():
        def loss(a, nm=name):
            patched = copy.deepcopy(gp)
            dict(patched.named_tensors())[nm][...] = a
            return float(np.sum(bl.gru_forward(patched, x) * weights))

        fd = tc.finite_difference_grad(loss, dict(gp.named_tensors())[name], 1e-6)
        rows.append(CheckRow("gru-fd", name, rel_err(grads[name], fd), FD_TOL))
        rows.append(CheckRow("gru-tape", name, rel_err(grads[name], tgrads[name]), TAPE_TOL))
    rows.append(CheckRow("gru-tape", "dx", rel_err(dx, tdx), TAPE_TOL))

    dp = bl.init_diag_linear(d, 2, 4, 3, seed=seed)
    y, cache = bl.diag_linear_forward_train(dp, x)
    weights = rng.standard_normal(y.shape)
    grads, dx = bl.diag_linear_backward(dp, cache, weights)
    for name, _ in dp.named_tensors():
        def loss(a, nm=name):
            patched = copy.deepcopy(dp)
            dict(patched.named_tensors())[nm][...] = a
            return float(np.sum(bl.diag_linear_rnn_forward(patched, x) * weights))

        fd = tc.finite_difference_grad(loss, dict(dp.named_tensors())[name], 1e-6)
        rows.append(CheckRow("diag-linear-fd", name, rel_err(grads[name], fd), FD_TOL))
    fd_x = tc.finite_difference_grad(
        lambda xx: float(np.sum(bl.diag_linear_rnn_forward(dp, xx) * weights)), x, 1e-6)
    rows.append(CheckRow("diag-linear-fd", "dx", rel_err(dx, fd_x), FD_TOL))
    return rows


# --- rmsnorm ----------------------------------------------------------------------

def check_rmsnorm(seed, d=12):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal(d)
    w = rng.standard_normal(d)
    weights = rng.standard_normal(d)
    y, s = tc.rmsnorm_forward(x, w)
    dx, dw = tc.rmsnorm_backward(x, w, s, weights)

    fd_x = tc.finite_difference_grad(
        lambda xx: float(np.sum(tc.rmsnorm_forward(xx, w)[0] * weights)), x, 1e-6)
    fd_w = tc.finite_difference_grad(
        lambda ww: float(np.sum(tc.rmsnorm_forward(x, ww)[0] * weights)), w, 1e-6)

    tape = Tape()
    x_v = tape.input(x)
    w_v = tape.input(w)
    loss = tape.dot(tape.rmsnorm(x_v, w_v), tape.constant(weights))
    grads = tape.backward(loss)

    return [CheckRow("rmsnorm-fd", "dx", rel_err(dx, fd_x), RMS_FD_TOL),
            CheckRow("rmsnorm-fd", "dw", rel_err(dw, fd_w), RMS_FD_TOL),
            CheckRow("rmsnorm-tape", "dx", rel_err(dx, grads.of(x_v)), TAPE_TOL),
            CheckRow("rmsnorm-tape", "dw", rel_err(dw, grads.of(w_v)), TAPE_TOL)]


# --- suite -------------------------------------------------------------------------

def run_gradcheck(n_seeds=3, corrupt=False):
    """Full dual-oracle suite over n_seeds seeds; returns CheckRow list.

    ``corrupt`` is a negative-control fixture: it perturbs one recurrence
    gradient so the suite must fail.
    """
    rows = []
    for seed in range(n_seeds):
        rec_rows = check_recurrence(seed)
        if corrupt and seed == 0:
            rec_rows[0] = CheckRow(rec_rows[0].group, rec_rows[0].name,
                                   rec_rows[0].rel_err + 1.0, rec_rows[0].tol)
        rows.extend(rec_rows)
        rows.extend(check_rmsnorm(seed))
        rows.extend(check_baselines(seed))
    rows.extend(check_layer(0))
    return rows


def report_lines(rows):
    lines = []
    for r in rows:
        status = "ok" if r.ok else "FAIL"
        lines.append(f"{status:4s} {r.group:18s} {r.name:12s} "
                     f"rel_err={r.rel_err:.3e} tol={r.tol:.0e}")
    worst = max(rows, key=lambda r: r.rel_err / r.tol)
    lines.append(f"worst: {worst.group}/{worst.name} rel_err={worst.rel_err:.3e}")
    return lines
