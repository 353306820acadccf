"""Gated non-linear matrix-state recurrence.

Per (batch, head) work item, with state H in R^{K x V}:

    Z_t = tanh(H_{t-1} W + k_t v_t^T)
    H_t = f_t H_{t-1} + (1 - f_t) Z_t
    y_t = H_t^T q_t

One query/key head is shared across N value heads. The forward scan keeps no
per-step state; training uses a recompute-and-cache pass followed by a
reverse sweep with optional per-step norm clipping of the propagated state
gradient.
"""

import math
from dataclasses import dataclass

import numpy as np

from . import backend
from . import tensor_core as tc


class ConfigError(ValueError):
    """Invalid configuration value."""


@dataclass
class ForgetGateParams:
    """Per-head gate parameters; alpha controls decay rate, beta the offset."""
    alpha: np.ndarray
    beta: np.ndarray


@dataclass
class RecurrenceInputs:
    """Inputs of one multi-value recurrence call.

    q, k: (B, T, K) shared across heads; v: (B, T, N, V); f: (B, T, N) in
    [0, 1]; h0: (B, N, K, V); w: (N, V, V) per-head transition matrices.
    """
    q: np.ndarray
    k: np.ndarray
    v: np.ndarray
    f: np.ndarray
    h0: np.ndarray
    w: np.ndarray

    def validate(self):
        b, t, kd = self.q.shape
        if self.k.shape != (b, t, kd):
            raise tc.DimensionError(f"k shape {self.k.shape} != q shape {self.q.shape}")
        if self.v.ndim != 4 or self.v.shape[:2] != (b, t):
            raise tc.DimensionError(f"v shape {self.v.shape} incompatible with (B,T)=({b},{t})")
        n, vd = self.v.shape[2], self.v.shape[3]
        if self.f.shape != (b, t, n):
            raise tc.DimensionError(f"f shape {self.f.shape} != {(b, t, n)}")
        if self.h0.shape != (b, n, kd, vd):
            raise tc.DimensionError(f"h0 shape {self.h0.shape} != {(b, n, kd, vd)}")
        if self.w.shape != (n, vd, vd):
            raise tc.DimensionError(f"w shape {self.w.shape} != {(n, vd, vd)}")
        return b, t, n, kd, vd


@dataclass
class RecurrenceGrads:
    """Gradients mirroring RecurrenceInputs."""
    dq: np.ndarray
    dk: np.ndarray
    dv: np.ndarray
    dw: np.ndarray
    df: np.ndarray
    dh0: np.ndarray


def forget_gate(x, alpha, beta):
    """Gate value 1 / (1 + exp(x + beta))^alpha, computed stably.

    Evaluated as exp(-alpha * softplus(x + beta)) with the usual softplus
    branch, so large |x| neither overflows nor loses the (0, 1) range.
    Strictly decreasing in x for alpha > 0.
    """
    x = tc.asarray64(x)
    z = x + beta
    # softplus(z): log1p(exp(z)) for z <= 0, z + log1p(exp(-z)) otherwise
    sp = np.where(z <= 0.0, tc.log1p(tc.exp(np.minimum(z, 0.0))),
                  z + tc.log1p(tc.exp(-np.abs(z))))
    return tc.exp(-(alpha * sp))


def forget_gate_grad(x, alpha, beta):
    """Partials of the gate w.r.t. (x, alpha, beta) at x.

    Returns (dpsi_dx, dpsi_dalpha, dpsi_dbeta); dpsi_dbeta equals dpsi_dx.
    """
    x = tc.asarray64(x)
    z = x + beta
    sp = np.where(z <= 0.0, tc.log1p(tc.exp(np.minimum(z, 0.0))),
                  z + tc.log1p(tc.exp(-np.abs(z))))
    psi = tc.exp(-(alpha * sp))
    sig = tc.sigmoid(z)
    dpsi_dx = -(alpha * sig) * psi
    dpsi_dalpha = -sp * psi
    return dpsi_dx, dpsi_dalpha, dpsi_dx


def forget_gate_init(num_heads, alpha_range=(1.0, 8.0), beta_range=(1.0, 8.0), seed=0):
    """Draw per-head gate parameters: alpha uniform, beta log-uniform."""
    a_min, a_max = alpha_range
    b_min, b_max = beta_range
    if not (0.0 < a_min <= a_max):
        raise ConfigError(f"invalid alpha range {alpha_range}")
    if not (0.0 < b_min <= b_max):
        raise ConfigError(f"invalid beta range {beta_range}")
    rng = np.random.default_rng(seed)
    alpha = rng.uniform(a_min, a_max, num_heads)
    beta = np.exp(rng.uniform(math.log(b_min), math.log(b_max), num_heads))
    return ForgetGateParams(alpha=alpha, beta=beta)


def m2rnn_forward(inputs):
    """Fused forward scan. Returns (Y, H_T); no intermediate states kept."""
    inputs.validate()
    return backend.scan_forward(inputs.q, inputs.k, inputs.v, inputs.f, inputs.h0, inputs.w)


def m2rnn_forward_cached(inputs):
    """Recompute pass for the backward: returns H_full (B, T, N, K, V)."""
    inputs.validate()
    return backend.scan_forward_cached(inputs.q, inputs.k, inputs.v, inputs.f,
                                       inputs.h0, inputs.w)


def readout_from_states(h_full, q):
    """Y[b,t,n,:] = H_t^T q_t from cached states, ascending-row accumulation.

    Bitwise equal to the Y produced by m2rnn_forward.
    """
    b, t, n, kd, vd = h_full.shape
    y = np.zeros((b, t, n, vd), dtype=np.float64)
    for i in range(kd):
        y += h_full[:, :, :, i, :] * q[:, :, None, i, None]
    return y


def m2rnn_backward(inputs, h_full, dy, clip=None):
    """Reverse-sweep BPTT through the recurrence.

    Per step t (descending), with G_t the total gradient reaching H_t:

        G_t  = q_t dy_t^T + P_{t+1}            (P after the last step is 0)
        dX_t = (G_t (1 - f_t)) * (1 - Z_t^2)
        P_t  = f_t G_t + dX_t W^T              (optionally norm-clipped)
        df_t = sum(G_t * (H_{t-1} - Z_t))
        dW  += H_{t-1}^T dX_t
        dk_t = dX_t v_t;  dv_t = dX_t^T k_t;  dq_t = H_t dy_t

    dq/dk accumulate over the N value heads sharing the query/key head;
    dh0 is the final propagated P. ``clip`` bounds the Frobenius norm of P
    per (batch, head) slice after every step; None disables clipping.
    """
    b, t, n, kd, vd = inputs.validate()
    if h_full.shape != (b, t, n, kd, vd):
        raise tc.DimensionError(f"h_full shape {h_full.shape} != {(b, t, n, kd, vd)}")
    if dy.shape != (b, t, n, vd):
        raise tc.DimensionError(f"dy shape {dy.shape} != {(b, t, n, vd)}")
    clip_val = 0.0 if clip is None else float(clip)
    dq, dk, dv, dw, df, dh0 = backend.scan_backward(
        inputs.q, inputs.k, inputs.v, inputs.f, inputs.h0, inputs.w,
        h_full, dy, clip_val)
    return RecurrenceGrads(dq=dq, dk=dk, dv=dv, dw=dw, df=df, dh0=dh0)


def clip_state_gradient(p, clip):
    """Scale p to Frobenius norm ``clip`` if it exceeds it; else unchanged."""
    norm = math.sqrt(tc.ascending_sum(p * p))
    if norm > clip:
        return p * (clip / norm)
    return p


def unfused_forward(inputs):
    """Straight-line per-timestep reference built from tensor_core primitives.

    Bitwise-equal to m2rnn_forward; used as an oracle and by the benchmark.
    """
    b, t, n, kd, vd = inputs.validate()
    y = np.zeros((b, t, n, vd), dtype=np.float64)
    h_t = np.zeros((b, n, kd, vd), dtype=np.float64)
    for ni in range(n):
        w_n = inputs.w[ni]
        for bi in range(b):
            h = inputs.h0[bi, ni].copy()
            for ti in range(t):
                z = tc.tanh(tc.matmul(h, w_n) + tc.outer(inputs.k[bi, ti], inputs.v[bi, ti, ni]))
                f = inputs.f[bi, ti, ni]
                h = f * h + (1.0 - f) * z
                y[bi, ti, ni] = tc.matmul(h.T, inputs.q[bi, ti][:, None])[:, 0]
            h_t[bi, ni] = h
    return y, h_t
