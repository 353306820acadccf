"""Reference recurrent baselines: dense vector RNN, GRU, and a gated
diagonal linear RNN with positive decays (the regime that provably cannot
track parity). All backward passes are hand-written and oracle-checked.
"""

from dataclasses import dataclass

import numpy as np

from . import tensor_core as tc


# --- dense vector RNN -------------------------------------------------------

@dataclass
class VectorRNNParams:
    """h_t = tanh(W h_{t-1} + x_t); y_t = h_t."""
    w: np.ndarray  # (d, d)

    def named_tensors(self):
        yield "w", self.w


def init_vector_rnn(d, seed=0, scale=None):
    rng = np.random.default_rng(seed)
    if scale is None:
        scale = 1.0 / np.sqrt(d)
    return VectorRNNParams(w=rng.standard_normal((d, d)) * scale)


def vector_rnn_forward(params, x):
    y, _ = vector_rnn_forward_train(params, x)
    return y


def vector_rnn_forward_train(params, x):
    """Returns (h_states (B,T,d), cache)."""
    x = tc.asarray64(x)
    b, t, d = x.shape
    if params.w.shape != (d, d):
        raise tc.DimensionError(f"transition {params.w.shape} vs input width {d}")
    wt = np.ascontiguousarray(params.w.T)
    h = np.zeros((b, d))
    hs = np.zeros((b, t, d))
    for ti in range(t):
        h = tc.tanh(tc.matmul(h, wt) + x[:, ti])
        hs[:, ti] = h
    return hs, hs


def vector_rnn_backward(params, x, hs, dy):
    """BPTT; returns (grads, dx)."""
    b, t, d = x.shape
    dw = np.zeros_like(params.w)
    dx = np.zeros_like(tc.asarray64(x))
    carry = np.zeros((b, d))
    for ti in range(t - 1, -1, -1):
        h = hs[:, ti]
        da = (dy[:, ti] + carry) * (1.0 - h * h)
        hprev = hs[:, ti - 1] if ti > 0 else np.zeros((b, d))
        dw += tc.matmul(da.T, hprev)
        dx[:, ti] = da
        carry = tc.matmul(da, params.w)
    return {"w": dw}, dx


# --- GRU ---------------------------------------------------------------------

@dataclass
class GRUParams:
    """Three-gate recurrent cell.

    z keeps the previous state (z == 1 freezes it), r is the reset gate:
        z_t = sigmoid(x W_z + h U_z + b_z)
        r_t = sigmoid(x W_r + h U_r + b_r)
        c_t = tanh(x W_h + (r_t * h) U_h + b_h)
        h_t = z_t * h_{t-1} + (1 - z_t) * c_t
    """
    w_z: np.ndarray
    u_z: np.ndarray
    b_z: np.ndarray
    w_r: np.ndarray
    u_r: np.ndarray
    b_r: np.ndarray
    w_h: np.ndarray
    u_h: np.ndarray
    b_h: np.ndarray

    def named_tensors(self):
        for name in ("w_z", "u_z", "b_z", "w_r", "u_r", "b_r", "w_h", "u_h", "b_h"):
            yield name, getattr(self, name)


def init_gru(d_in, d, seed=0):
    rng = np.random.default_rng(seed)
    s_in = 1.0 / np.sqrt(d_in)
    s_h = 1.0 / np.sqrt(d)
    return GRUParams(
        w_z=rng.standard_normal((d_in, d)) * s_in, u_z=rng.standard_normal((d, d)) * s_h,
        b_z=np.zeros(d),
        w_r=rng.standard_normal((d_in, d)) * s_in, u_r=rng.standard_normal((d, d)) * s_h,
        b_r=np.zeros(d),
        w_h=rng.standard_normal((d_in, d)) * s_in, u_h=rng.standard_normal((d, d)) * s_h,
        b_h=np.zeros(d),
    )


def gru_forward(params, x):
    hs, _ = gru_forward_train(params, x)
    return hs


def gru_forward_train(params, x):
    x = tc.asarray64(x)
    b, t, d_in = x.shape
    d = params.b_z.shape[0]
    h = np.zeros((b, d))
    hs = np.zeros((b, t, d))
    zs = np.zeros((b, t, d))
    rs = np.zeros((b, t, d))
    cs = np.zeros((b, t, d))
    x2 = x.reshape(b * t, d_in)
    xz = tc.matmul(x2, params.w_z).reshape(b, t, d)
    xr = tc.matmul(x2, params.w_r).reshape(b, t, d)
    xh = tc.matmul(x2, params.w_h).reshape(b, t, d)
    for ti in range(t):
        z = tc.sigmoid(xz[:, ti] + tc.matmul(h, params.u_z) + params.b_z)
        r = tc.sigmoid(xr[:, ti] + tc.matmul(h, params.u_r) + params.b_r)
        c = tc.tanh(xh[:, ti] + tc.matmul(r * h, params.u_h) + params.b_h)
        h = z * h + (1.0 - z) * c
        zs[:, ti], rs[:, ti], cs[:, ti], hs[:, ti] = z, r, c, h
    return hs, (x, zs, rs, cs, hs)


def gru_backward(params, cache, dy):
    x, zs, rs, cs, hs = cache
    b, t, d_in = x.shape
    d = params.b_z.shape[0]
    grads = {name: np.zeros_like(arr) for name, arr in params.named_tensors()}
    dx = np.zeros_like(x)
    carry = np.zeros((b, d))
    for ti in range(t - 1, -1, -1):
        z, r, c = zs[:, ti], rs[:, ti], cs[:, ti]
        hprev = hs[:, ti - 1] if ti > 0 else np.zeros((b, d))
        dh = dy[:, ti] + carry

        dz = dh * (hprev - c)
        dc = dh * (1.0 - z)
        dhprev = dh * z

        dc_pre = dc * (1.0 - c * c)
        grads["w_h"] += tc.matmul(x[:, ti].T, dc_pre)
        grads["u_h"] += tc.matmul((r * hprev).T, dc_pre)
        grads["b_h"] += np.sum(dc_pre, axis=0)
        drh = tc.matmul(dc_pre, params.u_h.T)
        dr = drh * hprev
        dhprev = dhprev + drh * r

        dr_pre = dr * r * (1.0 - r)
        grads["w_r"] += tc.matmul(x[:, ti].T, dr_pre)
        grads["u_r"] += tc.matmul(hprev.T, dr_pre)
        grads["b_r"] += np.sum(dr_pre, axis=0)
        dhprev = dhprev + tc.matmul(dr_pre, params.u_r.T)

        dz_pre = dz * z * (1.0 - z)
        grads["w_z"] += tc.matmul(x[:, ti].T, dz_pre)
        grads["u_z"] += tc.matmul(hprev.T, dz_pre)
        grads["b_z"] += np.sum(dz_pre, axis=0)
        dhprev = dhprev + tc.matmul(dz_pre, params.u_z.T)

        dx[:, ti] = (tc.matmul(dc_pre, params.w_h.T) + tc.matmul(dr_pre, params.w_r.T)
                     + tc.matmul(dz_pre, params.w_z.T))
        carry = dhprev
    return grads, dx


# --- gated diagonal linear RNN ----------------------------------------------

@dataclass
class DiagLinearRNNParams:
    """Outer-product state with per-channel positive decays.

    Per head: H_t = diag-scale(a_t) H_{t-1} + k_t v_t^T, y_t = H_t^T q_t,
    where a_t = sigmoid(x W_a) in (0, 1) scales state columns. One shared
    q/k head, N value heads; output is the concatenated (N*V,) readout.
    """
    n_heads: int
    k_dim: int
    v_dim: int
    w_a: np.ndarray  # (d_in, N*V)
    w_q: np.ndarray  # (d_in, K)
    w_k: np.ndarray  # (d_in, K)
    w_v: np.ndarray  # (d_in, N*V)

    def named_tensors(self):
        for name in ("w_a", "w_q", "w_k", "w_v"):
            yield name, getattr(self, name)


def init_diag_linear(d_in, n_heads, k_dim, v_dim, seed=0):
    rng = np.random.default_rng(seed)
    s = 1.0 / np.sqrt(d_in)
    nv = n_heads * v_dim
    return DiagLinearRNNParams(
        n_heads=n_heads, k_dim=k_dim, v_dim=v_dim,
        w_a=rng.standard_normal((d_in, nv)) * s,
        w_q=rng.standard_normal((d_in, k_dim)) * s,
        w_k=rng.standard_normal((d_in, k_dim)) * s,
        w_v=rng.standard_normal((d_in, nv)) * s,
    )


def diag_linear_rnn_forward(params, x):
    y, _ = diag_linear_forward_train(params, x)
    return y


def diag_linear_forward_train(params, x):
    x = tc.asarray64(x)
    b, t, d_in = x.shape
    n, kd, vd = params.n_heads, params.k_dim, params.v_dim
    x2 = x.reshape(b * t, d_in)
    a = tc.sigmoid(tc.matmul(x2, params.w_a)).reshape(b, t, n, vd)
    q = tc.matmul(x2, params.w_q).reshape(b, t, kd)
    k = tc.matmul(x2, params.w_k).reshape(b, t, kd)
    v = tc.matmul(x2, params.w_v).reshape(b, t, n, vd)
    h = np.zeros((b, n, kd, vd))
    h_states = np.zeros((b, t, n, kd, vd))
    y = np.zeros((b, t, n, vd))
    for ti in range(t):
        h = a[:, ti, :, None, :] * h + k[:, ti][:, None, :, None] * v[:, ti][:, :, None, :]
        h_states[:, ti] = h
        y[:, ti] = np.einsum("bnkv,bk->bnv", h, q[:, ti])
    return y.reshape(b, t, n * vd), (x, a, q, k, v, h_states)


def diag_linear_backward(params, cache, dy):
    x, a, q, k, v, h_states = cache
    b, t, d_in = x.shape
    n, kd, vd = params.n_heads, params.k_dim, params.v_dim
    dy = dy.reshape(b, t, n, vd)
    da = np.zeros_like(a)
    dq = np.zeros((b, t, kd))
    dk = np.zeros((b, t, kd))
    dv = np.zeros_like(v)
    p = np.zeros((b, n, kd, vd))
    for ti in range(t - 1, -1, -1):
        hprev = h_states[:, ti - 1] if ti > 0 else np.zeros((b, n, kd, vd))
        g = q[:, ti, None, :, None] * dy[:, ti, :, None, :] + p
        dq[:, ti] = np.einsum("bnkv,bnv->bk", h_states[:, ti], dy[:, ti])
        da[:, ti] = np.einsum("bnkv,bnkv->bnv", g, hprev)
        dk[:, ti] = np.einsum("bnkv,bnv->bk", g, v[:, ti])
        dv[:, ti] = np.einsum("bnkv,bk->bnv", g, k[:, ti])
        p = g * a[:, ti, :, None, :]
    x2 = x.reshape(b * t, d_in)
    da_pre = (da * a * (1.0 - a)).reshape(b * t, n * vd)
    grads = {
        "w_a": tc.matmul(x2.T, da_pre),
        "w_q": tc.matmul(x2.T, dq.reshape(b * t, kd)),
        "w_k": tc.matmul(x2.T, dk.reshape(b * t, kd)),
        "w_v": tc.matmul(x2.T, dv.reshape(b * t, n * vd)),
    }
    dx2 = (tc.matmul(da_pre, params.w_a.T)
           + tc.matmul(dq.reshape(b * t, kd), params.w_q.T)
           + tc.matmul(dk.reshape(b * t, kd), params.w_k.T)
           + tc.matmul(dv.reshape(b * t, n * vd), params.w_v.T))
    return grads, dx2.reshape(b, t, d_in)
