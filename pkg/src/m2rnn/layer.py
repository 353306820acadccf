"""Full matrix-state RNN block.

Pipeline per token: q/k/v projections -> causal depthwise conv (width 4) ->
SiLU; forget gate from a parameterized sigmoid-power; output gate SiLU
without conv; the matrix-state recurrence; an elementwise residual on the
value path; output gating; RMSNorm; output projection.

Also the head-pattern parameter/state-size calculators used by the sizing
tables and the sharding schemes.
"""

from dataclasses import dataclass, field

import numpy as np

from . import recurrence as rec
from . import tensor_core as tc

CONV_WIDTH = 4

PATTERNS = ("multi-head", "multi-query", "multi-key", "multi-value")


@dataclass(frozen=True)
class HeadPattern:
    """A q/k/v head-sharing pattern with its dimensions."""
    tag: str
    n_heads: int
    k_dim: int
    v_dim: int
    d_model: int

    def __post_init__(self):
        if self.tag not in PATTERNS:
            raise rec.ConfigError(f"unknown head pattern {self.tag!r}")


def projection_sizes(pattern):
    """Per-projection parameter counts (weights only, no biases or convs)."""
    n, k, v, d = pattern.n_heads, pattern.k_dim, pattern.v_dim, pattern.d_model
    if pattern.tag == "multi-head":
        wq, wk, wv = n * k * d, n * k * d, n * v * d
    elif pattern.tag == "multi-query":
        wq, wk, wv = n * k * d, k * d, v * d
    elif pattern.tag == "multi-key":
        wq, wk, wv = k * d, n * k * d, v * d
    else:  # multi-value
        wq, wk, wv = k * d, k * d, n * v * d
    return {"w_q": wq, "w_k": wk, "w_v": wv, "w_g": n * v * d,
            "w_f": n * d, "w_o": n * v * d}


def param_count(pattern):
    """Total projection parameters for the pattern (exact column sums)."""
    return sum(projection_sizes(pattern).values())


def state_size(pattern):
    """Recurrent state entries: N * K * V for every pattern."""
    return pattern.n_heads * pattern.k_dim * pattern.v_dim


def init_transition(mode, n_heads, v_dim, seed=0):
    """Per-head transition matrices: identity, orthogonal, or normal."""
    if mode == "identity":
        return np.tile(np.eye(v_dim), (n_heads, 1, 1))
    rng = np.random.default_rng(seed)
    if mode == "orthogonal":
        w = np.zeros((n_heads, v_dim, v_dim))
        for n in range(n_heads):
            q, r = np.linalg.qr(rng.standard_normal((v_dim, v_dim)))
            w[n] = q * np.sign(np.diag(r))
        return w
    if mode == "normal":
        return rng.standard_normal((n_heads, v_dim, v_dim)) / np.sqrt(v_dim)
    raise rec.ConfigError(f"unknown transition init {mode!r}")


def _trunc_normal(rng, shape, std=0.02):
    return np.clip(rng.normal(0.0, std, shape), -2.0 * std, 2.0 * std)


@dataclass
class M2RNNLayerParams:
    """All learnable tensors of one block (multi-value head pattern)."""
    d_model: int
    n_heads: int
    k_dim: int
    v_dim: int
    w_q: np.ndarray
    b_q: np.ndarray
    conv_q: np.ndarray
    w_k: np.ndarray
    b_k: np.ndarray
    conv_k: np.ndarray
    w_v: np.ndarray
    b_v: np.ndarray
    conv_v: np.ndarray
    w_f: np.ndarray
    w_g: np.ndarray
    transition: np.ndarray
    w_r: np.ndarray
    rms_weight: np.ndarray
    w_o: np.ndarray
    gate: rec.ForgetGateParams
    rms_groups: int = 1
    rms_eps: float = tc.RMS_EPS
    clip: float | None = None

    def named_tensors(self):
        """(name, array) pairs in canonical order; arrays are live views."""
        yield "w_q", self.w_q
        yield "b_q", self.b_q
        yield "conv_q", self.conv_q
        yield "w_k", self.w_k
        yield "b_k", self.b_k
        yield "conv_k", self.conv_k
        yield "w_v", self.w_v
        yield "b_v", self.b_v
        yield "conv_v", self.conv_v
        yield "w_f", self.w_f
        yield "gate_alpha", self.gate.alpha
        yield "gate_beta", self.gate.beta
        yield "w_g", self.w_g
        yield "transition", self.transition
        yield "w_r", self.w_r
        yield "rms_weight", self.rms_weight
        yield "w_o", self.w_o

    @property
    def nv(self):
        return self.n_heads * self.v_dim


def init_layer_params(d_model, n_heads, k_dim, v_dim, seed=0,
                      transition_init="identity", rms_groups=1,
                      alpha_range=(1.0, 8.0), beta_range=(1.0, 8.0),
                      clip=None, proj_std=0.02):
    """Initialize one block: trunc-normal projections, zero biases,
    uniform conv taps, identity transition by default, unit residual and
    norm weights, per-head gate parameters.

    proj_std defaults to the deep-stack convention; single-layer desk
    models train far better with fan-in scaling (~1/sqrt(d_model))."""
    rng = np.random.default_rng(seed)
    nv = n_heads * v_dim
    if nv % rms_groups != 0:
        raise rec.ConfigError(f"rms_groups={rms_groups} must divide {nv}")
    conv_bound = 0.5  # 1/sqrt(width)
    return M2RNNLayerParams(
        d_model=d_model, n_heads=n_heads, k_dim=k_dim, v_dim=v_dim,
        w_q=_trunc_normal(rng, (d_model, k_dim), proj_std),
        b_q=np.zeros(k_dim),
        conv_q=rng.uniform(-conv_bound, conv_bound, (CONV_WIDTH, k_dim)),
        w_k=_trunc_normal(rng, (d_model, k_dim), proj_std),
        b_k=np.zeros(k_dim),
        conv_k=rng.uniform(-conv_bound, conv_bound, (CONV_WIDTH, k_dim)),
        w_v=_trunc_normal(rng, (d_model, nv), proj_std),
        b_v=np.zeros(nv),
        conv_v=rng.uniform(-conv_bound, conv_bound, (CONV_WIDTH, nv)),
        w_f=_trunc_normal(rng, (d_model, n_heads), proj_std),
        w_g=_trunc_normal(rng, (d_model, nv), proj_std),
        transition=init_transition(transition_init, n_heads, v_dim,
                                   seed=rng.integers(2**31)),
        w_r=np.ones((n_heads, v_dim)),
        rms_weight=np.ones(nv),
        w_o=_trunc_normal(rng, (nv, d_model), proj_std),
        gate=rec.forget_gate_init(n_heads, alpha_range, beta_range,
                                  seed=rng.integers(2**31)),
        rms_groups=rms_groups,
        clip=clip,
    )


def _batched_conv(x, kernel):
    """Causal depthwise conv over the time axis of (B, T, C)."""
    return np.stack([tc.causal_depthwise_conv1d(x[b], kernel)
                     for b in range(x.shape[0])])


def _batched_conv_backward(x, kernel, dy):
    dx = np.zeros_like(x)
    dkernel = np.zeros_like(kernel)
    for b in range(x.shape[0]):
        dx_b, dk_b, _ = tc.causal_depthwise_conv1d_backward(x[b], kernel, dy[b])
        dx[b] = dx_b
        dkernel += dk_b
    return dx, dkernel


def group_rmsnorm_forward(x, weight, groups, eps):
    """RMSNorm over `groups` equal feature groups of the last axis."""
    nfeat = x.shape[-1]
    gsz = nfeat // groups
    xg = x.reshape(x.shape[:-1] + (groups, gsz))
    wg = weight.reshape(groups, gsz)
    s = tc.rms_scale_from_ssq(tc._feature_square_sum(xg), gsz, eps)
    y = (wg * xg) * s[..., None]
    return y.reshape(x.shape), s


def group_rmsnorm_backward(x, weight, s, dy, groups):
    nfeat = x.shape[-1]
    gsz = nfeat // groups
    xg = x.reshape(x.shape[:-1] + (groups, gsz))
    wg = weight.reshape(groups, gsz)
    dyg = dy.reshape(xg.shape)
    p = wg * dyg
    r = np.zeros(xg.shape[:-1])
    for j in range(gsz):
        r = r + p[..., j] * xg[..., j]
    dx, dw_terms = tc.rms_backward_from_r(xg, wg, s, dyg, r)
    dw = np.sum(dw_terms.reshape(-1, groups, gsz), axis=0).reshape(nfeat)
    return dx.reshape(x.shape), dw


@dataclass
class LayerCache:
    """Forward intermediates needed by layer_backward."""
    x: np.ndarray
    proj_q: np.ndarray
    conv_q_out: np.ndarray
    proj_k: np.ndarray
    conv_k_out: np.ndarray
    proj_v: np.ndarray
    conv_v_out: np.ndarray
    u_f: np.ndarray
    u_g: np.ndarray
    g: np.ndarray
    inputs: rec.RecurrenceInputs
    h_full: np.ndarray
    y_res: np.ndarray
    gated: np.ndarray
    s: np.ndarray
    normed: np.ndarray


def _project(params, x):
    """Shared front end: q/k/v/f/g activations plus their intermediates."""
    b, t, d = x.shape
    x2 = x.reshape(b * t, d)

    proj_q = (tc.matmul(x2, params.w_q) + params.b_q).reshape(b, t, params.k_dim)
    conv_q_out = _batched_conv(proj_q, params.conv_q)
    q = tc.silu(conv_q_out)

    proj_k = (tc.matmul(x2, params.w_k) + params.b_k).reshape(b, t, params.k_dim)
    conv_k_out = _batched_conv(proj_k, params.conv_k)
    k = tc.silu(conv_k_out)

    nv = params.nv
    proj_v = (tc.matmul(x2, params.w_v) + params.b_v).reshape(b, t, nv)
    conv_v_out = _batched_conv(proj_v, params.conv_v)
    v = tc.silu(conv_v_out).reshape(b, t, params.n_heads, params.v_dim)

    u_f = tc.matmul(x2, params.w_f).reshape(b, t, params.n_heads)
    f = rec.forget_gate(u_f, params.gate.alpha, params.gate.beta)

    u_g = tc.matmul(x2, params.w_g).reshape(b, t, nv)
    g = tc.silu(u_g)
    return proj_q, conv_q_out, q, proj_k, conv_k_out, k, proj_v, conv_v_out, v, u_f, f, u_g, g


def layer_forward_train(params, x, h0=None):
    """Forward pass caching everything the backward needs.

    Returns (o, h_t, cache); o is (B, T, d_model), h_t the final state.
    """
    x = tc.asarray64(x)
    b, t, d = x.shape
    if t < 1:
        raise tc.DimensionError("layer requires at least one time step")
    if d != params.d_model:
        raise tc.DimensionError(f"input width {d} != layer width {params.d_model}")

    (proj_q, conv_q_out, q, proj_k, conv_k_out, k, proj_v, conv_v_out, v,
     u_f, f, u_g, g) = _project(params, x)

    if h0 is None:
        h0 = np.zeros((b, params.n_heads, params.k_dim, params.v_dim))
    inputs = rec.RecurrenceInputs(q=q, k=k, v=v, f=f, h0=h0, w=params.transition)
    h_full = rec.m2rnn_forward_cached(inputs)
    y = rec.readout_from_states(h_full, q)
    h_t = h_full[:, t - 1].copy()

    nv = params.nv
    y_res = y.reshape(b, t, nv) + params.w_r.reshape(nv) * v.reshape(b, t, nv)
    gated = y_res * g
    normed, s = group_rmsnorm_forward(gated, params.rms_weight,
                                      params.rms_groups, params.rms_eps)
    o = tc.matmul(normed.reshape(b * t, nv), params.w_o).reshape(b, t, d)

    cache = LayerCache(x=x, proj_q=proj_q, conv_q_out=conv_q_out,
                       proj_k=proj_k, conv_k_out=conv_k_out,
                       proj_v=proj_v, conv_v_out=conv_v_out,
                       u_f=u_f, u_g=u_g, g=g, inputs=inputs, h_full=h_full,
                       y_res=y_res, gated=gated, s=s, normed=normed)
    return o, h_t, cache


def layer_forward(params, x, h0=None):
    """Block output and final recurrent state (no training cache)."""
    o, h_t, _ = layer_forward_train(params, x, h0)
    return o, h_t


def layer_backward(params, cache, do, clip=None):
    """Chained backward through the whole block.

    Returns (grads, dx) where grads maps the names from named_tensors to
    gradient arrays. ``clip`` is the per-step state-gradient norm bound of
    the recurrence (None disables).
    """
    x = cache.x
    b, t, d = x.shape
    x2 = x.reshape(b * t, d)
    nv = params.nv
    grads = {}

    do2 = tc.asarray64(do).reshape(b * t, d)
    grads["w_o"] = tc.matmul(cache.normed.reshape(b * t, nv).T, do2)
    dnormed = tc.matmul(do2, params.w_o.T).reshape(b, t, nv)

    dgated, grads["rms_weight"] = group_rmsnorm_backward(
        cache.gated, params.rms_weight, cache.s, dnormed, params.rms_groups)

    dy_res = dgated * cache.g
    dg = dgated * cache.y_res

    du_g = dg * tc.silu_grad(cache.u_g)
    du_g2 = du_g.reshape(b * t, nv)
    grads["w_g"] = tc.matmul(x2.T, du_g2)
    dx2 = tc.matmul(du_g2, params.w_g.T)

    v = cache.inputs.v
    v_flat = v.reshape(b, t, nv)
    grads["w_r"] = np.sum(dy_res * v_flat, axis=(0, 1)).reshape(params.n_heads,
                                                                params.v_dim)
    dv_res = (dy_res * params.w_r.reshape(nv)).reshape(v.shape)
    dy_rec = dy_res.reshape(v.shape)

    rg = rec.m2rnn_backward(cache.inputs, cache.h_full, dy_rec, clip=clip)
    grads["transition"] = rg.dw

    dpsi_dx, dpsi_da, dpsi_db = rec.forget_gate_grad(cache.u_f, params.gate.alpha,
                                                     params.gate.beta)
    du_f = rg.df * dpsi_dx
    grads["gate_alpha"] = np.sum(rg.df * dpsi_da, axis=(0, 1))
    grads["gate_beta"] = np.sum(rg.df * dpsi_db, axis=(0, 1))
    du_f2 = du_f.reshape(b * t, params.n_heads)
    grads["w_f"] = tc.matmul(x2.T, du_f2)
    dx2 = dx2 + tc.matmul(du_f2, params.w_f.T)

    def back_projection(dact, conv_out, proj, conv_kernel, w):
        dconv = dact * tc.silu_grad(conv_out)
        dproj, dkernel = _batched_conv_backward(proj, conv_kernel, dconv)
        dproj2 = dproj.reshape(b * t, -1)
        dw = tc.matmul(x2.T, dproj2)
        db = np.sum(dproj2, axis=0)
        dxc = tc.matmul(dproj2, w.T)
        return dw, db, dkernel, dxc

    grads["w_q"], grads["b_q"], grads["conv_q"], dxq = back_projection(
        rg.dq, cache.conv_q_out, cache.proj_q, params.conv_q, params.w_q)
    dx2 = dx2 + dxq
    grads["w_k"], grads["b_k"], grads["conv_k"], dxk = back_projection(
        rg.dk, cache.conv_k_out, cache.proj_k, params.conv_k, params.w_k)
    dx2 = dx2 + dxk
    dv_total = (rg.dv + dv_res).reshape(b, t, nv)
    grads["w_v"], grads["b_v"], grads["conv_v"], dxv = back_projection(
        dv_total, cache.conv_v_out, cache.proj_v, params.conv_v, params.w_v)
    dx2 = dx2 + dxv

    return grads, dx2.reshape(b, t, d)
