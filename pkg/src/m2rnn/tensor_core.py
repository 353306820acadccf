"""Dense float64 tensor primitives with a fixed summation-order contract.

All reductions accumulate in ascending index order (matmul over the inner
dimension, convolutions over taps, RMSNorm over features) so results are
bit-reproducible across runs and shard layouts. Elementwise transcendentals
route through the selected kernel backend.
"""

import numpy as np

from . import backend


class DimensionError(ValueError):
    """Operand shapes are incompatible."""


RMS_EPS = 1e-6


def asarray64(x):
    return np.asarray(x, dtype=np.float64)


def matmul(a, b):
    """Matrix product with ascending inner-index accumulation."""
    a = asarray64(a)
    b = asarray64(b)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: incompatible shapes {a.shape} x {b.shape}")
    return backend.matmul(a, b)


def outer(u, v):
    """out[i, j] = u[i] * v[j]."""
    return np.multiply.outer(asarray64(u), asarray64(v))


def tanh(x):
    return backend.tanh(asarray64(x))


def sigmoid(x):
    return backend.sigmoid(asarray64(x))


def silu(x):
    """x * sigmoid(x)."""
    return backend.silu(asarray64(x))


def silu_grad(x):
    """Derivative of silu at x: sigmoid(x) * (1 + x * (1 - sigmoid(x)))."""
    s = sigmoid(x)
    return s * (1.0 + x * (1.0 - s))


def exp(x):
    return backend.exp(asarray64(x))


def log(x):
    return backend.log(asarray64(x))


def log1p(x):
    return backend.log1p(asarray64(x))


def ascending_sum(x):
    """Sum of all elements in ascending flat-index order."""
    flat = asarray64(x).ravel()
    if flat.size == 0:
        return 0.0
    return float(np.add.accumulate(flat)[-1])


def causal_depthwise_conv1d(x, kernel, bias=None):
    """Depthwise causal convolution along the first axis.

    out[t, c] = bias[c] + sum_j kernel[j, c] * x[t - (w-1) + j, c], with
    positions before t=0 treated as zeros. out[t] depends only on x[0..t].
    """
    x = asarray64(x)
    kernel = asarray64(kernel)
    if x.ndim != 2 or kernel.ndim != 2 or kernel.shape[1] != x.shape[1]:
        raise DimensionError(f"conv1d: incompatible shapes {x.shape} vs kernel {kernel.shape}")
    tlen, nchan = x.shape
    width = kernel.shape[0]
    if bias is None:
        out = np.zeros((tlen, nchan), dtype=np.float64)
    else:
        out = np.tile(asarray64(bias), (tlen, 1))
    for j in range(width):
        lag = width - 1 - j
        if lag >= tlen:
            continue
        out[lag:] += kernel[j] * x[: tlen - lag]
    return out


def causal_depthwise_conv1d_backward(x, kernel, dy):
    """Adjoint of causal_depthwise_conv1d; returns (dx, dkernel, dbias)."""
    x = asarray64(x)
    kernel = asarray64(kernel)
    dy = asarray64(dy)
    tlen = x.shape[0]
    width = kernel.shape[0]
    dx = np.zeros_like(x)
    dkernel = np.zeros_like(kernel)
    for j in range(width):
        lag = width - 1 - j
        if lag >= tlen:
            continue
        dkernel[j] = np.sum(dy[lag:] * x[: tlen - lag], axis=0)
        dx[: tlen - lag] += kernel[j] * dy[lag:]
    dbias = np.sum(dy, axis=0)
    return dx, dkernel, dbias


def _feature_square_sum(x):
    """Sum of squares over the last axis, features accumulated ascending."""
    ssq = np.zeros(x.shape[:-1], dtype=np.float64)
    for j in range(x.shape[-1]):
        ssq = ssq + x[..., j] * x[..., j]
    return ssq


def rms_scale_from_ssq(ssq, nfeat, eps):
    """Normalization scale s = 1/sqrt(ssq/nfeat + eps)."""
    return 1.0 / np.sqrt(np.asarray(ssq, dtype=np.float64) / nfeat + eps)


def rmsnorm_forward(x, w, eps=RMS_EPS):
    """RMSNorm over the last axis: y = (w * x) * s, s = 1/sqrt(mean(x^2)+eps).

    Returns (y, s); s is cached for the backward pass. Accepts a single
    vector or a batch of rows (s then has the leading shape).
    """
    x = asarray64(x)
    w = asarray64(w)
    if w.shape != x.shape[-1:]:
        raise DimensionError(f"rmsnorm: weight {w.shape} does not match features {x.shape}")
    s = rms_scale_from_ssq(_feature_square_sum(x), x.shape[-1], eps)
    y = (w * x) * s[..., None]
    if x.ndim == 1:
        return y, float(s)
    return y, s


def rms_backward_from_r(x, w, s, dy, r, nfeat=None):
    """Shared RMSNorm backward finisher given the reduction r = sum p_j x_j.

    Returns (dx, dw_terms) where dw_terms has the shape of x; callers sum
    dw_terms over leading axes for the weight gradient. ``nfeat`` is the
    global feature count when x holds only a feature shard.
    """
    x = asarray64(x)
    s = np.asarray(s, dtype=np.float64)
    r = np.asarray(r, dtype=np.float64)
    if nfeat is None:
        nfeat = x.shape[-1]
    p = w * asarray64(dy)
    coef = (r * (s * s * s)) / nfeat
    dx = s[..., None] * p - coef[..., None] * x
    dw_terms = (dy * x) * s[..., None]
    return dx, dw_terms


def rmsnorm_backward(x, w, s, dy):
    """Backward of rmsnorm_forward. Returns (dx, dw).

    p = w * dy; r = sum_j p_j x_j; dx_i = s p_i - r s^3 x_i / d;
    dw_i = dy_i x_i s (summed over batch rows when x is batched).
    """
    x = asarray64(x)
    p = asarray64(w) * asarray64(dy)
    r = np.zeros(x.shape[:-1], dtype=np.float64)
    for j in range(x.shape[-1]):
        r = r + p[..., j] * x[..., j]
    dx, dw_terms = rms_backward_from_r(x, w, s, dy, r)
    if x.ndim == 1:
        return dx, dw_terms
    return dx, np.sum(dw_terms.reshape(-1, x.shape[-1]), axis=0)


def finite_difference_grad(f, x, eps=1e-5):
    """Central-difference gradient of a scalar function of a tensor."""
    x = asarray64(x).copy()
    grad = np.zeros_like(x)
    flat_x = x.ravel()
    flat_g = grad.ravel()
    for i in range(flat_x.size):
        orig = flat_x[i]
        flat_x[i] = orig + eps
        fplus = float(f(x))
        flat_x[i] = orig - eps
        fminus = float(f(x))
        flat_x[i] = orig
        flat_g[i] = (fplus - fminus) / (2.0 * eps)
    return grad
