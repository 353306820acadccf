"""Pure NumPy fallback for the compiled kernels.

Every function here mirrors its twin in ``_kernels.pyx`` operation for
operation: same summation order (ascending inner index), same loop nesting
over heads/batch/time, and libm transcendentals via ``math.*`` (NumPy's own
SIMD ufuncs are not bit-identical to libm on all hosts). The two backends
therefore produce bit-identical results; ``tests/test_backends.py`` asserts
this.
"""

import math

import numpy as np

NAME = "python"

_tanh_map = np.frompyfunc(math.tanh, 1, 1)


def _sigmoid1(v):
    if v >= 0.0:
        return 1.0 / (1.0 + math.exp(-v))
    e = math.exp(v)
    return e / (1.0 + e)


def _silu1(v):
    return v * _sigmoid1(v)


def _exp1(v):
    try:
        return math.exp(v)
    except OverflowError:
        return math.inf


def _log1(v):
    if v > 0.0:
        return math.log(v)
    if v == 0.0:
        return -math.inf
    return math.nan


def _log1p1(v):
    if v > -1.0:
        return math.log1p(v)
    if v == -1.0:
        return -math.inf
    return math.nan


_sigmoid_map = np.frompyfunc(_sigmoid1, 1, 1)
_silu_map = np.frompyfunc(_silu1, 1, 1)
_exp_map = np.frompyfunc(_exp1, 1, 1)
_log_map = np.frompyfunc(_log1, 1, 1)
_log1p_map = np.frompyfunc(_log1p1, 1, 1)


def matmul(a, b):
    m, kk = a.shape
    n = b.shape[1]
    out = np.zeros((m, n), dtype=np.float64)
    for k in range(kk):
        out += a[:, k, None] * b[k, None, :]
    return out


def tanh_map(x, out):
    out[:] = _tanh_map(x)


def sigmoid_map(x, out):
    out[:] = _sigmoid_map(x)


def silu_map(x, out):
    out[:] = _silu_map(x)


def exp_map(x, out):
    out[:] = _exp_map(x)


def log_map(x, out):
    out[:] = _log_map(x)


def log1p_map(x, out):
    out[:] = _log1p_map(x)


def _tanh2d(x):
    return _tanh_map(x).astype(np.float64)


def _asc_sum(x):
    """Sum of the flattened array in ascending index order."""
    flat = x.ravel()
    if flat.size == 0:
        return 0.0
    return float(np.add.accumulate(flat)[-1])


def scan_forward(Q, K, V, F, H0, W):
    B, T, KD = Q.shape
    N, VD = V.shape[2], V.shape[3]
    Y = np.zeros((B, T, N, VD), dtype=np.float64)
    HT = np.zeros((B, N, KD, VD), dtype=np.float64)
    for n in range(N):
        Wn = W[n]
        for b in range(B):
            H = H0[b, n].copy()
            for t in range(T):
                X = matmul(H, Wn) + np.multiply.outer(K[b, t], V[b, t, n])
                Z = _tanh2d(X)
                f = F[b, t, n]
                H = f * H + (1.0 - f) * Z
                Y[b, t, n] = matmul(H.T, Q[b, t][:, None])[:, 0]
            HT[b, n] = H
    return Y, HT


def scan_forward_cached(Q, K, V, F, H0, W):
    B, T, KD = K.shape
    N, VD = V.shape[2], V.shape[3]
    Hfull = np.zeros((B, T, N, KD, VD), dtype=np.float64)
    for n in range(N):
        Wn = W[n]
        for b in range(B):
            H = H0[b, n].copy()
            for t in range(T):
                X = matmul(H, Wn) + np.multiply.outer(K[b, t], V[b, t, n])
                Z = _tanh2d(X)
                f = F[b, t, n]
                H = f * H + (1.0 - f) * Z
                Hfull[b, t, n] = H
    return Hfull


def scan_backward(Q, K, V, F, H0, W, Hfull, dY, clip):
    B, T, KD = Q.shape
    N, VD = V.shape[2], V.shape[3]
    dQ = np.zeros((B, T, KD), dtype=np.float64)
    dK = np.zeros((B, T, KD), dtype=np.float64)
    dV = np.zeros((B, T, N, VD), dtype=np.float64)
    dW = np.zeros((N, VD, VD), dtype=np.float64)
    dF = np.zeros((B, T, N), dtype=np.float64)
    dH0 = np.zeros((B, N, KD, VD), dtype=np.float64)
    for n in range(N):
        Wn = W[n]
        for b in range(B):
            P = np.zeros((KD, VD), dtype=np.float64)
            for t in range(T - 1, -1, -1):
                Hprev = H0[b, n] if t == 0 else Hfull[b, t - 1, n]
                X = matmul(Hprev, Wn) + np.multiply.outer(K[b, t], V[b, t, n])
                Z = _tanh2d(X)
                f = F[b, t, n]
                omf = 1.0 - f

                Ht = Hfull[b, t, n]
                dy = dY[b, t, n]
                dQ[b, t] += matmul(Ht, dy[:, None])[:, 0]

                G = np.multiply.outer(Q[b, t], dy) + P
                dF[b, t, n] = _asc_sum(G * (Hprev - Z))
                DX = (G * omf) * (1.0 - Z * Z)

                dW[n] += matmul(Hprev.T, DX)
                dK[b, t] += matmul(DX, V[b, t, n][:, None])[:, 0]
                dV[b, t, n] = matmul(DX.T, K[b, t][:, None])[:, 0]

                P = f * G + matmul(DX, Wn.T)
                if clip > 0.0:
                    norm = math.sqrt(_asc_sum(P * P))
                    if norm > clip:
                        P = P * (clip / norm)
            dH0[b, n] = P
    return dQ, dK, dV, dW, dF, dH0
