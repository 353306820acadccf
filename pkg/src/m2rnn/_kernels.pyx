# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled kernels: deterministic matmul, libm elementwise maps, and the
matrix-state recurrence scans.

These must stay in lockstep with ``_pykernels.py``. The shared contracts:

* matmul accumulates over the inner index in ascending order, one rounded
  multiply and one rounded add per term;
* the scans walk heads, then batch, then time; accumulation into the shared
  query/key/transition gradients follows that loop order;
* transcendentals come from libm (the NumPy backend routes through
  ``math.*`` for the same reason).

Compiled with -ffp-contract=off so no FMA contraction breaks bit-equality
with the fallback.
"""

from libc.math cimport exp as c_exp
from libc.math cimport log as c_log
from libc.math cimport log1p as c_log1p
from libc.math cimport sqrt as c_sqrt
from libc.math cimport tanh as c_tanh

import numpy as np

cimport numpy as cnp

cnp.import_array()

NAME = "compiled"


def matmul(double[:, ::1] a, double[:, ::1] b):
    cdef Py_ssize_t m = a.shape[0]
    cdef Py_ssize_t kk = a.shape[1]
    cdef Py_ssize_t n = b.shape[1]
    out_arr = np.zeros((m, n), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, k, j
    cdef double aik
    for i in range(m):
        for k in range(kk):
            aik = a[i, k]
            for j in range(n):
                out[i, j] = out[i, j] + aik * b[k, j]
    return out_arr


def tanh_map(double[::1] x, double[::1] out):
    cdef Py_ssize_t i
    for i in range(x.shape[0]):
        out[i] = c_tanh(x[i])


cdef inline double _sigmoid1(double v) nogil:
    cdef double e
    if v >= 0.0:
        return 1.0 / (1.0 + c_exp(-v))
    e = c_exp(v)
    return e / (1.0 + e)


def sigmoid_map(double[::1] x, double[::1] out):
    cdef Py_ssize_t i
    for i in range(x.shape[0]):
        out[i] = _sigmoid1(x[i])


def silu_map(double[::1] x, double[::1] out):
    cdef Py_ssize_t i
    for i in range(x.shape[0]):
        out[i] = x[i] * _sigmoid1(x[i])


def exp_map(double[::1] x, double[::1] out):
    cdef Py_ssize_t i
    for i in range(x.shape[0]):
        out[i] = c_exp(x[i])


def log_map(double[::1] x, double[::1] out):
    cdef Py_ssize_t i
    for i in range(x.shape[0]):
        out[i] = c_log(x[i])


def log1p_map(double[::1] x, double[::1] out):
    cdef Py_ssize_t i
    for i in range(x.shape[0]):
        out[i] = c_log1p(x[i])


def scan_forward(double[:, :, ::1] Q, double[:, :, ::1] K,
                 double[:, :, :, ::1] V, double[:, :, ::1] F,
                 double[:, :, :, ::1] H0, double[:, :, ::1] W):
    """Gated matrix-state recurrence; returns (Y, H_T), no per-step cache."""
    cdef Py_ssize_t B = Q.shape[0]
    cdef Py_ssize_t T = Q.shape[1]
    cdef Py_ssize_t KD = Q.shape[2]
    cdef Py_ssize_t N = V.shape[2]
    cdef Py_ssize_t VD = V.shape[3]

    Y_arr = np.zeros((B, T, N, VD), dtype=np.float64)
    HT_arr = np.zeros((B, N, KD, VD), dtype=np.float64)
    H_arr = np.zeros((KD, VD), dtype=np.float64)
    X_arr = np.zeros((KD, VD), dtype=np.float64)

    cdef double[:, :, :, ::1] Y = Y_arr
    cdef double[:, :, :, ::1] HT = HT_arr
    cdef double[:, ::1] H = H_arr
    cdef double[:, ::1] X = X_arr
    cdef Py_ssize_t n, b, t, i, j, l
    cdef double f, omf, hil, ki, qi, z

    for n in range(N):
        for b in range(B):
            for i in range(KD):
                for j in range(VD):
                    H[i, j] = H0[b, n, i, j]
            for t in range(T):
                for i in range(KD):
                    for j in range(VD):
                        X[i, j] = 0.0
                    for l in range(VD):
                        hil = H[i, l]
                        for j in range(VD):
                            X[i, j] = X[i, j] + hil * W[n, l, j]
                f = F[b, t, n]
                omf = 1.0 - f
                for i in range(KD):
                    ki = K[b, t, i]
                    for j in range(VD):
                        z = c_tanh(X[i, j] + ki * V[b, t, n, j])
                        H[i, j] = f * H[i, j] + omf * z
                for i in range(KD):
                    qi = Q[b, t, i]
                    for j in range(VD):
                        Y[b, t, n, j] = Y[b, t, n, j] + H[i, j] * qi
            for i in range(KD):
                for j in range(VD):
                    HT[b, n, i, j] = H[i, j]
    return Y_arr, HT_arr


def scan_forward_cached(double[:, :, ::1] Q, double[:, :, ::1] K,
                        double[:, :, :, ::1] V, double[:, :, ::1] F,
                        double[:, :, :, ::1] H0, double[:, :, ::1] W):
    """Recurrence recomputation pass: stores every post-update state."""
    cdef Py_ssize_t B = K.shape[0]
    cdef Py_ssize_t T = K.shape[1]
    cdef Py_ssize_t KD = K.shape[2]
    cdef Py_ssize_t N = V.shape[2]
    cdef Py_ssize_t VD = V.shape[3]

    Hfull_arr = np.zeros((B, T, N, KD, VD), dtype=np.float64)
    H_arr = np.zeros((KD, VD), dtype=np.float64)
    X_arr = np.zeros((KD, VD), dtype=np.float64)

    cdef double[:, :, :, :, ::1] Hfull = Hfull_arr
    cdef double[:, ::1] H = H_arr
    cdef double[:, ::1] X = X_arr
    cdef Py_ssize_t n, b, t, i, j, l
    cdef double f, omf, hil, ki, z

    for n in range(N):
        for b in range(B):
            for i in range(KD):
                for j in range(VD):
                    H[i, j] = H0[b, n, i, j]
            for t in range(T):
                for i in range(KD):
                    for j in range(VD):
                        X[i, j] = 0.0
                    for l in range(VD):
                        hil = H[i, l]
                        for j in range(VD):
                            X[i, j] = X[i, j] + hil * W[n, l, j]
                f = F[b, t, n]
                omf = 1.0 - f
                for i in range(KD):
                    ki = K[b, t, i]
                    for j in range(VD):
                        z = c_tanh(X[i, j] + ki * V[b, t, n, j])
                        H[i, j] = f * H[i, j] + omf * z
                        Hfull[b, t, n, i, j] = H[i, j]
    return Hfull_arr


def scan_backward(double[:, :, ::1] Q, double[:, :, ::1] K,
                  double[:, :, :, ::1] V, double[:, :, ::1] F,
                  double[:, :, :, ::1] H0, double[:, :, ::1] W,
                  double[:, :, :, :, ::1] Hfull, double[:, :, :, ::1] dY,
                  double clip):
    """Reverse sweep of the recurrence. ``clip <= 0`` disables the per-step
    norm clip of the propagated state gradient."""
    cdef Py_ssize_t B = Q.shape[0]
    cdef Py_ssize_t T = Q.shape[1]
    cdef Py_ssize_t KD = Q.shape[2]
    cdef Py_ssize_t N = V.shape[2]
    cdef Py_ssize_t VD = V.shape[3]

    dQ_arr = np.zeros((B, T, KD), dtype=np.float64)
    dK_arr = np.zeros((B, T, KD), dtype=np.float64)
    dV_arr = np.zeros((B, T, N, VD), dtype=np.float64)
    dW_arr = np.zeros((N, VD, VD), dtype=np.float64)
    dF_arr = np.zeros((B, T, N), dtype=np.float64)
    dH0_arr = np.zeros((B, N, KD, VD), dtype=np.float64)

    G_arr = np.zeros((KD, VD), dtype=np.float64)
    P_arr = np.zeros((KD, VD), dtype=np.float64)
    Z_arr = np.zeros((KD, VD), dtype=np.float64)
    DX_arr = np.zeros((KD, VD), dtype=np.float64)
    X_arr = np.zeros((KD, VD), dtype=np.float64)

    cdef double[:, :, ::1] dQ = dQ_arr
    cdef double[:, :, ::1] dK = dK_arr
    cdef double[:, :, :, ::1] dV = dV_arr
    cdef double[:, :, ::1] dW = dW_arr
    cdef double[:, :, ::1] dF = dF_arr
    cdef double[:, :, :, ::1] dH0 = dH0_arr
    cdef double[:, ::1] G = G_arr
    cdef double[:, ::1] P = P_arr
    cdef double[:, ::1] Z = Z_arr
    cdef double[:, ::1] DX = DX_arr
    cdef double[:, ::1] X = X_arr

    cdef Py_ssize_t n, b, t, i, j, l
    cdef double f, omf, ki, qi, z, s, df, norm, scale, hil

    for n in range(N):
        for b in range(B):
            for i in range(KD):
                for j in range(VD):
                    P[i, j] = 0.0
            for t in range(T - 1, -1, -1):
                # Hprev points at H0 for t == 0 else the cached state at t-1.
                # Recompute Z_t bitwise as in the forward.
                for i in range(KD):
                    for j in range(VD):
                        X[i, j] = 0.0
                    if t == 0:
                        for l in range(VD):
                            hil = H0[b, n, i, l]
                            for j in range(VD):
                                X[i, j] = X[i, j] + hil * W[n, l, j]
                    else:
                        for l in range(VD):
                            hil = Hfull[b, t - 1, n, i, l]
                            for j in range(VD):
                                X[i, j] = X[i, j] + hil * W[n, l, j]
                f = F[b, t, n]
                omf = 1.0 - f
                for i in range(KD):
                    ki = K[b, t, i]
                    for j in range(VD):
                        Z[i, j] = c_tanh(X[i, j] + ki * V[b, t, n, j])

                # dq_t = H_t dy_t, accumulated over heads in ascending order
                for i in range(KD):
                    s = 0.0
                    for j in range(VD):
                        s = s + Hfull[b, t, n, i, j] * dY[b, t, n, j]
                    dQ[b, t, i] = dQ[b, t, i] + s

                # Total gradient reaching H_t: readout term plus propagated P
                for i in range(KD):
                    qi = Q[b, t, i]
                    for j in range(VD):
                        G[i, j] = qi * dY[b, t, n, j] + P[i, j]

                # df_t = sum of G  (H_{t-1} - Z_t), ascending (i, j)
                df = 0.0
                for i in range(KD):
                    for j in range(VD):
                        if t == 0:
                            df = df + G[i, j] * (H0[b, n, i, j] - Z[i, j])
                        else:
                            df = df + G[i, j] * (Hfull[b, t - 1, n, i, j] - Z[i, j])
                dF[b, t, n] = df

                # Backprop through tanh
                for i in range(KD):
                    for j in range(VD):
                        z = Z[i, j]
                        DX[i, j] = (G[i, j] * omf) * (1.0 - z * z)

                # dW += Hprev^T dX   (inner sum over rows, ascending)
                for l in range(VD):
                    for j in range(VD):
                        s = 0.0
                        if t == 0:
                            for i in range(KD):
                                s = s + H0[b, n, i, l] * DX[i, j]
                        else:
                            for i in range(KD):
                                s = s + Hfull[b, t - 1, n, i, l] * DX[i, j]
                        dW[n, l, j] = dW[n, l, j] + s

                # dk_t = dX v_t (shared across heads); dv_t = dX^T k_t
                for i in range(KD):
                    s = 0.0
                    for j in range(VD):
                        s = s + DX[i, j] * V[b, t, n, j]
                    dK[b, t, i] = dK[b, t, i] + s
                for j in range(VD):
                    s = 0.0
                    for i in range(KD):
                        s = s + DX[i, j] * K[b, t, i]
                    dV[b, t, n, j] = s

                # P_{t} -> H_{t-1}: gate path plus transition path
                for i in range(KD):
                    for l in range(VD):
                        s = 0.0
                        for j in range(VD):
                            s = s + DX[i, j] * W[n, l, j]
                        P[i, l] = f * G[i, l] + s

                if clip > 0.0:
                    s = 0.0
                    for i in range(KD):
                        for j in range(VD):
                            s = s + P[i, j] * P[i, j]
                    norm = c_sqrt(s)
                    if norm > clip:
                        scale = clip / norm
                        for i in range(KD):
                            for j in range(VD):
                                P[i, j] = P[i, j] * scale

            for i in range(KD):
                for j in range(VD):
                    dH0[b, n, i, j] = P[i, j]

    return dQ_arr, dK_arr, dV_arr, dW_arr, dF_arr, dH0_arr
