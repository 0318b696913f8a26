# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled twins of :mod:`cots._kernels_py` (same names, signatures, results)."""

import numpy as np
cimport numpy as cnp
from libc.math cimport sqrt

cnp.import_array()

cdef double GELU_C = 0.7978845608028654  # sqrt(2 / pi)
cdef double GELU_A = 0.044715


def layer_norm_fwd(const double[:, ::1] x, const double[::1] gain, const double[::1] bias, double eps):
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    y_arr = np.empty((n, d))
    xhat_arr = np.empty((n, d))
    rstd_arr = np.empty(n)
    cdef double[:, ::1] y = y_arr
    cdef double[:, ::1] xhat = xhat_arr
    cdef double[::1] rstd = rstd_arr
    cdef double mu, var, r, c
    with nogil:
        for i in range(n):
            mu = 0.0
            for j in range(d):
                mu += x[i, j]
            mu /= d
            var = 0.0
            for j in range(d):
                c = x[i, j] - mu
                var += c * c
            var /= d
            r = 1.0 / sqrt(var + eps)
            rstd[i] = r
            for j in range(d):
                c = (x[i, j] - mu) * r
                xhat[i, j] = c
                y[i, j] = c * gain[j] + bias[j]
    return y_arr, xhat_arr, rstd_arr


def layer_norm_bwd(const double[:, ::1] g, const double[:, ::1] xhat, const double[::1] rstd, const double[::1] gain):
    cdef Py_ssize_t n = g.shape[0], d = g.shape[1], i, j
    dx_arr = np.empty((n, d))
    dgain_arr = np.zeros(d)
    dbias_arr = np.zeros(d)
    cdef double[:, ::1] dx = dx_arr
    cdef double[::1] dgain = dgain_arr
    cdef double[::1] dbias = dbias_arr
    cdef double m1, m2, dxh
    with nogil:
        for i in range(n):
            m1 = 0.0
            m2 = 0.0
            for j in range(d):
                dxh = g[i, j] * gain[j]
                m1 += dxh
                m2 += dxh * xhat[i, j]
                dgain[j] += g[i, j] * xhat[i, j]
                dbias[j] += g[i, j]
            m1 /= d
            m2 /= d
            for j in range(d):
                dx[i, j] = rstd[i] * (g[i, j] * gain[j] - m1 - xhat[i, j] * m2)
    return dx_arr, dgain_arr, dbias_arr


def gelu_fwd(const double[::1] x):
    """Returns ``(y, t)`` with ``t`` the tanh term, reused by :func:`gelu_bwd`.

    tanh itself goes through numpy: its SIMD tanh is several times faster than
    libm's scalar one.
    """
    cdef Py_ssize_t n = x.shape[0], i
    t_arr = np.empty(n)
    cdef double[::1] t = t_arr
    cdef double v
    with nogil:
        for i in range(n):
            v = x[i]
            t[i] = GELU_C * (v + GELU_A * v * v * v)
    np.tanh(t_arr, out=t_arr)
    out_arr = np.empty(n)
    cdef double[::1] out = out_arr
    with nogil:
        for i in range(n):
            out[i] = 0.5 * x[i] * (1.0 + t[i])
    return out_arr, t_arr


def gelu_bwd(const double[::1] x, const double[::1] t, const double[::1] g):
    cdef Py_ssize_t n = x.shape[0], i
    out_arr = np.empty(n)
    cdef double[::1] out = out_arr
    cdef double v, ti
    with nogil:
        for i in range(n):
            v = x[i]
            ti = t[i]
            out[i] = g[i] * (0.5 * (1.0 + ti) + 0.5 * v * (1.0 - ti * ti) * GELU_C * (1.0 + 3.0 * GELU_A * v * v))
    return out_arr


def softmax_fwd(const double[:, ::1] x):
    """Row softmax; the exponentials go through numpy's vectorized exp."""
    cdef Py_ssize_t n = x.shape[0], d = x.shape[1], i, j
    y_arr = np.empty((n, d))
    cdef double[:, ::1] y = y_arr
    cdef double m, s
    with nogil:
        for i in range(n):
            m = x[i, 0]
            for j in range(1, d):
                if x[i, j] > m:
                    m = x[i, j]
            for j in range(d):
                y[i, j] = x[i, j] - m
    np.exp(y_arr, out=y_arr)
    with nogil:
        for i in range(n):
            s = 0.0
            for j in range(d):
                s += y[i, j]
            s = 1.0 / s
            for j in range(d):
                y[i, j] *= s
    return y_arr


def softmax_bwd(const double[:, ::1] y, const double[:, ::1] g):
    cdef Py_ssize_t n = y.shape[0], d = y.shape[1], i, j
    dx_arr = np.empty((n, d))
    cdef double[:, ::1] dx = dx_arr
    cdef double s
    with nogil:
        for i in range(n):
            s = 0.0
            for j in range(d):
                s += g[i, j] * y[i, j]
            for j in range(d):
                dx[i, j] = y[i, j] * (g[i, j] - s)
    return dx_arr


def rank_counts(const double[:, ::1] scores, const cnp.int64_t[::1] true_cols):
    cdef Py_ssize_t n = scores.shape[0], m = scores.shape[1], i, j
    out_arr = np.zeros(n, dtype=np.int64)
    cdef cnp.int64_t[::1] out = out_arr
    cdef double target
    cdef cnp.int64_t c
    for i in range(n):
        if true_cols[i] < 0 or true_cols[i] >= m:
            raise IndexError("true column out of range")
    with nogil:
        for i in range(n):
            target = scores[i, true_cols[i]]
            c = 0
            for j in range(m):
                if scores[i, j] > target:
                    c += 1
            out[i] = c
    return out_arr


def pair_fusion_scores(const double[:, ::1] q, const double[:, ::1] c,
                       const double[:, ::1] w1, const double[::1] b1, const double[::1] w2):
    """Per query: fill the ``[nc, hidden]`` pre-activations, tanh them in one numpy call, contract with ``w2``."""
    cdef Py_ssize_t nq = q.shape[0], nc = c.shape[0], d = q.shape[1], hdim = w1.shape[1]
    cdef Py_ssize_t i, j, k, h
    out_arr = np.empty((nq, nc))
    cdef double[:, ::1] out = out_arr
    hidden_arr = np.empty((nc, hdim))
    cdef double[:, ::1] hid = hidden_arr
    cdef double z, s
    cdef double* row
    cdef const double* wrow
    for i in range(nq):
        with nogil:
            for j in range(nc):
                row = &hid[j, 0]
                for h in range(hdim):
                    row[h] = b1[h]
                for k in range(d):
                    z = q[i, k] * c[j, k]
                    wrow = &w1[k, 0]
                    for h in range(hdim):
                        row[h] += z * wrow[h]
        np.tanh(hidden_arr, out=hidden_arr)
        with nogil:
            for j in range(nc):
                s = 0.0
                for h in range(hdim):
                    s += hid[j, h] * w2[h]
                out[i, j] = s
    return out_arr
