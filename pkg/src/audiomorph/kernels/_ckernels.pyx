# cython: boundscheck=False, wraparound=False, cdivision=True, language_level=3
"""Compiled hot kernels: fused LSTM gate math and the Adam update.

Contracts mirror ``_pure.py`` exactly; dtype follows the inputs (float32 or
float64).  All arrays must be C-contiguous, which the dispatch wrappers in
``kernels/__init__.py`` guarantee.
"""

import numpy as np

from libc.math cimport exp, sqrt, tanh

ctypedef fused real:
    float
    double


cdef inline real _sigmoid(real x) noexcept nogil:
    cdef real e
    if x >= 0:
        return <real>1.0 / (<real>1.0 + <real>exp(-x))
    e = <real>exp(x)
    return e / (<real>1.0 + e)


def lstm_gates_forward(real[:, ::1] pre, real[:, ::1] c_prev):
    """Fused LSTM gate nonlinearities; see _pure.lstm_gates_forward."""
    cdef Py_ssize_t n = pre.shape[0]
    cdef Py_ssize_t nh = c_prev.shape[1]
    dtype = np.float32 if real is float else np.float64
    h_arr = np.empty((n, nh), dtype=dtype)
    c_arr = np.empty((n, nh), dtype=dtype)
    g_arr = np.empty((n, 4 * nh), dtype=dtype)
    cdef real[:, ::1] h = h_arr
    cdef real[:, ::1] c = c_arr
    cdef real[:, ::1] gates = g_arr
    cdef Py_ssize_t r, k
    cdef real gi, gf, gg, go, cc
    with nogil:
        for r in range(n):
            for k in range(nh):
                gi = _sigmoid(pre[r, k])
                gf = _sigmoid(pre[r, nh + k])
                gg = <real>tanh(pre[r, 2 * nh + k])
                go = _sigmoid(pre[r, 3 * nh + k])
                cc = gf * c_prev[r, k] + gi * gg
                gates[r, k] = gi
                gates[r, nh + k] = gf
                gates[r, 2 * nh + k] = gg
                gates[r, 3 * nh + k] = go
                c[r, k] = cc
                h[r, k] = go * <real>tanh(cc)
    return h_arr, c_arr, g_arr


def lstm_gates_backward(real[:, ::1] gates, real[:, ::1] c,
                        real[:, ::1] c_prev, real[:, ::1] dh,
                        real[:, ::1] dc):
    """Backward of lstm_gates_forward; see _pure.lstm_gates_backward."""
    cdef Py_ssize_t n = gates.shape[0]
    cdef Py_ssize_t nh = c_prev.shape[1]
    dtype = np.float32 if real is float else np.float64
    dpre_arr = np.empty((n, 4 * nh), dtype=dtype)
    dcp_arr = np.empty((n, nh), dtype=dtype)
    cdef real[:, ::1] dpre = dpre_arr
    cdef real[:, ::1] dc_prev = dcp_arr
    cdef Py_ssize_t r, k
    cdef real gi, gf, gg, go, tc, dct
    with nogil:
        for r in range(n):
            for k in range(nh):
                gi = gates[r, k]
                gf = gates[r, nh + k]
                gg = gates[r, 2 * nh + k]
                go = gates[r, 3 * nh + k]
                tc = <real>tanh(c[r, k])
                dct = dc[r, k] + dh[r, k] * go * (<real>1.0 - tc * tc)
                dpre[r, k] = dct * gg * gi * (<real>1.0 - gi)
                dpre[r, nh + k] = dct * c_prev[r, k] * gf * (<real>1.0 - gf)
                dpre[r, 2 * nh + k] = dct * gi * (<real>1.0 - gg * gg)
                dpre[r, 3 * nh + k] = dh[r, k] * tc * go * (<real>1.0 - go)
                dc_prev[r, k] = dct * gf
    return dpre_arr, dcp_arr


def adam_update(real[::1] param, real[::1] grad, real[::1] m, real[::1] v,
                double lr, double beta1, double beta2, double eps, int step):
    """In-place bias-corrected Adam step; see _pure.adam_update."""
    cdef Py_ssize_t n = param.shape[0]
    cdef real b1 = <real>beta1
    cdef real b2 = <real>beta2
    cdef real omb1 = <real>1.0 - b1
    cdef real omb2 = <real>1.0 - b2
    cdef real c1 = <real>(1.0 - beta1 ** step)
    cdef real c2 = <real>(1.0 - beta2 ** step)
    cdef real lr_r = <real>lr
    cdef real eps_r = <real>eps
    cdef Py_ssize_t k
    with nogil:
        for k in range(n):
            m[k] = b1 * m[k] + omb1 * grad[k]
            v[k] = b2 * v[k] + omb2 * grad[k] * grad[k]
            param[k] -= lr_r * (m[k] / c1) / (<real>sqrt(v[k] / c2) + eps_r)
