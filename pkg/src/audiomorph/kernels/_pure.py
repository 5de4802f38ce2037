"""Numpy reference implementations of the hot kernels.

Same contracts as the compiled backend in ``_ckernels.pyx``; used as the
fallback when the extension is not built and as the oracle in the
backend-equivalence tests.  Gate layout along the last axis is
``[input | forget | cell | output]``.
"""

import numpy as np
from scipy.special import expit


def lstm_gates_forward(pre, c_prev):
    """Fused LSTM gate nonlinearities.

    pre:    (N, 4H) gate preactivations.
    c_prev: (N, H) previous cell state.
    Returns (h, c, gates) where gates holds the activated [i f g o] blocks,
    kept for the backward pass.
    """
    n_hidden = c_prev.shape[-1]
    gates = np.empty_like(pre)
    gates[..., : 2 * n_hidden] = expit(pre[..., : 2 * n_hidden])
    gates[..., 2 * n_hidden : 3 * n_hidden] = np.tanh(
        pre[..., 2 * n_hidden : 3 * n_hidden]
    )
    gates[..., 3 * n_hidden :] = expit(pre[..., 3 * n_hidden :])
    i = gates[..., :n_hidden]
    f = gates[..., n_hidden : 2 * n_hidden]
    g = gates[..., 2 * n_hidden : 3 * n_hidden]
    o = gates[..., 3 * n_hidden :]
    c = f * c_prev + i * g
    h = o * np.tanh(c)
    return h, c, gates


def lstm_gates_backward(gates, c, c_prev, dh, dc):
    """Backward of :func:`lstm_gates_forward`.

    dh, dc are the gradients flowing into h and c.  Returns
    (dpre, dc_prev) with dpre shaped like the preactivations.
    """
    n_hidden = c_prev.shape[-1]
    i = gates[..., :n_hidden]
    f = gates[..., n_hidden : 2 * n_hidden]
    g = gates[..., 2 * n_hidden : 3 * n_hidden]
    o = gates[..., 3 * n_hidden :]
    tc = np.tanh(c)
    dc_total = dc + dh * o * (1.0 - tc * tc)
    dpre = np.empty_like(gates)
    dpre[..., :n_hidden] = dc_total * g * i * (1.0 - i)
    dpre[..., n_hidden : 2 * n_hidden] = dc_total * c_prev * f * (1.0 - f)
    dpre[..., 2 * n_hidden : 3 * n_hidden] = dc_total * i * (1.0 - g * g)
    dpre[..., 3 * n_hidden :] = dh * tc * o * (1.0 - o)
    dc_prev = dc_total * f
    return dpre, dc_prev


def adam_update(param, grad, m, v, lr, beta1, beta2, eps, step):
    """One bias-corrected Adam update, in place on param/m/v.

    step is the 1-based step count after incrementing.
    """
    dtype = param.dtype.type
    one = dtype(1.0)
    b1 = dtype(beta1)
    b2 = dtype(beta2)
    m *= b1
    m += (one - b1) * grad
    v *= b2
    v += (one - b2) * grad * grad
    correction1 = dtype(1.0 - beta1**step)
    correction2 = dtype(1.0 - beta2**step)
    m_hat = m / correction1
    v_hat = v / correction2
    param -= dtype(lr) * m_hat / (np.sqrt(v_hat) + dtype(eps))
