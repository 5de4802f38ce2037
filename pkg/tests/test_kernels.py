"""Backend equivalence and contract tests for the fused kernels."""

import numpy as np
import pytest

from audiomorph import kernels
from audiomorph.kernels import _pure

IMPLS = {"pure": _pure, "dispatch": kernels}
try:
    from audiomorph.kernels import _ckernels

    IMPLS["cython"] = _ckernels
except ImportError:
    _ckernels = None


def _gate_inputs(rng, batch, hidden, dtype):
    pre = rng.standard_normal((batch, 4 * hidden)).astype(dtype)
    c_prev = rng.standard_normal((batch, hidden)).astype(dtype)
    return pre, c_prev


@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_forward_matches_reference_formulas(dtype):
    rng = np.random.default_rng(11)
    pre, c_prev = _gate_inputs(rng, 5, 7, dtype)
    h, c, gates = _pure.lstm_gates_forward(pre, c_prev)

    def sigmoid(x):
        return 1.0 / (1.0 + np.exp(-x.astype(np.float64)))

    hdim = 7
    i = sigmoid(pre[:, :hdim])
    f = sigmoid(pre[:, hdim : 2 * hdim])
    g = np.tanh(pre[:, 2 * hdim : 3 * hdim].astype(np.float64))
    o = sigmoid(pre[:, 3 * hdim :])
    c_ref = f * c_prev + i * g
    h_ref = o * np.tanh(c_ref)
    tol = 1e-6 if dtype == np.float32 else 1e-12
    np.testing.assert_allclose(c, c_ref, atol=tol)
    np.testing.assert_allclose(h, h_ref, atol=tol)
    np.testing.assert_allclose(gates, np.concatenate([i, f, g, o], axis=1),
                               atol=tol)


@pytest.mark.skipif(_ckernels is None, reason="compiled extension not built")
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_cython_matches_pure(dtype):
    rng = np.random.default_rng(0)
    for batch, hidden in [(1, 1), (3, 5), (16, 128)]:
        pre, c_prev = _gate_inputs(rng, batch, hidden, dtype)
        out_p = _pure.lstm_gates_forward(pre, c_prev)
        out_c = _ckernels.lstm_gates_forward(pre, c_prev)
        for a, b in zip(out_p, out_c):
            np.testing.assert_allclose(a, b, atol=1e-6, rtol=1e-6)

        h, c, gates = out_p
        dh = rng.standard_normal(h.shape).astype(dtype)
        dc = rng.standard_normal(c.shape).astype(dtype)
        back_p = _pure.lstm_gates_backward(gates, c, c_prev, dh, dc)
        back_c = _ckernels.lstm_gates_backward(gates, c, c_prev, dh, dc)
        for a, b in zip(back_p, back_c):
            np.testing.assert_allclose(a, b, atol=1e-6, rtol=1e-6)


@pytest.mark.skipif(_ckernels is None, reason="compiled extension not built")
@pytest.mark.parametrize("dtype", [np.float32, np.float64])
def test_adam_cython_matches_pure(dtype):
    rng = np.random.default_rng(5)
    p1 = rng.standard_normal(257).astype(dtype)
    p2 = p1.copy()
    m1 = np.zeros_like(p1)
    v1 = np.zeros_like(p1)
    m2 = m1.copy()
    v2 = v1.copy()
    for step in range(1, 6):
        grad = rng.standard_normal(257).astype(dtype)
        _pure.adam_update(p1, grad, m1, v1, 1e-3, 0.9, 0.999, 1e-8, step)
        _ckernels.adam_update(p2, grad, m2, v2, 1e-3, 0.9, 0.999, 1e-8, step)
    np.testing.assert_allclose(p1, p2, atol=1e-7, rtol=1e-6)
    np.testing.assert_allclose(m1, m2, atol=1e-7, rtol=1e-6)
    np.testing.assert_allclose(v1, v2, atol=1e-7, rtol=1e-6)


def test_adam_first_step_moves_by_lr_times_sign():
    # with zero moments, one update moves each weight by ~lr * sign(grad)
    p = np.zeros(4, dtype=np.float64)
    grad = np.array([1.0, -2.0, 0.5, -0.1])
    m = np.zeros_like(p)
    v = np.zeros_like(p)
    kernels.adam_update(p, grad, m, v, 0.01, 0.9, 0.999, 1e-12, 1)
    np.testing.assert_allclose(p, -0.01 * np.sign(grad), rtol=1e-6)


def test_dispatch_accepts_noncontiguous():
    rng = np.random.default_rng(2)
    wide = rng.standard_normal((4, 64)).astype(np.float32)
    pre = wide[:, ::2]  # strided view, 32 columns = 4 * hidden 8
    c_prev = rng.standard_normal((4, 8)).astype(np.float32)
    h, c, gates = kernels.lstm_gates_forward(pre, c_prev)
    h2, c2, _ = _pure.lstm_gates_forward(np.ascontiguousarray(pre), c_prev)
    np.testing.assert_allclose(h, h2, atol=1e-6)
    np.testing.assert_allclose(c, c2, atol=1e-6)


def test_backend_name_reports_selection():
    assert kernels.backend_name() in ("numpy", "cython",
                                      "auto(numpy-gates,cython-adam)")


def test_backward_closes_the_loop_with_forward():
    """Chain rule sanity: finite differences through the fused op."""
    rng = np.random.default_rng(9)
    pre, c_prev = _gate_inputs(rng, 2, 3, np.float64)
    dh = rng.standard_normal((2, 3))
    dc = np.zeros((2, 3))

    h, c, gates = _pure.lstm_gates_forward(pre, c_prev)
    dpre, dc_prev = _pure.lstm_gates_backward(gates, c, c_prev, dh, dc)

    eps = 1e-6
    for arr, grad in ((pre, dpre), (c_prev, dc_prev)):
        flat = arr.ravel()
        gflat = grad.ravel()
        for idx in range(0, flat.size, 3):
            orig = flat[idx]
            flat[idx] = orig + eps
            hp, _, _ = _pure.lstm_gates_forward(pre, c_prev)
            flat[idx] = orig - eps
            hm, _, _ = _pure.lstm_gates_forward(pre, c_prev)
            flat[idx] = orig
            fd = float(np.sum((hp - hm) * dh) / (2 * eps))
            assert abs(fd - gflat[idx]) < 1e-7 + 1e-5 * abs(fd)
