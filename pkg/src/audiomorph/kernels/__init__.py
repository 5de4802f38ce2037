"""Hot-kernel backend selection.

Two implementations ship: a compiled Cython extension and the pure-numpy
module ``_pure``.  Benchmarks (benchmarks/bench_kernels.py) show the split
winner: the fused single-pass Adam update beats numpy's eight-pass version,
while numpy's SIMD-vectorized sigmoid/tanh beat scalar libm calls for the
LSTM gate math.  The default therefore mixes per kernel.

``AUDIOMORPH_BACKEND`` forces a uniform choice: ``cython`` (error if the
extension is missing), ``numpy``, or ``auto`` (default, the mixed policy).
"""

import os

import numpy as np

from audiomorph.kernels import _pure

_requested = os.environ.get("AUDIOMORPH_BACKEND", "auto").lower()
if _requested not in ("auto", "cython", "numpy"):
    raise ValueError(f"AUDIOMORPH_BACKEND must be auto, cython or numpy, "
                     f"got {_requested!r}")

try:
    from audiomorph.kernels import _ckernels
except ImportError:
    _ckernels = None
    if _requested == "cython":
        raise ImportError(
            "AUDIOMORPH_BACKEND=cython but the compiled extension is not "
            "available; reinstall with the extension built or use "
            "AUDIOMORPH_BACKEND=numpy"
        ) from None

if _requested == "cython":
    _gates_impl = _ckernels
    _adam_impl = _ckernels
    BACKEND = "cython"
elif _requested == "numpy" or _ckernels is None:
    _gates_impl = _pure
    _adam_impl = _pure
    BACKEND = "numpy"
else:
    _gates_impl = _pure
    _adam_impl = _ckernels
    BACKEND = "auto(numpy-gates,cython-adam)"


def backend_name() -> str:
    """Active kernel backend: 'cython', 'numpy', or the mixed auto policy."""
    return BACKEND


def lstm_gates_forward(pre, c_prev):
    return _gates_impl.lstm_gates_forward(
        np.ascontiguousarray(pre), np.ascontiguousarray(c_prev)
    )


def lstm_gates_backward(gates, c, c_prev, dh, dc):
    return _gates_impl.lstm_gates_backward(
        np.ascontiguousarray(gates),
        np.ascontiguousarray(c),
        np.ascontiguousarray(c_prev),
        np.ascontiguousarray(dh),
        np.ascontiguousarray(dc),
    )


def adam_update(param, grad, m, v, lr, beta1, beta2, eps, step):
    # ravel() is a view for the C-contiguous buffers the optimizer owns,
    # so the in-place update reaches the original arrays.
    _adam_impl.adam_update(
        param.ravel(), np.ascontiguousarray(grad).ravel(), m.ravel(), v.ravel(),
        float(lr), float(beta1), float(beta2), float(eps), int(step),
    )
