"""Minimal reverse-mode automatic differentiation over dense tensors.

Define-by-run: every operation that produces a gradient-requiring tensor
records its parents and a backward rule on the result.  ``backward(loss)``
replays the implicit graph in reverse topological order exactly once and
accumulates gradients on every tensor with ``requires_grad`` until
``zero_grads`` clears them.

Parameters and activations are float32 by default; the same graph code runs
in float64 so finite-difference tests get a clean oracle.
"""

from __future__ import annotations

import contextlib
import contextvars
from typing import Iterable, Optional, Sequence

import numpy as np
from scipy.special import expit

from audiomorph import kernels
from audiomorph.errors import GradientError, ShapeError

DEFAULT_DTYPE = np.float32

# Names of every registered forward op; the gradient suite must cover all.
ALL_OPS = (
    "add", "sub", "mul", "scale", "matmul", "concat", "getitem", "reshape",
    "pad_axis", "tanh", "sigmoid", "relu", "softmax", "sum", "mse_loss",
    "lstm_gates",
)

_grad_enabled: contextvars.ContextVar[bool] = contextvars.ContextVar(
    "audiomorph_grad_enabled", default=True
)
_nan_checks = False


def set_nan_checks(enabled: bool) -> None:
    """Toggle the debug guard that scans every op output for NaN/Inf."""
    global _nan_checks
    _nan_checks = bool(enabled)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference mode)."""
    token = _grad_enabled.set(False)
    try:
        yield
    finally:
        _grad_enabled.reset(token)


class Tensor:
    """Dense real array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "grad", "_op", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if dtype is not None:
            arr = arr.astype(dtype, copy=False)
        elif not np.issubdtype(arr.dtype, np.floating):
            arr = arr.astype(DEFAULT_DTYPE)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._op: Optional[str] = None
        self._parents: tuple = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def backward(self) -> None:
        backward(self)

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def __add__(self, other):
        return add(self, _coerce(other, self.dtype))

    def __sub__(self, other):
        return sub(self, _coerce(other, self.dtype))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, other)
        return mul(self, _coerce(other, self.dtype))

    def __matmul__(self, other):
        return matmul(self, _coerce(other, self.dtype))

    def __getitem__(self, key):
        return getitem(self, key)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype}{flag})"


def _coerce(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def _check_same_dtype(opname: str, *tensors: Tensor) -> None:
    dtypes = {t.dtype for t in tensors}
    if len(dtypes) > 1:
        raise ShapeError(f"{opname}: mixed dtypes {sorted(map(str, dtypes))}")


def _make(opname: str, data: np.ndarray, parents: Sequence[Tensor], backward_fn) -> Tensor:
    if _nan_checks and not np.all(np.isfinite(data)):
        raise GradientError(f"non-finite values produced by op '{opname}'")
    out = Tensor(data, requires_grad=False, dtype=data.dtype)
    if _grad_enabled.get() and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._op = opname
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Reduce grad back to `shape` after numpy broadcasting."""
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(
        i for i, (gdim, sdim) in enumerate(zip(grad.shape, shape))
        if sdim == 1 and gdim != 1
    )
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# forward ops
# ---------------------------------------------------------------------------

def add(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype("add", a, b)
    try:
        data = a.data + b.data
    except ValueError:
        raise ShapeError(f"add: cannot broadcast {a.shape} with {b.shape}") from None

    def backward_fn(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make("add", data, (a, b), backward_fn)


def sub(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype("sub", a, b)
    try:
        data = a.data - b.data
    except ValueError:
        raise ShapeError(f"sub: cannot broadcast {a.shape} with {b.shape}") from None

    def backward_fn(g):
        return _unbroadcast(g, a.shape), -_unbroadcast(g, b.shape)

    return _make("sub", data, (a, b), backward_fn)


def mul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype("mul", a, b)
    try:
        data = a.data * b.data
    except ValueError:
        raise ShapeError(f"mul: cannot broadcast {a.shape} with {b.shape}") from None

    def backward_fn(g):
        return (
            _unbroadcast(g * b.data, a.shape),
            _unbroadcast(g * a.data, b.shape),
        )

    return _make("mul", data, (a, b), backward_fn)


def scale(a: Tensor, factor: float) -> Tensor:
    """Multiply by a python scalar (no gradient for the scalar)."""
    factor = a.dtype.type(factor)
    data = a.data * factor

    def backward_fn(g):
        return (g * factor,)

    return _make("scale", data, (a,), backward_fn)


def matmul(a: Tensor, b: Tensor) -> Tensor:
    _check_same_dtype("matmul", a, b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise ShapeError(f"matmul: operands must be >= 2-D, got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner dims differ, {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def backward_fn(g):
        ga = _unbroadcast(g @ np.swapaxes(b.data, -1, -2), a.shape)
        gb = _unbroadcast(np.swapaxes(a.data, -1, -2) @ g, b.shape)
        return ga, gb

    return _make("matmul", data, (a, b), backward_fn)


def concat(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat: empty tensor list")
    _check_same_dtype("concat", *tensors)
    try:
        data = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        shapes = [t.shape for t in tensors]
        raise ShapeError(f"concat: incompatible shapes {shapes}") from None
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def backward_fn(g):
        return tuple(np.split(g, splits, axis=axis))

    return _make("concat", data, tensors, backward_fn)


def getitem(a: Tensor, key) -> Tensor:
    """Basic slicing (ints, slices with step >= 1, tuples thereof)."""
    data = a.data[key]

    def backward_fn(g):
        out = np.zeros(a.shape, dtype=g.dtype)
        out[key] = g
        return (out,)

    return _make("getitem", data, (a,), backward_fn)


def reshape(a: Tensor, shape) -> Tensor:
    data = a.data.reshape(shape)

    def backward_fn(g):
        return (g.reshape(a.shape),)

    return _make("reshape", data, (a,), backward_fn)


def pad_axis(a: Tensor, axis: int, before: int, after: int) -> Tensor:
    """Zero-pad along one axis."""
    if before < 0 or after < 0:
        raise ShapeError("pad_axis: negative padding")
    widths = [(0, 0)] * a.data.ndim
    widths[axis] = (before, after)
    data = np.pad(a.data, widths)
    index = [slice(None)] * a.data.ndim
    index[axis] = slice(before, before + a.shape[axis])
    index = tuple(index)

    def backward_fn(g):
        return (g[index],)

    return _make("pad_axis", data, (a,), backward_fn)


def tanh(a: Tensor) -> Tensor:
    data = np.tanh(a.data)

    def backward_fn(g):
        return (g * (1.0 - data * data),)

    return _make("tanh", data, (a,), backward_fn)


def sigmoid(a: Tensor) -> Tensor:
    data = expit(a.data)

    def backward_fn(g):
        return (g * data * (1.0 - data),)

    return _make("sigmoid", data, (a,), backward_fn)


def relu(a: Tensor) -> Tensor:
    data = np.maximum(a.data, 0)

    def backward_fn(g):
        return (g * (a.data > 0),)

    return _make("relu", data, (a,), backward_fn)


def softmax(a: Tensor, axis: int = -1) -> Tensor:
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(shifted)
    data = e / np.sum(e, axis=axis, keepdims=True)

    def backward_fn(g):
        dot = np.sum(g * data, axis=axis, keepdims=True)
        return ((g - dot) * data,)

    return _make("softmax", data, (a,), backward_fn)


def tensor_sum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward_fn(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=False),)
        axes = axis if isinstance(axis, tuple) else (axis,)
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape).astype(a.dtype, copy=False),)

    return _make("sum", np.asarray(data), (a,), backward_fn)


def mse_loss(pred: Tensor, target) -> Tensor:
    """Mean squared error over all elements; returns a scalar tensor."""
    target = _coerce(target, pred.dtype)
    _check_same_dtype("mse_loss", pred, target)
    if pred.shape != target.shape:
        raise ShapeError(f"mse_loss: shape mismatch {pred.shape} vs {target.shape}")
    diff = pred.data - target.data
    data = np.asarray((diff * diff).mean(), dtype=pred.dtype)
    scale_factor = pred.dtype.type(2.0 / pred.data.size)

    def backward_fn(g):
        base = g * scale_factor * diff
        return base, -base

    return _make("mse_loss", data, (pred, target), backward_fn)


def lstm_gates(pre: Tensor, c_prev: Tensor) -> Tensor:
    """Fused LSTM cell update from gate preactivations.

    pre is (N, 4H) laid out [input | forget | cell | output]; c_prev is
    (N, H).  Returns (N, 2H) holding [h | c]; slice the halves apart with
    ``getitem``.
    """
    if pre.data.ndim != 2 or c_prev.data.ndim != 2:
        raise ShapeError(
            f"lstm_gates: expected 2-D operands, got {pre.shape} and {c_prev.shape}"
        )
    if pre.shape[-1] != 4 * c_prev.shape[-1] or pre.shape[0] != c_prev.shape[0]:
        raise ShapeError(f"lstm_gates: incompatible shapes {pre.shape} vs {c_prev.shape}")
    _check_same_dtype("lstm_gates", pre, c_prev)
    n_hidden = c_prev.shape[-1]
    h, c, gates = kernels.lstm_gates_forward(pre.data, c_prev.data)
    data = np.concatenate([h, c], axis=-1)

    def backward_fn(g):
        dpre, dc_prev = kernels.lstm_gates_backward(
            gates, c, c_prev.data, g[:, :n_hidden], g[:, n_hidden:]
        )
        return dpre, dc_prev

    return _make("lstm_gates", data, (pre, c_prev), backward_fn)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------

def _topo_order(root: Tensor) -> list:
    """Iterative post-order DFS; graphs are deep enough to overflow recursion."""
    order = []
    visited = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if id(parent) not in visited:
                stack.append((parent, False))
    return order


def backward(loss: Tensor) -> None:
    """Populate .grad of every requires_grad tensor reachable from loss.

    Gradients accumulate across calls until zero_grads is used.
    """
    if not isinstance(loss, Tensor):
        raise GradientError("backward expects a Tensor")
    if loss.size != 1:
        raise GradientError(f"backward requires a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise GradientError("loss does not require grad; nothing to differentiate")

    order = _topo_order(loss)
    flows = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = flows.pop(id(node), None)
        if g is None:
            continue
        if node.requires_grad:
            node.grad = g.copy() if node.grad is None else node.grad + g
        if node._backward is None:
            continue
        parent_grads = node._backward(g)
        for parent, pg in zip(node._parents, parent_grads):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in flows:
                flows[key] = flows[key] + pg
            else:
                flows[key] = pg


def zero_grads(tensors: Iterable[Tensor]) -> None:
    for t in tensors:
        t.grad = None


# ---------------------------------------------------------------------------
# Adam
# ---------------------------------------------------------------------------

class Adam:
    """Bias-corrected Adam with per-epoch exponential learning-rate decay."""

    def __init__(self, params: Sequence[Tensor], learning_rate: float = 1e-3,
                 beta1: float = 0.9, beta2: float = 0.999, epsilon: float = 1e-8,
                 decay_per_epoch: float = 0.99):
        self.params = list(params)
        for p in self.params:
            if not p.requires_grad:
                raise GradientError("Adam got a parameter with requires_grad=False")
        self.learning_rate = float(learning_rate)
        self.beta1 = float(beta1)
        self.beta2 = float(beta2)
        self.epsilon = float(epsilon)
        self.decay_per_epoch = float(decay_per_epoch)
        self.step_count = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def step(self) -> None:
        """Apply one update to every parameter from its accumulated grad."""
        for idx, p in enumerate(self.params):
            if p.grad is None:
                raise GradientError(f"parameter {idx} has no gradient; "
                                    "run backward() before step()")
        self.step_count += 1
        for p, m, v in zip(self.params, self.m, self.v):
            kernels.adam_update(p.data, p.grad, m, v, self.learning_rate,
                                self.beta1, self.beta2, self.epsilon,
                                self.step_count)

    def zero_grads(self) -> None:
        zero_grads(self.params)

    def decay_learning_rate(self) -> None:
        """Called once per epoch by the training harness."""
        self.learning_rate *= self.decay_per_epoch

    def state_dict(self) -> dict:
        return {
            "learning_rate": self.learning_rate,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "epsilon": self.epsilon,
            "decay_per_epoch": self.decay_per_epoch,
            "step_count": self.step_count,
        }

    def load_state_dict(self, state: dict, moments=None) -> None:
        self.learning_rate = float(state["learning_rate"])
        self.beta1 = float(state["beta1"])
        self.beta2 = float(state["beta2"])
        self.epsilon = float(state["epsilon"])
        self.decay_per_epoch = float(state["decay_per_epoch"])
        self.step_count = int(state["step_count"])
        if moments is not None:
            m_list, v_list = moments
            if len(m_list) != len(self.params) or len(v_list) != len(self.params):
                raise GradientError(
                    f"moment count {len(m_list)}/{len(v_list)} does not match "
                    f"{len(self.params)} parameters"
                )
            self.m = [np.asarray(m, dtype=p.data.dtype).reshape(p.data.shape)
                      for m, p in zip(m_list, self.params)]
            self.v = [np.asarray(v, dtype=p.data.dtype).reshape(p.data.shape)
                      for v, p in zip(v_list, self.params)]
