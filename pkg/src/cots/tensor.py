"""Dense float64 tensors with tape-based reverse-mode differentiation.

Operations executed inside an active :class:`Graph` are recorded in execution
order; :meth:`Graph.backward` replays them in reverse. Outside a graph the same
functions simply compute values, which is how inference and the momentum
encoders run.

Broadcasting follows numpy rules; backward rules sum gradients back down to
the input shape.
"""

from __future__ import annotations

import threading
from typing import Callable, Sequence

import numpy as np

from . import kernels
from .errors import DegenerateInputError, DimensionError, DomainError, GraphError

NORM_EPS = 1e-12

_state = threading.local()


def _graph_stack() -> list:
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = _state.stack = []
    return stack


def active_graph() -> Graph | None:
    stack = _graph_stack()
    return stack[-1] if stack else None


class Tensor:
    """Numeric array plus an optional, lazily allocated gradient buffer."""

    __slots__ = ("data", "grad", "requires_grad", "name")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def values(self) -> np.ndarray:
        """Flat row-major view of the data."""
        return self.data.reshape(-1)

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> Tensor:
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return index(self, key)


class _Node:
    __slots__ = ("op", "inputs", "output", "backward")

    def __init__(self, op, inputs, output, backward):
        self.op = op
        self.inputs = inputs
        self.output = output
        self.backward = backward


class Graph:
    """Execution-ordered record of differentiable operations.

    Use as a context manager; operations whose inputs require gradients are
    appended while the graph is active. ``backward`` may run once.
    """

    def __init__(self):
        self.nodes: list[_Node] = []
        self._consumed = False

    def __enter__(self) -> Graph:
        _graph_stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        stack = _graph_stack()
        if not stack or stack[-1] is not self:
            raise GraphError("graph context exited out of order")
        stack.pop()

    def record(self, op: str, inputs: Sequence[Tensor], output: Tensor, backward: Callable) -> None:
        self.nodes.append(_Node(op, tuple(inputs), output, backward))

    def backward(self, loss: Tensor, seed: np.ndarray | None = None) -> None:
        if self._consumed:
            raise GraphError("backward already ran on this graph; build a new one")
        self._consumed = True
        if not loss.requires_grad:
            return
        seed = np.ones_like(loss.data) if seed is None else np.asarray(seed, dtype=np.float64)
        if seed.shape != loss.shape:
            raise DimensionError(f"seed shape {seed.shape} != loss shape {loss.shape}")
        _accumulate(loss, seed)
        for node in reversed(self.nodes):
            g = node.output.grad
            if g is None:
                continue
            grads = node.backward(g)
            for inp, gi in zip(node.inputs, grads):
                if gi is not None and inp.requires_grad:
                    _accumulate(inp, gi)

    def reset(self) -> None:
        self.nodes.clear()
        self._consumed = False


class no_grad:
    """Suspend recording: operations inside run as plain array math."""

    def __enter__(self):
        stack = _graph_stack()
        self._saved = list(stack)
        stack.clear()
        return self

    def __exit__(self, *exc):
        stack = _graph_stack()
        stack.clear()
        stack.extend(self._saved)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    if g.shape != t.data.shape:
        g = np.broadcast_to(g, t.data.shape)
    t.grad = np.array(g, dtype=np.float64) if t.grad is None else t.grad + g


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _make(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward: Callable) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    graph = active_graph() if needs else None
    out = Tensor(data, requires_grad=graph is not None)
    if graph is not None:
        graph.record(op, inputs, out, backward)
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


# ---------------------------------------------------------------- linear algebra


def matmul(a, b) -> Tensor:
    """Matrix product over the last two axes (leading axes broadcast)."""
    a, b = as_tensor(a), as_tensor(b)
    if a.data.ndim < 2 or b.data.ndim < 2:
        raise DimensionError("matmul needs operands of rank >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} x {b.shape}")
    if b.data.ndim == 2 and a.data.ndim > 2:
        # batched activations times a weight matrix: one flat GEMM each way
        k, n = b.shape
        a2 = a.data.reshape(-1, k)
        out = (a2 @ b.data).reshape(a.shape[:-1] + (n,))

        def backward(g):
            g2 = g.reshape(-1, n)
            ga = (g2 @ b.data.T).reshape(a.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return _make("matmul", out, (a, b), backward)

    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = _unbroadcast(np.matmul(g, np.swapaxes(b.data, -1, -2)), a.shape) if a.requires_grad else None
        gb = _unbroadcast(np.matmul(np.swapaxes(a.data, -1, -2), g), b.shape) if b.requires_grad else None
        return ga, gb

    return _make("matmul", out, (a, b), backward)


# ---------------------------------------------------------------- elementwise


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make("add", out, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data - b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make("sub", out, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out = a.data * b.data

    def backward(g):
        ga = _unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = _unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return _make("mul", out, (a, b), backward)


def scale(x, c: float) -> Tensor:
    x = as_tensor(x)
    c = float(c)
    return _make("scale", x.data * c, (x,), lambda g: (g * c,))


def exp(x) -> Tensor:
    x = as_tensor(x)
    out = np.exp(x.data)
    return _make("exp", out, (x,), lambda g: (g * out,))


def log(x) -> Tensor:
    x = as_tensor(x)
    if np.any(x.data <= 0):
        raise DomainError("log of a non-positive value")
    return _make("log", np.log(x.data), (x,), lambda g: (g / x.data,))


def gelu(x) -> Tensor:
    """GELU, tanh approximation."""
    x = as_tensor(x)
    flat = np.ascontiguousarray(x.data).reshape(-1)
    out, t = kernels.gelu_fwd(flat)

    def backward(g):
        return (kernels.gelu_bwd(flat, t, np.ascontiguousarray(g).reshape(-1)).reshape(x.shape),)

    return _make("gelu", out.reshape(x.shape), (x,), backward)


def tanh(x) -> Tensor:
    x = as_tensor(x)
    out = np.tanh(x.data)
    return _make("tanh", out, (x,), lambda g: (g * (1.0 - out * out),))


# ---------------------------------------------------------------- reductions


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    x = as_tensor(x)
    out = np.sum(x.data, axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, x.shape),)

    return _make("sum", np.asarray(out), (x,), backward)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    x = as_tensor(x)
    n = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
    return scale(sum(x, axis=axis, keepdims=keepdims), 1.0 / n)


def logsumexp(x, axis: int = -1) -> Tensor:
    """Stable log-sum-exp along one axis (axis is dropped)."""
    x = as_tensor(x)
    m = np.max(x.data, axis=axis, keepdims=True)
    e = np.exp(x.data - m)
    s = e.sum(axis=axis, keepdims=True)
    out = (np.log(s) + m).squeeze(axis)

    def backward(g):
        return (np.expand_dims(g, axis) * (e / s),)

    return _make("logsumexp", out, (x,), backward)


# ---------------------------------------------------------------- row-wise ops


def _rows(a: np.ndarray) -> np.ndarray:
    return np.ascontiguousarray(a).reshape(-1, a.shape[-1])


def softmax_rows(x) -> Tensor:
    """Softmax over the last axis with max subtraction."""
    x = as_tensor(x)
    y = kernels.softmax_fwd(_rows(x.data)).reshape(x.shape)

    def backward(g):
        return (kernels.softmax_bwd(_rows(y), _rows(g)).reshape(x.shape),)

    return _make("softmax", y, (x,), backward)


def log_softmax_rows(x) -> Tensor:
    x = as_tensor(x)
    z = x.data - x.data.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=-1, keepdims=True))
    out = z - lse

    def backward(g):
        return (g - np.exp(out) * g.sum(axis=-1, keepdims=True),)

    return _make("log_softmax", out, (x,), backward)


def l2_normalize_rows(x, eps: float = NORM_EPS) -> Tensor:
    """Scale each row (last axis) to unit Euclidean norm."""
    x = as_tensor(x)
    norm = np.sqrt(np.sum(x.data * x.data, axis=-1, keepdims=True))
    if np.any(norm < eps):
        raise DegenerateInputError("row norm below epsilon; cannot normalize")
    y = x.data / norm

    def backward(g):
        return ((g - y * np.sum(g * y, axis=-1, keepdims=True)) / norm,)

    return _make("l2_normalize", y, (x,), backward)


def layer_norm(x, gain=None, bias=None, eps: float = 1e-5) -> Tensor:
    """Normalize the last axis to zero mean and unit variance, then affine."""
    x = as_tensor(x)
    d = x.shape[-1]
    gain = Tensor(np.ones(d)) if gain is None else as_tensor(gain)
    bias = Tensor(np.zeros(d)) if bias is None else as_tensor(bias)
    y, xhat, rstd = kernels.layer_norm_fwd(_rows(x.data), gain.data.reshape(-1), bias.data.reshape(-1), float(eps))

    def backward(g):
        dx, dg, db = kernels.layer_norm_bwd(_rows(g), xhat, rstd, gain.data.reshape(-1))
        return dx.reshape(x.shape), dg.reshape(gain.shape), db.reshape(bias.shape)

    return _make("layer_norm", y.reshape(x.shape), (x, gain, bias), backward)


# ---------------------------------------------------------------- shape & gather


def reshape(x, shape) -> Tensor:
    x = as_tensor(x)
    return _make("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(x.shape),))


def transpose(x, axes) -> Tensor:
    x = as_tensor(x)
    inv = np.argsort(axes)
    return _make("transpose", np.transpose(x.data, axes), (x,), lambda g: (np.transpose(g, inv),))


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    ts = [as_tensor(t) for t in tensors]
    out = np.concatenate([t.data for t in ts], axis=axis)
    bounds = np.cumsum([t.shape[axis] for t in ts])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make("concat", out, ts, backward)


def broadcast_to(x, shape) -> Tensor:
    x = as_tensor(x)
    out = np.broadcast_to(x.data, shape).copy()
    return _make("broadcast", out, (x,), lambda g: (_unbroadcast(g, x.shape),))


def index(x, key) -> Tensor:
    """Numpy-style indexing; backward scatter-adds, so repeated indices sum."""
    x = as_tensor(x)
    out = np.array(x.data[key])

    def backward(g):
        full = np.zeros_like(x.data)
        np.add.at(full, key, g)
        return (full,)

    return _make("index", out, (x,), backward)


def embedding_lookup(table, ids) -> Tensor:
    """Gather rows of ``table``; output shape is ``ids.shape + (d,)``."""
    table = as_tensor(table)
    if table.data.ndim != 2:
        raise DimensionError("embedding table must be 2-D")
    ids = np.asarray(ids, dtype=np.int64)
    vocab, d = table.shape
    if ids.size and (ids.min() < 0 or ids.max() >= vocab):
        raise IndexError(f"token id out of range [0, {vocab})")
    out = table.data[ids] if ids.size else np.zeros(ids.shape + (d,))

    def backward(g):
        full = np.zeros_like(table.data)
        np.add.at(full, ids.reshape(-1), g.reshape(-1, d))
        return (full,)

    return _make("embedding", out, (table,), backward)


def pick(x, targets) -> Tensor:
    """``out[i] = x[i, targets[i]]`` for a 2-D ``x``."""
    x = as_tensor(x)
    targets = np.asarray(targets, dtype=np.int64)
    return index(x, (np.arange(x.shape[0]), targets))


# ---------------------------------------------------------------- verification


def grad_check(f: Callable[[Tensor], Tensor], x, eps: float = 1e-5, floor: float = 1e-6) -> float:
    """Worst relative error between the analytic gradient and central differences.

    ``f`` maps a tensor to a scalar tensor. The relative error per coordinate is
    ``|a - n| / max(|a|, |n|, floor)``.
    """
    x0 = np.array(as_tensor(x).data, dtype=np.float64)
    probe = Tensor(x0.copy(), requires_grad=True)
    with Graph() as g:
        y = f(probe)
    if y.size != 1:
        raise DimensionError("grad_check needs a scalar-valued function")
    g.backward(y)
    analytic = np.zeros_like(x0) if probe.grad is None else probe.grad

    numeric = np.zeros_like(x0)
    flat = numeric.reshape(-1)
    with no_grad():
        for i in range(x0.size):
            xp = x0.copy().reshape(-1)
            xp[i] += eps
            fp = f(Tensor(xp.reshape(x0.shape))).item()
            xp[i] -= 2 * eps
            fm = f(Tensor(xp.reshape(x0.shape))).item()
            flat[i] = (fp - fm) / (2 * eps)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denom)) if x0.size else 0.0
