"""Minimal dense-tensor engine with reverse-mode automatic differentiation.

Everything is float64 and row-major.  Operations build a computation graph
of ``Tensor`` nodes; ``backward`` on a scalar loss accumulates gradients
into every ``requires_grad`` leaf reachable from it.  Broadcasting is
deliberately restricted to scalar-vs-tensor and equal shapes so that each
backward rule stays small enough to audit by eye.

Subgradient conventions (documented, tested):
  * relu at 0 has gradient 0,
  * sqrt at 0 has gradient 0,
  * l2norm at the origin has gradient 0.
"""

from __future__ import annotations

import threading
from typing import Callable, Iterable, Optional, Sequence

import numpy as np


class ShapeError(ValueError):
    """Operand shapes are incompatible for the requested operation."""


class DomainError(ValueError):
    """Operand values lie outside the mathematical domain of the operation."""


class GraphError(RuntimeError):
    """The computation graph cannot support the requested traversal."""


_state = threading.local()


def _grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


class no_grad:
    """Context manager that disables graph construction (fast inference)."""

    def __enter__(self):
        self._prev = _grad_enabled()
        _state.grad_enabled = False
        return self

    def __exit__(self, *exc):
        _state.grad_enabled = self._prev
        return False


def _as_array(value) -> np.ndarray:
    arr = np.asarray(value, dtype=np.float64)
    if arr.ndim == 0:
        return arr  # 0-d is trivially contiguous; ascontiguousarray would make it 1-d
    return np.ascontiguousarray(arr)


class Tensor:
    """N-dimensional float64 array that may participate in a gradient graph.

    ``grad`` is populated only on ``requires_grad`` leaves, and accumulates
    additively across ``backward`` calls until ``zero_grad`` resets it.
    """

    __slots__ = ("data", "requires_grad", "grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False):
        self.data = _as_array(data)
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self._parents: tuple = ()
        self._vjp: Optional[Callable] = None

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def zeros(shape, requires_grad: bool = False) -> "Tensor":
        return Tensor(np.zeros(shape, dtype=np.float64), requires_grad)

    @staticmethod
    def _from_op(data: np.ndarray, parents: Sequence["Tensor"],
                 vjp: Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]) -> "Tensor":
        """Create a graph node; ``vjp(g)`` returns one gradient per parent.

        Extension point for fused operations (LSTM steps, losses) whose
        backward rule is hand-derived; finite-difference tests are the
        contract for anything registered through here.
        """
        out = Tensor(data)
        if _grad_enabled() and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._vjp = vjp
        return out

    # -- basic properties ------------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def is_leaf(self) -> bool:
        return self._vjp is None

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        """Leaf view of the same data, cut out of the graph."""
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={tuple(self.shape)}{flag})"

    # -- arithmetic -------------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean_(self, axis, keepdims)

    def l2norm(self, axis=None, keepdims=False):
        return l2norm(self, axis, keepdims)

    # -- backward ----------------------------------------------------------------

    def backward(self, retain_graph: bool = False):
        """Reverse-mode sweep from this scalar into all requires_grad leaves.

        Repeated calls (with ``retain_graph=True``) accumulate additively.
        By default the graph is freed afterwards; a second backward through
        a freed graph raises ``GraphError``.
        """
        if self.data.size != 1:
            raise ShapeError(f"backward() needs a scalar loss, got shape {self.shape}")
        if not self.requires_grad:
            raise GraphError("backward() on a tensor that does not require grad")

        order = _topo_order(self)
        inflight: dict[int, np.ndarray] = {id(self): np.ones_like(self.data)}

        for node in reversed(order):
            g = inflight.pop(id(node), None)
            if g is None:
                continue
            if node._vjp is None:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            parent_grads = node._vjp(g)
            for parent, pg in zip(node._parents, parent_grads):
                if pg is None or not parent.requires_grad:
                    continue
                if pg.shape != parent.data.shape:
                    pg = pg.reshape(parent.data.shape)
                key = id(parent)
                if key in inflight:
                    inflight[key] = inflight[key] + pg
                else:
                    inflight[key] = pg

        if not retain_graph:
            for node in order:
                if node._vjp is not None:
                    node._parents = ()
                    node._vjp = None


def _topo_order(root: Tensor) -> list[Tensor]:
    """Iterative post-order over the grad-requiring subgraph."""
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for parent in node._parents:
            if parent.requires_grad and id(parent) not in seen:
                stack.append((parent, False))
    return order


# -- shape plumbing ---------------------------------------------------------------


def _coerce(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _check_elementwise(a: Tensor, b: Tensor, opname: str):
    if a.data.ndim == 0 or b.data.ndim == 0:
        return
    if a.shape != b.shape:
        raise ShapeError(f"{opname}: shapes {a.shape} and {b.shape} are neither equal nor scalar")


def _reduce_to(grad: np.ndarray, shape) -> np.ndarray:
    """Collapse a gradient onto a scalar operand (the only broadcast we allow)."""
    if grad.shape == tuple(shape):
        return grad
    return np.sum(grad).reshape(shape)


# -- elementwise operations ---------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _check_elementwise(a, b, "add")
    out = a.data + b.data

    def vjp(g):
        return _reduce_to(g, a.shape), _reduce_to(g, b.shape)

    return Tensor._from_op(out, (a, b), vjp)


def sub(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _check_elementwise(a, b, "sub")
    out = a.data - b.data

    def vjp(g):
        return _reduce_to(g, a.shape), _reduce_to(-g, b.shape)

    return Tensor._from_op(out, (a, b), vjp)


def mul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _check_elementwise(a, b, "mul")
    out = a.data * b.data
    a_data, b_data = a.data, b.data

    def vjp(g):
        return _reduce_to(g * b_data, a.shape), _reduce_to(g * a_data, b.shape)

    return Tensor._from_op(out, (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    _check_elementwise(a, b, "div")
    if np.any(b.data == 0.0):
        raise DomainError("div: divisor contains zero")
    out = a.data / b.data
    a_data, b_data = a.data, b.data

    def vjp(g):
        return (_reduce_to(g / b_data, a.shape),
                _reduce_to(-g * a_data / (b_data * b_data), b.shape))

    return Tensor._from_op(out, (a, b), vjp)


def sigmoid(x) -> Tensor:
    x = _coerce(x)
    d = x.data
    # Split by sign so exp never overflows for saturating inputs.
    out = np.where(d >= 0, 1.0 / (1.0 + np.exp(-np.abs(d))),
                   np.exp(-np.abs(d)) / (1.0 + np.exp(-np.abs(d))))

    def vjp(g):
        return (g * out * (1.0 - out),)

    return Tensor._from_op(out, (x,), vjp)


def tanh(x) -> Tensor:
    x = _coerce(x)
    out = np.tanh(x.data)

    def vjp(g):
        return (g * (1.0 - out * out),)

    return Tensor._from_op(out, (x,), vjp)


def relu(x) -> Tensor:
    x = _coerce(x)
    out = np.maximum(x.data, 0.0)
    mask = x.data > 0

    def vjp(g):
        return (g * mask,)

    return Tensor._from_op(out, (x,), vjp)


def log(x) -> Tensor:
    x = _coerce(x)
    if np.any(x.data <= 0.0):
        raise DomainError("log: input contains non-positive values")
    out = np.log(x.data)
    x_data = x.data

    def vjp(g):
        return (g / x_data,)

    return Tensor._from_op(out, (x,), vjp)


def exp(x) -> Tensor:
    x = _coerce(x)
    out = np.exp(x.data)

    def vjp(g):
        return (g * out,)

    return Tensor._from_op(out, (x,), vjp)


def square(x) -> Tensor:
    x = _coerce(x)
    out = x.data * x.data
    x_data = x.data

    def vjp(g):
        return (2.0 * g * x_data,)

    return Tensor._from_op(out, (x,), vjp)


def sqrt(x) -> Tensor:
    x = _coerce(x)
    if np.any(x.data < 0.0):
        raise DomainError("sqrt: input contains negative values")
    out = np.sqrt(x.data)

    def vjp(g):
        safe = np.where(out > 0.0, out, 1.0)
        return (np.where(out > 0.0, g / (2.0 * safe), 0.0),)

    return Tensor._from_op(out, (x,), vjp)


_ELEMENTWISE = {
    "add": add, "sub": sub, "mul": mul, "sigmoid": sigmoid, "tanh": tanh,
    "relu": relu, "log": log, "exp": exp, "square": square,
}


def elementwise(op: str, *args) -> Tensor:
    """Dispatch by operation name; same registry the layer code uses."""
    try:
        fn = _ELEMENTWISE[op]
    except KeyError:
        raise ValueError(f"unknown elementwise op {op!r}") from None
    return fn(*args)


# -- matmul -----------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _coerce(a), _coerce(b)
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul: operands must be 2-D, got {a.shape} and {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: inner dimensions disagree between {a.shape} and {b.shape}")
    out = a.data @ b.data
    a_data, b_data = a.data, b.data

    def vjp(g):
        return g @ b_data.T, a_data.T @ g

    return Tensor._from_op(out, (a, b), vjp)


# -- reductions --------------------------------------------------------------------


def _normalize_axes(shape, axis):
    if axis is None:
        return tuple(range(len(shape)))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % len(shape) for ax in axis)


def _check_nonempty(t: Tensor, axes):
    n = 1
    for ax in axes:
        n *= t.shape[ax]
    if n == 0:
        raise ShapeError(f"reduction over empty axes {axes} of shape {t.shape}")
    return n


def _unreduce(g: np.ndarray, shape, axes, keepdims) -> np.ndarray:
    if not keepdims:
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def sum_(x, axis=None, keepdims=False) -> Tensor:
    x = _coerce(x)
    axes = _normalize_axes(x.shape, axis)
    _check_nonempty(x, axes)
    out = np.sum(x.data, axis=axes, keepdims=keepdims)
    shape = x.shape

    def vjp(g):
        return (np.ascontiguousarray(_unreduce(g, shape, axes, keepdims)),)

    return Tensor._from_op(out, (x,), vjp)


def mean_(x, axis=None, keepdims=False) -> Tensor:
    x = _coerce(x)
    axes = _normalize_axes(x.shape, axis)
    n = _check_nonempty(x, axes)
    out = np.mean(x.data, axis=axes, keepdims=keepdims)
    shape = x.shape

    def vjp(g):
        return (np.ascontiguousarray(_unreduce(g, shape, axes, keepdims)) / n,)

    return Tensor._from_op(out, (x,), vjp)


def l2norm(x, axis=None, keepdims=False) -> Tensor:
    """Euclidean norm over the given axes (all elements by default).

    The gradient at the origin is taken to be zero (subgradient choice).
    """
    x = _coerce(x)
    axes = _normalize_axes(x.shape, axis)
    _check_nonempty(x, axes)
    out = np.sqrt(np.sum(x.data * x.data, axis=axes, keepdims=keepdims))
    shape = x.shape
    x_data = x.data

    def vjp(g):
        norm_full = _unreduce(np.asarray(out), shape, axes, keepdims)
        g_full = _unreduce(np.asarray(g), shape, axes, keepdims)
        safe = np.where(norm_full > 0.0, norm_full, 1.0)
        return (np.where(norm_full > 0.0, g_full * x_data / safe, 0.0),)

    return Tensor._from_op(out, (x,), vjp)


_REDUCE = {"sum": sum_, "mean": mean_, "l2norm": l2norm}


def reduce(op: str, t, axis=None, keepdims=False) -> Tensor:
    try:
        fn = _REDUCE[op]
    except KeyError:
        raise ValueError(f"unknown reduction {op!r}") from None
    return fn(t, axis, keepdims)


# -- structural operations -----------------------------------------------------------


def concat(tensors: Iterable[Tensor], axis: int = 0) -> Tensor:
    parts = [_coerce(t) for t in tensors]
    if not parts:
        raise ShapeError("concat of zero tensors")
    out = np.concatenate([p.data for p in parts], axis=axis)
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def vjp(g):
        grads = []
        for i in range(len(parts)):
            index = [slice(None)] * g.ndim
            index[axis] = slice(offsets[i], offsets[i + 1])
            grads.append(np.ascontiguousarray(g[tuple(index)]))
        return grads

    return Tensor._from_op(out, parts, vjp)


def narrow(x, axis: int, start: int, length: int) -> Tensor:
    """Contiguous slice along one axis; backward scatters into zeros."""
    x = _coerce(x)
    if start < 0 or start + length > x.shape[axis]:
        raise ShapeError(
            f"narrow: [{start}, {start + length}) out of bounds for axis {axis} of {x.shape}")
    index = [slice(None)] * x.data.ndim
    index[axis] = slice(start, start + length)
    index = tuple(index)
    out = np.ascontiguousarray(x.data[index])
    shape = x.shape

    def vjp(g):
        full = np.zeros(shape, dtype=np.float64)
        full[index] = g
        return (full,)

    return Tensor._from_op(out, (x,), vjp)


def repeat_rows(x, rows: int) -> Tensor:
    """Tile a (1, K) tensor to (rows, K); backward sums back over rows."""
    x = _coerce(x)
    if x.data.ndim != 2 or x.shape[0] != 1:
        raise ShapeError(f"repeat_rows expects shape (1, K), got {x.shape}")
    out = np.ascontiguousarray(np.broadcast_to(x.data, (rows, x.shape[1])))

    def vjp(g):
        return (np.sum(g, axis=0, keepdims=True),)

    return Tensor._from_op(out, (x,), vjp)
