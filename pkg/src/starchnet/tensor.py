"""Numpy-backed tensor with reverse-mode automatic differentiation.

A ``Tensor`` wraps a row-major ``numpy.ndarray`` (float32 for compute,
float64 for gradient checks).  Every differentiable op records its parents
and a backward rule; ``Tensor.backward`` walks the recorded graph in reverse
topological order and accumulates gradients into leaf tensors that have
``requires_grad`` set.  Calling ``backward`` twice without ``zero_grad``
accumulates, as in most autograd libraries.
"""
from __future__ import annotations

import contextlib
import threading

import numpy as np

from .errors import ArgumentError, NonFiniteError, ShapeError

_FLOAT_DTYPES = (np.float32, np.float64)
_state = threading.local()


def is_grad_enabled() -> bool:
    return getattr(_state, "grad_enabled", True)


@contextlib.contextmanager
def no_grad():
    """Disable graph recording in the current thread."""
    prev = is_grad_enabled()
    _state.grad_enabled = False
    try:
        yield
    finally:
        _state.grad_enabled = prev


def _as_array(data, dtype=None) -> np.ndarray:
    if isinstance(data, Tensor):
        data = data.data
    if dtype is None:
        arr = np.asarray(data)
        dtype = arr.dtype if arr.dtype in _FLOAT_DTYPES else np.float32
    arr = np.asarray(data, dtype=dtype)
    if arr.dtype not in _FLOAT_DTYPES:
        raise ArgumentError(f"unsupported dtype {arr.dtype}; use float32 or float64")
    return arr


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


class Tensor:
    def __init__(self, data, requires_grad: bool = False, dtype=None):
        self.data = _as_array(data, dtype)
        if any(d <= 0 for d in self.data.shape):
            raise ShapeError(f"tensor extents must be positive, got {self.data.shape}")
        self.requires_grad = bool(requires_grad)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self.op = "leaf"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data, dtype=self.data.dtype)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    def __len__(self):
        return self.shape[0]

    def backward(self, grad=None) -> None:
        if grad is None:
            if self.data.size != 1 or self.data.ndim > 1:
                raise ArgumentError(f"backward() needs a scalar loss, got shape {self.shape}")
            grad = np.ones_like(self.data)
        grad = np.asarray(grad, dtype=self.dtype)
        if grad.shape != self.shape:
            raise ShapeError(f"seed gradient shape {grad.shape} != tensor shape {self.shape}")

        order = _topological_order(self)
        grads = {id(self): grad}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.is_leaf:
                if node.requires_grad:
                    node.grad = g.copy() if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                if id(parent) in grads:
                    grads[id(parent)] = grads[id(parent)] + pg
                else:
                    grads[id(parent)] = pg

    # elementwise arithmetic; broadcasting follows numpy
    def __add__(self, other):
        other = _wrap(other, self.dtype)
        a_shape, b_shape = self.shape, other.shape

        def backward(g):
            return _unbroadcast(g, a_shape), _unbroadcast(g, b_shape)

        return make_result(self.data + other.data, (self, other), backward, "add")

    __radd__ = __add__

    def __neg__(self):
        return make_result(-self.data, (self,), lambda g: (-g,), "neg")

    def __sub__(self, other):
        return self + (-_wrap(other, self.dtype))

    def __rsub__(self, other):
        return _wrap(other, self.dtype) + (-self)

    def __mul__(self, other):
        other = _wrap(other, self.dtype)
        a, b = self.data, other.data

        def backward(g):
            return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)

        return make_result(a * b, (self, other), backward, "mul")

    __rmul__ = __mul__

    def sum(self, axis=None, keepdims: bool = False) -> "Tensor":
        shape = self.shape

        def backward(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        out = self.data.sum(axis=axis, keepdims=keepdims)
        return make_result(out, (self,), backward, "sum")

    def mean(self, axis=None, keepdims: bool = False) -> "Tensor":
        out = self.sum(axis=axis, keepdims=keepdims)
        count = self.data.size // max(out.data.size, 1)
        return out * (1.0 / count)

    def reshape(self, *shape) -> "Tensor":
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        src = self.shape
        return make_result(self.data.reshape(shape), (self,), lambda g: (g.reshape(src),), "reshape")

    def flatten(self, start_dim: int = 1) -> "Tensor":
        return self.reshape(self.shape[:start_dim] + (-1,))


def _wrap(value, dtype) -> Tensor:
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def make_result(out: np.ndarray, parents, backward, op: str) -> Tensor:
    """Wrap an op's output array, checking finiteness and recording the graph.

    ``backward`` maps the upstream gradient to a tuple with one entry per
    parent (``None`` for non-differentiable inputs).
    """
    out = np.asarray(out)
    if not np.isfinite(out).all():
        raise NonFiniteError(f"{op} produced non-finite values (shape {out.shape})")
    result = Tensor.__new__(Tensor)
    result.data = out
    result.grad = None
    result.op = op
    result._parents = ()
    result._backward = None
    result.requires_grad = False
    if is_grad_enabled() and any(p.requires_grad for p in parents):
        result.requires_grad = True
        result._parents = tuple(parents)
        result._backward = backward
    return result


def _topological_order(root: Tensor) -> list[Tensor]:
    order, seen = [], set()
    stack = [(root, False)]
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
            if id(parent) not in seen:
                stack.append((parent, False))
    return order
