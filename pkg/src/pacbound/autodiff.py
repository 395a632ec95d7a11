"""Reverse-mode differentiation over numpy arrays.

Every operation on a :class:`Tensor` that depends on a tensor requiring
gradients records its parents and an adjoint closure. :func:`grad` sorts the
recorded graph topologically and visits each node once.
"""
from __future__ import annotations

import numpy as np


class PoisonedTapeError(FloatingPointError):
    """A non-finite value was recorded on the path to the loss."""


class ShapeError(ValueError):
    pass


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")
    __array_priority__ = 100

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None, op: str = ""):
        self.data = np.asarray(data, dtype=float)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.op = op

    # -- basics -------------------------------------------------------------
    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def __len__(self):
        return len(self.data)

    def __repr__(self):
        return f"Tensor({self.data!r}, requires_grad={self.requires_grad})"

    def item(self) -> float:
        return float(self.data)

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    # -- arithmetic ---------------------------------------------------------
    def __add__(self, other):
        other = as_tensor(other)

        def back(g):
            return _unbroadcast(g, self.shape), _unbroadcast(g, other.shape)

        return _node(self.data + other.data, (self, other), back, "add")

    __radd__ = __add__

    def __neg__(self):
        return _node(-self.data, (self,), lambda g: (-g,), "neg")

    def __sub__(self, other):
        other = as_tensor(other)

        def back(g):
            return _unbroadcast(g, self.shape), _unbroadcast(-g, other.shape)

        return _node(self.data - other.data, (self, other), back, "sub")

    def __rsub__(self, other):
        return as_tensor(other) - self

    def __mul__(self, other):
        other = as_tensor(other)
        a, b = self.data, other.data

        def back(g):
            return _unbroadcast(g * b, self.shape), _unbroadcast(g * a, other.shape)

        return _node(a * b, (self, other), back, "mul")

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_tensor(other)
        a, b = self.data, other.data

        def back(g):
            return _unbroadcast(g / b, self.shape), _unbroadcast(-g * a / (b * b), other.shape)

        return _node(a / b, (self, other), back, "div")

    def __rtruediv__(self, other):
        return as_tensor(other) / self

    def __pow__(self, k):
        if isinstance(k, Tensor):
            raise TypeError("tensor exponents are not supported")
        a = self.data
        return _node(a ** k, (self,), lambda g: (g * k * a ** (k - 1),), "pow")

    def __matmul__(self, other):
        other = as_tensor(other)
        a, b = self.data, other.data
        if a.ndim < 2 or b.ndim < 2:
            raise ShapeError("matmul operands must be at least 2-d")
        if a.shape[-1] != b.shape[-2]:
            raise ShapeError(f"matmul shape mismatch {a.shape} @ {b.shape}")

        def back(g):
            ga = g @ np.swapaxes(b, -1, -2)
            gb = np.swapaxes(a, -1, -2) @ g
            return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

        return _node(a @ b, (self, other), back, "matmul")

    def __rmatmul__(self, other):
        return as_tensor(other) @ self

    # -- shape ops ----------------------------------------------------------
    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        old = self.shape
        return _node(self.data.reshape(shape), (self,), lambda g: (g.reshape(old),), "reshape")

    def swapaxes(self, i: int, j: int):
        return _node(np.swapaxes(self.data, i, j), (self,), lambda g: (np.swapaxes(g, i, j),), "swapaxes")

    @property
    def T(self):
        return self.swapaxes(-1, -2)

    def __getitem__(self, idx):
        shape = self.shape
        advanced = _is_advanced(idx)

        def back(g):
            out = np.zeros(shape)
            if advanced:
                np.add.at(out, idx, g)
            else:
                out[idx] += g
            return (out,)

        return _node(self.data[idx], (self,), back, "getitem")

    def sum(self, axis=None, keepdims: bool = False):
        shape = self.shape

        def back(g):
            if axis is not None and not keepdims:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return _node(self.data.sum(axis=axis, keepdims=keepdims), (self,), back, "sum")

    def mean(self, axis=None, keepdims: bool = False):
        n = self.data.size if axis is None else np.prod([self.shape[a] for a in np.atleast_1d(axis)])
        return self.sum(axis=axis, keepdims=keepdims) / float(n)

    # -- elementwise functions ---------------------------------------------
    def exp(self):
        out = np.exp(self.data)
        return _node(out, (self,), lambda g: (g * out,), "exp")

    def log(self):
        a = self.data
        with np.errstate(divide="ignore", invalid="ignore"):
            out = np.log(a)
        return _node(out, (self,), lambda g: (g / a,), "log")

    def sqrt(self):
        out = np.sqrt(self.data)
        return _node(out, (self,), lambda g: (g * 0.5 / out,), "sqrt")

    def tanh(self):
        out = np.tanh(self.data)
        return _node(out, (self,), lambda g: (g * (1.0 - out * out),), "tanh")

    def sigmoid(self):
        out = _sigmoid(self.data)
        return _node(out, (self,), lambda g: (g * out * (1.0 - out),), "sigmoid")

    def relu(self):
        a = self.data
        return _node(np.maximum(a, 0.0), (self,), lambda g: (g * (a > 0),), "relu")

    def abs(self):
        a = self.data
        return _node(np.abs(a), (self,), lambda g: (g * np.sign(a),), "abs")

    def softplus(self):
        a = self.data
        return _node(np.logaddexp(0.0, a), (self,), lambda g: (g * _sigmoid(a),), "softplus")

    def log_sigmoid(self):
        a = self.data
        return _node(-np.logaddexp(0.0, -a), (self,), lambda g: (g * _sigmoid(-a),), "log_sigmoid")

    def logsumexp(self, axis: int = -1):
        a = self.data
        m = np.max(a, axis=axis, keepdims=True)
        m = np.where(np.isfinite(m), m, 0.0)
        s = np.log(np.sum(np.exp(a - m), axis=axis, keepdims=True)) + m

        def back(g):
            return (np.expand_dims(g, axis) * np.exp(a - s),)

        return _node(np.squeeze(s, axis=axis), (self,), back, "logsumexp")


def _is_advanced(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def _sigmoid(a: np.ndarray) -> np.ndarray:
    return np.exp(-np.logaddexp(0.0, -a))


def _node(data, parents, backward, op) -> Tensor:
    if any(p.requires_grad for p in parents):
        return Tensor(data, True, parents, backward, op)
    return Tensor(data)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def param(x) -> Tensor:
    return Tensor(np.array(x, dtype=float), requires_grad=True)


def concat(tensors, axis: int = -1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def back(g):
        return tuple(np.split(g, splits, axis=axis))

    return _node(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors), back, "concat")


def where(mask: np.ndarray, a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    mask = np.asarray(mask, dtype=bool)

    def back(g):
        return _unbroadcast(np.where(mask, g, 0.0), a.shape), _unbroadcast(np.where(mask, 0.0, g), b.shape)

    return _node(np.where(mask, a.data, b.data), (a, b), back, "where")


def topological_order(loss: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack = [(loss, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(node) into ``.grad`` of every recorded leaf."""
    if loss.data.size != 1:
        raise ShapeError("loss must be a scalar")
    order = topological_order(loss)
    for node in order:
        if not np.all(np.isfinite(node.data)):
            raise PoisonedTapeError(f"non-finite value recorded by op {node.op or 'leaf'!r}")
    grads = {id(loss): np.ones_like(loss.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if not parent.requires_grad:
                continue
            key = id(parent)
            grads[key] = pg if key not in grads else grads[key] + pg


def grad(loss: Tensor, params) -> list[np.ndarray]:
    """Gradients of a scalar loss with respect to ``params`` (leaf tensors)."""
    for p in params:
        p.grad = None
    if loss.requires_grad:
        backward(loss)
    elif not np.all(np.isfinite(loss.data)):
        raise PoisonedTapeError("non-finite loss")
    return [np.zeros_like(p.data) if p.grad is None else p.grad for p in params]
