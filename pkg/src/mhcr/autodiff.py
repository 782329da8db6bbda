"""Minimal reverse-mode automatic differentiation over numpy arrays.

The model's training graph is a fixed composition of matrix products,
sparse-dense products, gathers, row normalization, and log/exp pointwise
maps, so a small tensor engine is enough: each op records its parents and
a closure that maps the upstream gradient to parent gradients. Gradients
accumulate by summation during a reverse topological sweep.

All data is float64. Sparse operands (scipy CSR) are constants of the
graph; gradients flow only through dense tensors.
"""

from __future__ import annotations

from typing import Callable, Iterable, Sequence

import numpy as np
import scipy.sparse as sp
from scipy.special import expit

from .errors import ShapeError

Array = np.ndarray


class Tensor:
    """A numpy array plus the bookkeeping needed for backpropagation."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: Array | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable[[Array], Sequence[Array | None]] | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def zero_grad(self) -> None:
        self.grad = None

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, grad={self.requires_grad})"

    def __neg__(self):
        return scale(self, -1.0)

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, scale(as_tensor(other), -1.0))

    def __rsub__(self, other):
        return add(as_tensor(other), scale(self, -1.0))

    def __mul__(self, other):
        if isinstance(other, (int, float)):
            return scale(self, float(other))
        return mul(self, other)

    __rmul__ = __mul__

    def __matmul__(self, other):
        return matmul(self, other)

    def sum(self, axis: int | None = None, keepdims: bool = False) -> "Tensor":
        return tensor_sum(self, axis=axis, keepdims=keepdims)

    def mean(self) -> "Tensor":
        return mean(self)

    def backward(self) -> None:
        """Accumulate d(self)/d(leaf) into .grad of every reachable tensor."""
        if self.data.size != 1:
            raise ShapeError("backward() requires a scalar output")
        order: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                order.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                stack.append((parent, False))

        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is None or node.grad is None:
                continue
            for parent, grad in zip(node._parents, node._backward(node.grad)):
                if grad is None or not parent.requires_grad:
                    continue
                if parent.grad is None:
                    # closures may hand back views of the upstream gradient;
                    # copying keeps every .grad buffer exclusively owned
                    parent.grad = np.array(grad)
                else:
                    parent.grad += grad


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def constant(value) -> Tensor:
    return Tensor(value, requires_grad=False)


def zeros(shape: tuple[int, ...]) -> Tensor:
    return Tensor(np.zeros(shape))


def _node(data: Array, parents: tuple[Tensor, ...], backward) -> Tensor:
    out = Tensor(data)
    if any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def _unbroadcast(grad: Array, shape: tuple[int, ...]) -> Array:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data + b.data

    def backward(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _node(data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    data = a.data * b.data

    def backward(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _node(data, (a, b), backward)


def scale(a: Tensor, c: float) -> Tensor:
    data = a.data * c

    def backward(g):
        return (g * c,)

    return _node(data, (a,), backward)


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim != 2 or b.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")
    data = a.data @ b.data

    def backward(g):
        return g @ b.data.T, a.data.T @ g

    return _node(data, (a, b), backward)


def spmm(matrix: sp.spmatrix, x) -> Tensor:
    """Sparse @ dense where the sparse factor is a constant of the graph."""
    x = as_tensor(x)
    if x.ndim != 2:
        raise ShapeError(f"spmm expects a 2-D dense operand, got {x.shape}")
    if matrix.shape[1] != x.shape[0]:
        raise ShapeError(f"spmm shape mismatch: {matrix.shape} @ {x.shape}")
    data = matrix @ x.data

    def backward(g):
        return (matrix.T @ g,)

    return _node(data, (x,), backward)


def transpose(a: Tensor) -> Tensor:
    data = a.data.T

    def backward(g):
        return (g.T,)

    return _node(data, (a,), backward)


def gather_rows(a: Tensor, indices) -> Tensor:
    indices = np.asarray(indices, dtype=np.int64)
    data = a.data[indices]

    def backward(g):
        out = np.zeros_like(a.data)
        np.add.at(out, indices, g)
        return (out,)

    return _node(data, (a,), backward)


def concat_rows(parts: Iterable[Tensor]) -> Tensor:
    parts = tuple(as_tensor(p) for p in parts)
    data = np.concatenate([p.data for p in parts], axis=0)
    offsets = np.cumsum([p.shape[0] for p in parts])[:-1]

    def backward(g):
        return tuple(np.split(g, offsets, axis=0))

    return _node(data, parts, backward)


def tensor_sum(a: Tensor, axis: int | None = None, keepdims: bool = False) -> Tensor:
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def backward(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return _node(data, (a,), backward)


def mean(a: Tensor) -> Tensor:
    n = a.data.size
    data = a.data.mean()

    def backward(g):
        return (np.full(a.shape, float(g) / n),)

    return _node(data, (a,), backward)


def exp(a: Tensor) -> Tensor:
    data = np.exp(a.data)

    def backward(g):
        return (g * data,)

    return _node(data, (a,), backward)


def log(a: Tensor) -> Tensor:
    data = np.log(a.data)

    def backward(g):
        return (g / a.data,)

    return _node(data, (a,), backward)


def softplus(a: Tensor) -> Tensor:
    """ln(1 + e^x), computed without overflow; gradient is the logistic map."""
    data = np.logaddexp(0.0, a.data)

    def backward(g):
        return (g * expit(a.data),)

    return _node(data, (a,), backward)


def row_normalize(a: Tensor, eps: float = 1e-12) -> Tensor:
    """L2-normalize each row; all-zero rows map to zero."""
    norms = np.linalg.norm(a.data, axis=1, keepdims=True)
    safe = np.maximum(norms, eps)
    data = a.data / safe

    def backward(g):
        inner = (g * data).sum(axis=1, keepdims=True)
        return ((g - data * inner) / safe,)

    return _node(data, (a,), backward)


def row_dot(a: Tensor, b: Tensor) -> Tensor:
    """Per-row inner products of two equal-shape matrices, returned as (n,)."""
    if a.shape != b.shape:
        raise ShapeError(f"row_dot shape mismatch: {a.shape} vs {b.shape}")
    return tensor_sum(mul(a, b), axis=1)
