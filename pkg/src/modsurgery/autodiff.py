"""Minimal reverse-mode differentiation tape over float64 numpy arrays.

Covers exactly the operations the backbone needs (dense matmul, broadcasting
add/mul, tanh, relu, reductions, row gather, concat, log-sum-exp pieces).
Gradients are exact; the finite-difference harness in the tests is the oracle.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np


class Tensor:
    __slots__ = ("data", "grad", "_parents", "_backward", "requires_grad")

    def __init__(
        self,
        data: np.ndarray | float,
        parents: tuple["Tensor", ...] = (),
        backward: Callable[[np.ndarray], None] | None = None,
        requires_grad: bool = False,
    ):
        self.data = np.asarray(data, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self._parents = parents
        self._backward = backward
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    def _accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def backward(self) -> None:
        """Run reverse-mode accumulation from this scalar output."""
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar output")
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
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    def item(self) -> float:
        return float(self.data)

    # -- arithmetic -------------------------------------------------------

    def __add__(self, other: "Tensor | float") -> "Tensor":
        other = _as_tensor(other)
        out = Tensor(self.data + other.data, (self, other))

        def backward(g: np.ndarray) -> None:
            if self.requires_grad:
                self._accumulate(_unbroadcast(g, self.data.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g, other.data.shape))

        out._backward = backward
        return out

    def __radd__(self, other: float) -> "Tensor":
        return self.__add__(other)

    def __sub__(self, other: "Tensor | float") -> "Tensor":
        return self + (_as_tensor(other) * -1.0)

    def __rsub__(self, other: float) -> "Tensor":
        return _as_tensor(other) - self

    def __mul__(self, other: "Tensor | float") -> "Tensor":
        other = _as_tensor(other)
        out = Tensor(self.data * other.data, (self, other))

        def backward(g: np.ndarray) -> None:
            if self.requires_grad:
                self._accumulate(_unbroadcast(g * other.data, self.data.shape))
            if other.requires_grad:
                other._accumulate(_unbroadcast(g * self.data, other.data.shape))

        out._backward = backward
        return out

    def __rmul__(self, other: float) -> "Tensor":
        return self.__mul__(other)

    def __truediv__(self, other: float) -> "Tensor":
        return self * (1.0 / float(other))

    def __neg__(self) -> "Tensor":
        return self * -1.0

    def __matmul__(self, other: "Tensor") -> "Tensor":
        out = Tensor(self.data @ other.data, (self, other))

        def backward(g: np.ndarray) -> None:
            if self.requires_grad:
                self._accumulate(g @ other.data.T)
            if other.requires_grad:
                other._accumulate(self.data.T @ g)

        out._backward = backward
        return out

    # -- elementwise ------------------------------------------------------

    def tanh(self) -> "Tensor":
        y = np.tanh(self.data)
        out = Tensor(y, (self,))

        def backward(g: np.ndarray) -> None:
            if self.requires_grad:
                self._accumulate(g * (1.0 - y * y))

        out._backward = backward
        return out

    def relu(self) -> "Tensor":
        out = Tensor(np.maximum(self.data, 0.0), (self,))

        def backward(g: np.ndarray) -> None:
            if self.requires_grad:
                self._accumulate(g * (self.data > 0.0))

        out._backward = backward
        return out

    def exp(self) -> "Tensor":
        y = np.exp(self.data)
        out = Tensor(y, (self,))

        def backward(g: np.ndarray) -> None:
            if self.requires_grad:
                self._accumulate(g * y)

        out._backward = backward
        return out

    def log(self) -> "Tensor":
        out = Tensor(np.log(self.data), (self,))

        def backward(g: np.ndarray) -> None:
            if self.requires_grad:
                self._accumulate(g / self.data)

        out._backward = backward
        return out

    def square(self) -> "Tensor":
        return self * self

    # -- reductions and shaping -------------------------------------------

    def sum(self, axis: int | None = None) -> "Tensor":
        out = Tensor(self.data.sum(axis=axis), (self,))

        def backward(g: np.ndarray) -> None:
            if not self.requires_grad:
                return
            if axis is None:
                self._accumulate(np.broadcast_to(g, self.data.shape).copy())
            else:
                self._accumulate(np.broadcast_to(np.expand_dims(g, axis), self.data.shape).copy())

        out._backward = backward
        return out

    def mean(self, axis: int | None = None) -> "Tensor":
        n = self.data.size if axis is None else self.data.shape[axis]
        return self.sum(axis=axis) / float(n)

    @property
    def T(self) -> "Tensor":
        out = Tensor(self.data.T, (self,))

        def backward(g: np.ndarray) -> None:
            if self.requires_grad:
                self._accumulate(g.T)

        out._backward = backward
        return out

    def take_rows(self, rows: np.ndarray) -> "Tensor":
        """Gather rows (first axis); gradient scatter-adds back."""
        rows = np.asarray(rows, dtype=np.intp)
        out = Tensor(self.data[rows], (self,))

        def backward(g: np.ndarray) -> None:
            if self.requires_grad:
                full = np.zeros_like(self.data)
                np.add.at(full, rows, g)
                self._accumulate(full)

        out._backward = backward
        return out

    def diag(self) -> "Tensor":
        """Diagonal of a square matrix."""
        out = Tensor(np.diagonal(self.data).copy(), (self,))

        def backward(g: np.ndarray) -> None:
            if self.requires_grad:
                full = np.zeros_like(self.data)
                np.fill_diagonal(full, g)
                self._accumulate(full)

        out._backward = backward
        return out

    def expand_rows(self, n: int) -> "Tensor":
        """Broadcast a (1, d) row to (n, d); gradient sums over rows."""
        if self.data.ndim != 2 or self.data.shape[0] != 1:
            raise ValueError("expand_rows expects shape (1, d)")
        out = Tensor(np.broadcast_to(self.data, (n, self.data.shape[1])).copy(), (self,))

        def backward(g: np.ndarray) -> None:
            if self.requires_grad:
                self._accumulate(g.sum(axis=0, keepdims=True))

        out._backward = backward
        return out


def _as_tensor(value: "Tensor | float | np.ndarray") -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum gradient over axes that numpy broadcasting introduced."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g.reshape(shape)


def leaf(data: np.ndarray) -> Tensor:
    """A differentiable leaf sharing `data` (no copy)."""
    t = Tensor(np.asarray(data, dtype=np.float64), requires_grad=True)
    return t


def constant(data: np.ndarray | float) -> Tensor:
    return Tensor(data)


def concat_cols(parts: Sequence[Tensor]) -> Tensor:
    """Concatenate 2-D tensors along axis 1; gradient splits back."""
    datas = [p.data for p in parts]
    widths = [d.shape[1] for d in datas]
    out = Tensor(np.concatenate(datas, axis=1), tuple(parts))
    offsets = np.cumsum([0] + widths)

    def backward(g: np.ndarray) -> None:
        for part, lo, hi in zip(parts, offsets[:-1], offsets[1:]):
            if part.requires_grad:
                part._accumulate(g[:, lo:hi])

    out._backward = backward
    return out


def logsumexp_rows(t: Tensor) -> Tensor:
    """Row-wise log(sum(exp(.))) with the usual max shift for stability.

    The shift is a constant under differentiation, so gradients are exact.
    """
    shift = t.data.max(axis=1, keepdims=True)
    shifted = t + Tensor(-shift)
    return shifted.exp().sum(axis=1).log() + Tensor(shift[:, 0])
