"""Reverse-mode automatic differentiation over numpy arrays.

A `Node` wraps a float64 ndarray and remembers how it was produced, so
that calling `backward()` on a scalar result fills in `grad` for every
node in the graph.  Only the handful of operations the losses actually
need are implemented: elementwise arithmetic, matmul, reductions, a few
nonlinearities and a gather (`take`) whose adjoint is a scatter-add.

Subgradient conventions (they matter for hinge-style losses):
  * relu'(0) = 0, so a hinge sitting exactly on its kink contributes
    nothing to the gradient
  * sqrt'(0) = 0 rather than inf
"""
from __future__ import annotations

import numpy as np


def _unbroadcast(grad: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad.reshape(shape)


class Node:
    """One value in the computation graph."""

    __slots__ = ("value", "grad", "_parents", "_vjp")

    def __init__(self, value, parents=(), vjp=None):
        self.value = np.asarray(value, dtype=np.float64)
        self.grad: np.ndarray | None = None
        self._parents: tuple[Node, ...] = parents
        self._vjp = vjp

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    def item(self) -> float:
        return float(self.value)

    # ---- elementwise arithmetic ------------------------------------

    def __add__(self, other):
        if isinstance(other, Node):
            return Node(
                self.value + other.value,
                (self, other),
                lambda g, a=self, b=other: (
                    _unbroadcast(g, a.shape),
                    _unbroadcast(g, b.shape),
                ),
            )
        c = np.asarray(other, dtype=np.float64)
        return Node(
            self.value + c,
            (self,),
            lambda g, a=self: (_unbroadcast(g, a.shape),),
        )

    __radd__ = __add__

    def __neg__(self):
        return Node(-self.value, (self,), lambda g, a=self: (-g,))

    def __sub__(self, other):
        if isinstance(other, Node):
            return Node(
                self.value - other.value,
                (self, other),
                lambda g, a=self, b=other: (
                    _unbroadcast(g, a.shape),
                    _unbroadcast(-g, b.shape),
                ),
            )
        c = np.asarray(other, dtype=np.float64)
        return Node(
            self.value - c,
            (self,),
            lambda g, a=self: (_unbroadcast(g, a.shape),),
        )

    def __rsub__(self, other):
        c = np.asarray(other, dtype=np.float64)
        return Node(
            c - self.value,
            (self,),
            lambda g, a=self: (_unbroadcast(-g, a.shape),),
        )

    def __mul__(self, other):
        if isinstance(other, Node):
            return Node(
                self.value * other.value,
                (self, other),
                lambda g, a=self, b=other: (
                    _unbroadcast(g * b.value, a.shape),
                    _unbroadcast(g * a.value, b.shape),
                ),
            )
        c = np.asarray(other, dtype=np.float64)
        return Node(
            self.value * c,
            (self,),
            lambda g, a=self, c=c: (_unbroadcast(g * c, a.shape),),
        )

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Node):
            return Node(
                self.value / other.value,
                (self, other),
                lambda g, a=self, b=other: (
                    _unbroadcast(g / b.value, a.shape),
                    _unbroadcast(-g * a.value / (b.value * b.value), b.shape),
                ),
            )
        c = np.asarray(other, dtype=np.float64)
        return Node(
            self.value / c,
            (self,),
            lambda g, a=self, c=c: (_unbroadcast(g / c, a.shape),),
        )

    def __rtruediv__(self, other):
        c = np.asarray(other, dtype=np.float64)
        return Node(
            c / self.value,
            (self,),
            lambda g, a=self, c=c: (
                _unbroadcast(-g * c / (a.value * a.value), a.shape),
            ),
        )

    def __pow__(self, exponent):
        if not isinstance(exponent, (int, float)):
            raise TypeError("only constant exponents are supported")
        n = float(exponent)
        return Node(
            self.value**n,
            (self,),
            lambda g, a=self, n=n: (
                _unbroadcast(g * n * a.value ** (n - 1.0), a.shape),
            ),
        )

    def __matmul__(self, other):
        if not isinstance(other, Node):
            other = Node(other)
        return Node(
            self.value @ other.value,
            (self, other),
            lambda g, a=self, b=other: (g @ b.value.T, a.value.T @ g),
        )

    # ---- nonlinearities --------------------------------------------

    def relu(self) -> "Node":
        mask = self.value > 0.0
        return Node(
            np.where(mask, self.value, 0.0),
            (self,),
            lambda g, mask=mask: (g * mask,),
        )

    def tanh(self) -> "Node":
        t = np.tanh(self.value)
        return Node(t, (self,), lambda g, t=t: (g * (1.0 - t * t),))

    def sqrt(self) -> "Node":
        root = np.sqrt(self.value)
        safe = np.where(root > 0.0, root, 1.0)
        deriv = np.where(root > 0.0, 0.5 / safe, 0.0)
        return Node(root, (self,), lambda g, deriv=deriv: (g * deriv,))

    # ---- reductions and indexing -----------------------------------

    def sum(self, axis=None, keepdims: bool = False) -> "Node":
        out = self.value.sum(axis=axis, keepdims=keepdims)

        def vjp(g, a=self, axis=axis, keepdims=keepdims):
            if axis is None:
                return (np.broadcast_to(g, a.shape).copy(),)
            grad = g if keepdims else np.expand_dims(g, axis)
            return (np.broadcast_to(grad, a.shape).copy(),)

        return Node(out, (self,), vjp)

    def take(self, indices) -> "Node":
        """Gather rows; the adjoint scatter-adds, so repeats accumulate."""
        idx = np.asarray(indices, dtype=np.intp)

        def vjp(g, a=self, idx=idx):
            out = np.zeros(a.shape, dtype=np.float64)
            np.add.at(out, idx, g)
            return (out,)

        return Node(self.value[idx], (self,), vjp)

    # ---- reverse pass ----------------------------------------------

    def backward(self) -> None:
        """Accumulate gradients of this scalar into every graph node."""
        if self.value.size != 1:
            raise ValueError("backward() requires a scalar output")
        topo: list[Node] = []
        seen: set[int] = set()
        stack: list[tuple[Node, bool]] = [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for parent in node._parents:
                if id(parent) not in seen:
                    stack.append((parent, False))
        for node in topo:
            node.grad = None
        self.grad = np.ones_like(self.value)
        for node in reversed(topo):
            if node._vjp is None or node.grad is None:
                continue
            for parent, g in zip(node._parents, node._vjp(node.grad)):
                if parent.grad is None:
                    parent.grad = g
                else:
                    parent.grad = parent.grad + g


def relu(x: Node) -> Node:
    return x.relu()


def hinge(x: Node) -> Node:
    """[x]+ with subgradient 0 at the kink."""
    return x.relu()
