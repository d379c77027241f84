"""Minimal reverse-mode automatic differentiation over numpy arrays.

Just enough ops for a small residual MLP rolled out over action
segments and squared-distance losses on its endpoints: linear maps,
bias adds, tanh, concatenation, subtraction, squared norms, and scalar
combination. Graphs are built eagerly; ``backward`` walks the tape in
reverse topological order and accumulates vector-Jacobian products.
"""

from __future__ import annotations

import numpy as np


class NonFiniteGraphError(ValueError):
    """A recorded computation contains NaN or infinite intermediates."""


class Tensor:
    __slots__ = ("value", "grad", "parents", "vjps")

    def __init__(self, value, parents=(), vjps=()):
        self.value = np.asarray(value, dtype=np.float64)
        self.parents = parents
        self.vjps = vjps
        self.grad = None

    @property
    def shape(self):
        return self.value.shape

    def detach(self) -> "Tensor":
        """A new leaf with the same value; gradient flow stops here."""
        return Tensor(self.value.copy())

    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)


def constant(value) -> Tensor:
    return Tensor(value)


def add(a: Tensor, b: Tensor) -> Tensor:
    return Tensor(a.value + b.value, (a, b), (lambda g: g, lambda g: g))


def sub(a: Tensor, b: Tensor) -> Tensor:
    return Tensor(a.value - b.value, (a, b), (lambda g: g, lambda g: -g))


def scale(a: Tensor, c: float) -> Tensor:
    return Tensor(a.value * c, (a,), (lambda g: g * c,))


def matmul(w: Tensor, x: Tensor) -> Tensor:
    """w @ x for a 2D weight and a 1D or 2D operand."""
    wv, xv = w.value, x.value
    if xv.ndim == 1:
        vjp_w = lambda g: np.outer(g, xv)
        vjp_x = lambda g: wv.T @ g
    else:
        vjp_w = lambda g: g @ xv.T
        vjp_x = lambda g: wv.T @ g
    return Tensor(wv @ xv, (w, x), (vjp_w, vjp_x))


def bias_add(x: Tensor, b: Tensor) -> Tensor:
    """Add a 1D bias to a vector or to every column of a matrix."""
    if x.value.ndim == 2:
        return Tensor(
            x.value + b.value[:, None],
            (x, b),
            (lambda g: g, lambda g: g.sum(axis=1)),
        )
    return Tensor(x.value + b.value, (x, b), (lambda g: g, lambda g: g))


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.value)
    return Tensor(out, (a,), (lambda g: g * (1.0 - out * out),))


def concat(a: Tensor, b: Tensor) -> Tensor:
    """Stack two 1D vectors, or two matrices along their first axis."""
    n = a.value.shape[0]
    return Tensor(
        np.concatenate([a.value, b.value], axis=0),
        (a, b),
        (lambda g: g[:n], lambda g: g[n:]),
    )


def sumsq(a: Tensor) -> Tensor:
    """Sum of squared entries, as a scalar tensor."""
    return Tensor(np.sum(a.value * a.value), (a,), (lambda g: 2.0 * g * a.value,))


def _topo_order(root: Tensor) -> list[Tensor]:
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
        for p in node.parents:
            if id(p) not in seen:
                stack.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(node) into ``grad`` for every node in the graph.

    The loss must be scalar. Raises NonFiniteGraphError if any recorded
    intermediate is NaN or infinite.
    """
    if loss.value.shape != ():
        raise ValueError(f"backward expects a scalar loss, got shape {loss.value.shape}")
    order = _topo_order(loss)
    for node in order:
        if not np.all(np.isfinite(node.value)):
            raise NonFiniteGraphError("non-finite intermediate value in recorded graph")
        node.grad = None
    loss.grad = np.asarray(1.0)
    for node in reversed(order):
        if node.grad is None:
            continue
        for parent, vjp in zip(node.parents, node.vjps):
            contrib = vjp(node.grad)
            if parent.grad is None:
                parent.grad = np.array(contrib, dtype=np.float64, copy=True)
            else:
                parent.grad += contrib


def grad_or_zeros(t: Tensor) -> np.ndarray:
    """The accumulated gradient, or zeros when no path reached the node."""
    if t.grad is None:
        return np.zeros_like(t.value)
    return t.grad
