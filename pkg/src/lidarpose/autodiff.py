"""Minimal reverse-mode automatic differentiation over float64 arrays.

A Tensor wraps an ndarray value plus a gradient slot and remembers how it was
produced.  Ops (see nn.py) build the graph eagerly; backward_from seeds one or
more output tensors with upstream gradients and runs a single reverse
topological sweep, accumulating into every reachable node.  Multiple roots in
one call make multi-term objectives (and multi-scene batches) a single
backward pass.

Every constructed value is checked for NaN/Inf so a numerical blow-up fails
loudly at the op that produced it instead of corrupting the whole run.
"""

from __future__ import annotations

import numpy as np


class NonFiniteError(FloatingPointError):
    """An op produced NaN or Inf; the message names the offending node."""


class Tensor:
    __slots__ = ("value", "grad", "name", "_parents", "_backward")

    def __init__(self, value, parents=(), backward=None, name: str = ""):
        self.value = np.asarray(value, dtype=np.float64)
        if not np.all(np.isfinite(self.value)):
            raise NonFiniteError(f"non-finite values in {name or 'tensor'}")
        self.grad = None
        self.name = name
        self._parents = tuple(parents)
        self._backward = backward

    @property
    def shape(self):
        return self.value.shape

    @property
    def size(self) -> int:
        return self.value.size

    def ensure_grad(self) -> np.ndarray:
        if self.grad is None:
            self.grad = np.zeros_like(self.value)
        return self.grad

    def __repr__(self):
        return f"Tensor(name={self.name!r}, shape={self.value.shape})"


def _topological_order(roots) -> list[Tensor]:
    """All nodes reachable from roots, parents before children."""
    order: list[Tensor] = []
    visited: set[int] = set()
    # Iterative DFS; (node, expanded) entries avoid recursion limits on
    # deep chains.
    stack = [(r, False) for r in roots]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in visited:
            continue
        visited.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in visited:
                stack.append((p, False))
    return order


def backward_from(seeds: list[tuple[Tensor, np.ndarray]]) -> None:
    """Backpropagate from (tensor, upstream_gradient) pairs.

    Gradients of every node reachable from the seeds are reset before the
    sweep, then accumulated in reverse topological order.  Repeating a tensor
    across seeds adds its contributions.
    """
    roots = [t for t, _ in seeds]
    order = _topological_order(roots)
    for node in order:
        node.grad = np.zeros_like(node.value)
    for tensor, grad in seeds:
        grad = np.asarray(grad, dtype=np.float64)
        if grad.shape != tensor.value.shape:
            raise ValueError(
                f"seed gradient shape {grad.shape} does not match tensor "
                f"{tensor.name!r} shape {tensor.value.shape}"
            )
        tensor.grad += grad
    for node in reversed(order):
        if node._backward is not None:
            node._backward(node)
