"""Define-by-run tensors and reverse-mode differentiation."""
from __future__ import annotations

import itertools
from contextlib import contextmanager
from dataclasses import dataclass, field

import numpy as np

DTYPE = np.float64

_ids = itertools.count()
_grad_enabled = True


class NonFiniteError(FloatingPointError):
    """Raised when a tensor would hold NaN or Inf."""


class ShapeError(ValueError):
    pass


def check_finite(arr, where):
    if not np.isfinite(arr).all():
        raise NonFiniteError(f"{where}: non-finite values")


class Tensor:
    """Dense float64 array that can participate in a computation graph.

    Leaves are created directly; interior tensors are produced by
    ``instrexec.tensor.ops`` and remember the primitive that made them.
    """

    __slots__ = ("data", "requires_grad", "grad", "parents", "op", "saved", "attrs", "id")

    def __init__(self, data, requires_grad=False):
        arr = np.array(data, dtype=DTYPE)
        check_finite(arr, "tensor")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self.parents = ()
        self.op = None
        self.saved = None
        self.attrs = None
        self.id = next(_ids)

    @property
    def shape(self):
        return self.data.shape

    @property
    def size(self):
        return self.data.size

    @property
    def is_leaf(self):
        return self.op is None

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    # operator sugar; imported lazily to avoid a cycle
    def __add__(self, other):
        from . import ops
        return ops.add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from . import ops
        return ops.sub(self, other)

    def __rsub__(self, other):
        from . import ops
        return ops.sub(other, self)

    def __mul__(self, other):
        from . import ops
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def grad_enabled():
    return _grad_enabled


@contextmanager
def no_grad():
    """Skip graph construction inside the block (rollouts, evaluation)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


@dataclass
class GraphNode:
    op: str
    inputs: list
    output: Tensor


@dataclass
class Graph:
    """Op records reachable from an output, in topological (creation) order."""

    nodes: list = field(default_factory=list)
    leaves: list = field(default_factory=list)

    @classmethod
    def trace(cls, output):
        seen = set()
        interior, leaves = [], []
        stack = [output]
        while stack:
            t = stack.pop()
            if t.id in seen:
                continue
            seen.add(t.id)
            if t.op is None:
                if t.requires_grad:
                    leaves.append(t)
                continue
            interior.append(t)
            stack.extend(t.parents)
        interior.sort(key=lambda t: t.id)
        leaves.sort(key=lambda t: t.id)
        nodes = [GraphNode(t.op, [p.id for p in t.parents], t) for t in interior]
        return cls(nodes, leaves)


def backward(loss, leaves=None):
    """Propagate d(loss)/d(.) to every requires-grad leaf.

    Returns a dict mapping each leaf tensor to its gradient array.  Leaves
    passed in ``leaves`` but not reachable from ``loss`` get zeros.
    """
    from .ops import RULES

    if loss.size != 1:
        raise ShapeError(f"backward: loss must be scalar, got shape {loss.shape}")
    graph = Graph.trace(loss)
    grads = {loss.id: np.ones_like(loss.data)}
    for node in reversed(graph.nodes):
        t = node.output
        g = grads.pop(t.id, None)
        if g is None:
            continue
        in_grads = RULES[t.op].backward(t, g)
        for parent, pg in zip(t.parents, in_grads):
            if pg is None or not parent.requires_grad:
                continue
            if parent.id in grads:
                grads[parent.id] = grads[parent.id] + pg
            else:
                grads[parent.id] = pg
    result = {}
    for leaf in graph.leaves:
        g = grads.get(leaf.id)
        leaf.grad = np.zeros_like(leaf.data) if g is None else np.asarray(g, dtype=DTYPE).reshape(leaf.shape)
        result[leaf] = leaf.grad
    for leaf in leaves or ():
        if leaf not in result:
            leaf.grad = np.zeros_like(leaf.data)
            result[leaf] = leaf.grad
    return result
