"""Tensor and tape for the reverse-mode engine.

Operations only record onto a tape while a :class:`Graph` is active::

    with Graph() as g:
        loss = ops.cross_entropy(model(x), y)
        g.backward(loss)

Outside of a graph every op is evaluated eagerly without bookkeeping, which
is how frozen models are run for evaluation.
"""

from __future__ import annotations

import numpy as np


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    """Raised whenever an op produces NaN or Inf."""

    def __init__(self, kind, where="forward"):
        super().__init__(f"non-finite value produced by {kind} ({where})")
        self.kind = kind
        self.where = where


class GraphError(RuntimeError):
    pass


def _as_array(data, dtype=None):
    if isinstance(data, Tensor):
        data = data.data
    if dtype is not None:
        return np.array(data, dtype=dtype)
    arr = np.asarray(data)
    if arr.dtype in (np.float32, np.float64):
        return arr.copy()
    return arr.astype(np.float32)


class Tensor:
    """Dense real array with an optional gradient slot."""

    __slots__ = ("data", "requires_grad", "grad", "_node", "name")

    def __init__(self, data, requires_grad=False, dtype=None, name=None):
        arr = _as_array(data, dtype)
        if arr.dtype not in (np.float32, np.float64):
            raise TypeError(f"tensor data must be real, got {arr.dtype}")
        if not np.isfinite(arr).all():
            raise NonFiniteError("tensor construction")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad = None
        self._node = None
        self.name = name

    @classmethod
    def _wrap(cls, arr, requires_grad):
        t = cls.__new__(cls)
        t.data = arr
        t.requires_grad = requires_grad
        t.grad = None
        t._node = None
        t.name = None
        return t

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def is_leaf(self):
        return self._node is None

    def numpy(self):
        return self.data

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else _raise_not_scalar(self)

    def detach(self):
        return Tensor._wrap(self.data, False)

    def zero_grad(self):
        self.grad = None

    def __repr__(self):
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{flag})"

    # operator sugar; the implementations live in ops
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
        if isinstance(other, (int, float)):
            return ops.scale(self, other)
        return ops.mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from . import ops
        return ops.scale(self, -1.0)

    def __matmul__(self, other):
        from . import ops
        return ops.matmul(self, other)

    def __getitem__(self, index):
        from . import ops
        return ops.slice(self, index)


def _raise_not_scalar(t):
    raise ShapeError(f"item() needs a single-element tensor, got shape {t.shape}")


class Node:
    __slots__ = ("kind", "inputs", "output", "backward_fn", "index", "graph")

    def __init__(self, kind, inputs, output, backward_fn, index, graph):
        self.kind = kind
        self.inputs = inputs
        self.output = output
        self.backward_fn = backward_fn
        self.index = index
        self.graph = graph


_GRAPH_STACK: list = []


def current_graph():
    return _GRAPH_STACK[-1] if _GRAPH_STACK else None


class Graph:
    """Append-only tape; nodes are stored in creation (= topological) order."""

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _GRAPH_STACK.append(self)
        return self

    def __exit__(self, *exc):
        popped = _GRAPH_STACK.pop()
        assert popped is self
        return False

    def __len__(self):
        return len(self.nodes)

    def record(self, kind, inputs, output, backward_fn):
        node = Node(kind, inputs, output, backward_fn, len(self.nodes), self)
        self.nodes.append(node)
        output._node = node
        return node

    def backward(self, loss):
        return backward(loss, self)


def record(kind, inputs, out, backward_fn):
    """Wrap ``out`` in a Tensor and put it on the active tape if needed.

    ``backward_fn(grad_out)`` must return one gradient (or None) per input.
    """
    if not np.isfinite(out).all():
        raise NonFiniteError(kind)
    graph = current_graph()
    needs = graph is not None and any(t.requires_grad for t in inputs)
    result = Tensor._wrap(out, needs)
    if needs:
        graph.record(kind, inputs, result, backward_fn)
    return result


def backward(loss, graph):
    """Reverse sweep from a scalar ``loss``.

    Sets ``.grad`` on every leaf with ``requires_grad`` that the loss depends
    on and returns those leaves. Intermediate gradients are discarded.
    """
    if loss.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    node = loss._node
    if node is None or node.graph is not graph:
        raise GraphError("loss was not produced by this graph")

    grads = {id(loss): np.ones_like(loss.data)}
    leaves = {}
    for node in reversed(graph.nodes[: node.index + 1]):
        g_out = grads.pop(id(node.output), None)
        if g_out is None:
            continue
        in_grads = node.backward_fn(g_out)
        for inp, g in zip(node.inputs, in_grads):
            if g is None or not inp.requires_grad:
                continue
            if g.shape != inp.shape:
                raise ShapeError(f"{node.kind} backward produced {g.shape} for input {inp.shape}")
            if not np.isfinite(g).all():
                raise NonFiniteError(node.kind, "backward")
            key = id(inp)
            if key in grads:
                grads[key] = grads[key] + g
            else:
                grads[key] = g
            if inp._node is None:
                leaves[key] = inp

    for key, leaf in leaves.items():
        leaf.grad = grads[key].astype(leaf.data.dtype, copy=False)
    return list(leaves.values())
