"""Reverse-mode differentiation over numpy arrays.

Each op returns a :class:`Variable` that remembers its parents and a closure
mapping the upstream gradient to one gradient per parent. ``backward`` walks
the recorded graph once, in reverse topological order, and frees it.
"""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .ndtensor import ShapeError

BackwardFn = Callable[[np.ndarray], Sequence["np.ndarray | None"]]


class Variable:
    __slots__ = ("data", "grad", "requires_grad", "name", "_parents", "_backward", "_consumed")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data)
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self.name = name
        self._parents: tuple[Variable, ...] = ()
        self._backward: BackwardFn | None = None
        self._consumed = False

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def __repr__(self) -> str:
        label = f" {self.name!r}" if self.name else ""
        return f"Variable{label}(shape={self.shape}, dtype={self.dtype})"

    def accumulate(self, g: np.ndarray) -> None:
        if self.grad is None:
            self.grad = np.array(g, dtype=self.data.dtype, copy=True)
        else:
            self.grad += g

    def backward(self, upstream: np.ndarray | None = None) -> None:
        if self._consumed:
            raise RuntimeError("backward called on a graph that was already consumed; run the forward pass again")
        if not self.requires_grad:
            raise RuntimeError("backward without a recorded forward pass (no input requires grad)")
        if upstream is None:
            if self.data.size != 1:
                raise ShapeError("upstream gradient required for non-scalar output")
            upstream = np.ones_like(self.data)
        upstream = np.asarray(upstream, dtype=self.data.dtype)
        if upstream.shape != self.data.shape:
            raise ShapeError(f"upstream gradient shape {upstream.shape} != output shape {self.data.shape}")

        order = _topo_order(self)
        grads: dict[int, np.ndarray] = {id(self): upstream}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if node._consumed:
                raise RuntimeError("graph shares nodes with an already-consumed backward pass")
            if node._backward is None:
                if g is not None:
                    node.accumulate(g)
                continue
            if g is not None:
                if g.shape != node.data.shape:
                    raise ShapeError(f"gradient shape drift: {g.shape} vs {node.data.shape}")
                pgrads = node._backward(g)
                for p, pg in zip(node._parents, pgrads):
                    if pg is None or not p.requires_grad:
                        continue
                    k = id(p)
                    grads[k] = pg if k not in grads else grads[k] + pg
            node._backward = None
            node._parents = ()
            node._consumed = True

    # operator sugar
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

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)


def _topo_order(root: Variable) -> list[Variable]:
    order: list[Variable] = []
    seen: set[int] = set()
    stack: list[tuple[Variable, bool]] = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    return order


def as_variable(x, dtype=None) -> Variable:
    if isinstance(x, Variable):
        return x
    arr = np.asarray(x, dtype=dtype)
    return Variable(arr)


def make_op(data: np.ndarray, parents: Sequence[Variable], backward: BackwardFn) -> Variable:
    """Wrap ``data`` as an op output, recording the graph only when needed."""
    rg = any(p.requires_grad for p in parents)
    out = Variable(data, requires_grad=rg)
    if rg:
        out._parents = tuple(parents)
        out._backward = backward
    return out


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    """Sum ``g`` down to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _pair(a, b):
    if isinstance(a, Variable):
        dtype = a.dtype
    elif isinstance(b, Variable):
        dtype = b.dtype
    else:
        dtype = None
    return as_variable(a, dtype), as_variable(b, dtype)


def add(a, b) -> Variable:
    a, b = _pair(a, b)

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(g, b.shape)

    return make_op(a.data + b.data, (a, b), backward)


def sub(a, b) -> Variable:
    a, b = _pair(a, b)

    def backward(g):
        return unbroadcast(g, a.shape), unbroadcast(-g, b.shape)

    return make_op(a.data - b.data, (a, b), backward)


def mul(a, b) -> Variable:
    a, b = _pair(a, b)

    def backward(g):
        ga = unbroadcast(g * b.data, a.shape) if a.requires_grad else None
        gb = unbroadcast(g * a.data, b.shape) if b.requires_grad else None
        return ga, gb

    return make_op(a.data * b.data, (a, b), backward)


def matmul(a: Variable, b: Variable) -> Variable:
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} x {b.shape}")

    def backward(g):
        ga = g @ b.data.T if a.requires_grad else None
        gb = a.data.T @ g if b.requires_grad else None
        return ga, gb

    return make_op(a.data @ b.data, (a, b), backward)


def reshape(x: Variable, shape) -> Variable:
    src = x.shape

    def backward(g):
        return (g.reshape(src),)

    return make_op(x.data.reshape(shape), (x,), backward)


def transpose(x: Variable, axes) -> Variable:
    inv = np.argsort(axes)

    def backward(g):
        return (np.transpose(g, inv),)

    return make_op(np.ascontiguousarray(np.transpose(x.data, axes)), (x,), backward)


def concat(xs: Sequence[Variable], axis: int) -> Variable:
    xs = list(xs)
    sizes = [x.shape[axis] for x in xs]
    cuts = np.cumsum(sizes)[:-1]

    def backward(g):
        return tuple(np.split(g, cuts, axis=axis))

    return make_op(np.concatenate([x.data for x in xs], axis=axis), xs, backward)


def stack(xs: Sequence[Variable], axis: int) -> Variable:
    xs = list(xs)

    def backward(g):
        return tuple(np.take(g, i, axis=axis) for i in range(len(xs)))

    return make_op(np.stack([x.data for x in xs], axis=axis), xs, backward)


def take(x: Variable, index: int, axis: int) -> Variable:
    """Select one slice along ``axis`` (the axis is dropped)."""

    def backward(g):
        full = np.zeros_like(x.data)
        sl = [slice(None)] * x.data.ndim
        sl[axis] = index
        full[tuple(sl)] = g
        return (full,)

    return make_op(np.take(x.data, index, axis=axis), (x,), backward)


def mean(x: Variable, axis) -> Variable:
    axes = (axis,) if isinstance(axis, int) else tuple(axis)
    axes = tuple(a % x.data.ndim for a in axes)
    count = int(np.prod([x.shape[a] for a in axes]))

    def backward(g):
        return (np.broadcast_to(np.expand_dims(g, axes), x.shape) / count,)

    return make_op(x.data.mean(axis=axes), (x,), backward)


def total(x: Variable) -> Variable:
    def backward(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    return make_op(x.data.sum(), (x,), backward)


def relu(x: Variable) -> Variable:
    mask = x.data > 0

    def backward(g):
        return (g * mask,)

    return make_op(x.data * mask, (x,), backward)


def _sigmoid(a: np.ndarray) -> np.ndarray:
    # 0.5 * (1 + tanh(a/2)) never overflows
    return 0.5 * (1.0 + np.tanh(0.5 * a))


def sigmoid(x: Variable) -> Variable:
    y = _sigmoid(x.data)

    def backward(g):
        return (g * y * (1.0 - y),)

    return make_op(y, (x,), backward)


def tanh(x: Variable) -> Variable:
    y = np.tanh(x.data)

    def backward(g):
        return (g * (1.0 - y * y),)

    return make_op(y, (x,), backward)
