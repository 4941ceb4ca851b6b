"""Reverse-mode automatic differentiation on float64 numpy arrays.

The engine records a tape of operations and computes vector-Jacobian
products by walking the tape backwards.  Every backward rule is itself
written in terms of tape operations, so calling :func:`grad` with
``create_graph=True`` records the gradient computation and makes
gradients-of-gradients available.  That double-backward path is what the
energy-based training objective needs: the loss contains the input
gradient of the energy network, and optimizing it requires
differentiating through that gradient.

Only the operations the planner's networks use are implemented: dense
matmul against a 2-D weight, tanh, broadcasting add/mul, reductions,
reshape/concat/slicing, and gather/scatter along the leading axis.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Iterable, Sequence

import numpy as np

__all__ = [
    "Tensor",
    "as_tensor",
    "constant",
    "grad",
    "no_grad",
    "set_debug_checks",
    "add",
    "mul",
    "neg",
    "matmul",
    "tanh",
    "tsum",
    "sorted_sum",
    "amax",
    "reshape",
    "transpose2d",
    "concat",
    "take",
    "scatter_add",
]

_RECORDING = True
_DEBUG_CHECKS = False


def set_debug_checks(enabled: bool) -> None:
    """Enable per-operation finiteness checks (slow; meant for tests)."""
    global _DEBUG_CHECKS
    _DEBUG_CHECKS = bool(enabled)


@contextlib.contextmanager
def no_grad():
    """Context manager that suspends tape recording."""
    global _RECORDING
    prev = _RECORDING
    _RECORDING = False
    try:
        yield
    finally:
        _RECORDING = prev


class _TapeNode:
    """Backward record: parent tensors plus the vjp rule of one op.

    The vjp callable receives the cotangent of the node's output and a
    per-parent boolean mask; it returns one cotangent (or None) per
    parent, and may skip the work for unrequested parents entirely.
    Because vjp bodies use tape operations, running them while recording
    is enabled builds the graph needed for second-order gradients.
    """

    __slots__ = ("parents", "vjp")

    def __init__(self, parents: tuple["Tensor", ...], vjp: Callable):
        self.parents = parents
        self.vjp = vjp


class Tensor:
    """A float64 array with optional gradient tracking."""

    __slots__ = ("data", "requires_grad", "node")

    def __init__(self, data, requires_grad: bool = False):
        arr = np.asarray(data, dtype=np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.node: _TapeNode | None = None

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    # Arithmetic sugar; all routing through module-level ops.
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __sub__(self, other):
        return add(self, neg(as_tensor(other)))

    def __rsub__(self, other):
        return add(as_tensor(other), neg(self))

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division only supported by python scalars")
        return mul(self, 1.0 / float(other))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def constant(x) -> Tensor:
    """A tensor that never tracks gradients (inputs, masks, data)."""
    return Tensor(x, requires_grad=False)


def _make(data: np.ndarray, parents: tuple[Tensor, ...], vjp: Callable) -> Tensor:
    if _DEBUG_CHECKS and not np.all(np.isfinite(data)):
        raise FloatingPointError("non-finite value produced by a tape operation")
    out = Tensor(data)
    if _RECORDING and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out.node = _TapeNode(parents, vjp)
    return out


def _unbroadcast(g: Tensor, shape: tuple[int, ...]) -> Tensor:
    """Reduce a cotangent back to ``shape`` after numpy broadcasting."""
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = tsum(g, axis=tuple(range(extra)), keepdims=False)
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = tsum(g, axis=axes, keepdims=True)
    if g.shape != shape:
        g = reshape(g, shape)
    return g


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g: Tensor, needed):
        return (
            _unbroadcast(g, a.shape) if needed[0] else None,
            _unbroadcast(g, b.shape) if needed[1] else None,
        )

    return _make(a.data + b.data, (a, b), vjp)


def neg(a) -> Tensor:
    a = as_tensor(a)

    def vjp(g: Tensor, needed):
        return (neg(g),)

    return _make(-a.data, (a,), vjp)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)

    def vjp(g: Tensor, needed):
        return (
            _unbroadcast(mul(g, b), a.shape) if needed[0] else None,
            _unbroadcast(mul(g, a), b.shape) if needed[1] else None,
        )

    return _make(a.data * b.data, (a, b), vjp)


def matmul(x, w) -> Tensor:
    """``x @ w`` with ``w`` 2-D; ``x`` may carry arbitrary leading dims."""
    x, w = as_tensor(x), as_tensor(w)
    if w.ndim != 2:
        raise ValueError("matmul expects a 2-D right operand")
    k, n = w.shape

    def vjp(g: Tensor, needed):
        gx = matmul(g, transpose2d(w)) if needed[0] else None
        gw = None
        if needed[1]:
            x2 = reshape(x, (-1, k))
            g2 = reshape(g, (-1, n))
            gw = matmul(transpose2d(x2), g2)
        return gx, gw

    return _make(x.data @ w.data, (x, w), vjp)


def transpose2d(a) -> Tensor:
    a = as_tensor(a)
    if a.ndim != 2:
        raise ValueError("transpose2d expects a 2-D tensor")

    def vjp(g: Tensor, needed):
        return (transpose2d(g),)

    return _make(a.data.T.copy(), (a,), vjp)


def tanh(a) -> Tensor:
    a = as_tensor(a)
    y = np.tanh(a.data)

    def vjp(g: Tensor, needed):
        return (mul(g, constant(1.0) - mul(out, out)),)

    out = _make(y, (a,), vjp)
    return out


def broadcast_to(a, shape: tuple[int, ...]) -> Tensor:
    """Broadcast to ``shape`` (numpy rules); the forward result is a
    read-only view, which every op tolerates since none mutate inputs."""
    a = as_tensor(a)
    in_shape = a.shape

    def vjp(g: Tensor, needed):
        return (_unbroadcast(g, in_shape),)

    return _make(np.broadcast_to(a.data, shape), (a,), vjp)


def _expand_reduced(g: Tensor, shape: tuple[int, ...], axis, keepdims: bool) -> Tensor:
    """Broadcast a reduced cotangent back to the pre-reduction shape."""
    if not keepdims:
        if axis is None:
            kshape = (1,) * len(shape)
        else:
            axes = axis if isinstance(axis, tuple) else (axis,)
            axes = tuple(a % len(shape) for a in axes)
            kshape = tuple(1 if i in axes else n for i, n in enumerate(shape))
        g = reshape(g, kshape)
    return broadcast_to(g, shape)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)

    def vjp(g: Tensor, needed):
        return (_expand_reduced(g, a.shape, axis, keepdims),)

    return _make(np.sum(a.data, axis=axis, keepdims=keepdims), (a,), vjp)


def sorted_sum(a, axis: int) -> Tensor:
    """Sum along ``axis`` after sorting values.

    Mathematically identical to :func:`tsum`, but the fixed summation
    order makes the result bit-identical under any permutation of the
    inputs along ``axis`` — required for exact permutation invariance of
    the pooled cloud encoder.
    """
    a = as_tensor(a)

    def vjp(g: Tensor, needed):
        return (_expand_reduced(g, a.shape, axis, False),)

    return _make(np.sum(np.sort(a.data, axis=axis), axis=axis), (a,), vjp)


def amax(a, axis: int) -> Tensor:
    a = as_tensor(a)
    m = np.max(a.data, axis=axis)
    kshape = list(a.shape)
    kshape[axis] = 1

    def vjp(g: Tensor, needed):
        # One-hot at the first maximum, built lazily: the mask is large
        # and most amax calls never get differentiated.
        idx = np.expand_dims(np.argmax(a.data, axis=axis), axis)
        coeff = np.zeros(a.shape)
        np.put_along_axis(coeff, idx, 1.0, axis=axis)
        return (mul(reshape(g, tuple(kshape)), constant(coeff)),)

    return _make(m, (a,), vjp)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)

    def vjp(g: Tensor, needed):
        return (reshape(g, a.shape),)

    return _make(a.data.reshape(shape), (a,), vjp)


def concat(parts: Sequence, axis: int = 0) -> Tensor:
    parts = [as_tensor(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    offsets = np.cumsum([0] + sizes)

    def vjp(g: Tensor, needed):
        outs = []
        for i, (p, lo, hi) in enumerate(zip(parts, offsets[:-1], offsets[1:])):
            if not needed[i]:
                outs.append(None)
                continue
            key = [slice(None)] * g.ndim
            key[axis] = slice(int(lo), int(hi))
            outs.append(getitem(g, tuple(key)))
        return tuple(outs)

    return _make(np.concatenate([p.data for p in parts], axis=axis), tuple(parts), vjp)


def getitem(a, key) -> Tensor:
    a = as_tensor(a)

    def vjp(g: Tensor, needed):
        return (_scatter_slice(g, key, a.shape),)

    return _make(a.data[key].copy(), (a,), vjp)


def _scatter_slice(g: Tensor, key, shape: tuple[int, ...]) -> Tensor:
    """Place ``g`` into a zero tensor of ``shape`` at ``key`` (vjp of getitem)."""

    def vjp(gg: Tensor, needed):
        return (getitem(gg, key),)

    data = np.zeros(shape)
    data[key] = g.data
    return _make(data, (g,), vjp)


def take(a, indices: np.ndarray) -> Tensor:
    """Gather rows of ``a`` along axis 0 by an integer index array."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.intp)

    def vjp(g: Tensor, needed):
        return (scatter_add(g, idx, a.shape),)

    return _make(a.data[idx].copy(), (a,), vjp)


def scatter_add(g, indices: np.ndarray, shape: tuple[int, ...]) -> Tensor:
    """Accumulate rows of ``g`` into a zero tensor at ``indices`` (vjp of take)."""
    g = as_tensor(g)
    idx = np.asarray(indices, dtype=np.intp)

    def vjp(gg: Tensor, needed):
        return (take(gg, idx),)

    data = np.zeros(shape)
    np.add.at(data, idx, g.data)
    return _make(data, (g,), vjp)


def _topo_order(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
    while stack:
        t, expanded = stack.pop()
        if expanded:
            order.append(t)
            continue
        if id(t) in seen or t.node is None:
            continue
        seen.add(id(t))
        stack.append((t, True))
        for p in t.node.parents:
            if p.node is not None and id(p) not in seen:
                stack.append((p, False))
    return order


def grad(
    output: Tensor,
    wrt: Iterable[Tensor],
    create_graph: bool = False,
) -> list[Tensor]:
    """Gradients of a scalar ``output`` with respect to ``wrt`` tensors.

    Inputs that the output does not depend on receive zero gradients
    (that is a documented convention, not an error).  With
    ``create_graph=True`` the returned gradients are themselves
    differentiable, enabling second-order optimization objectives.

    Cotangents are only propagated along paths that can reach a ``wrt``
    tensor, so e.g. an input-gradient query never pays for weight
    gradients.
    """
    wrt = list(wrt)
    if output.size != 1:
        raise ValueError("grad expects a scalar output")
    if not np.isfinite(output.data).all():
        raise FloatingPointError("non-finite value in differentiated output")

    order = _topo_order(output)
    wrt_ids = {id(w) for w in wrt}
    # needed[t] == True when t is a wrt tensor or some wrt is reachable
    # through its parents; order lists parents before consumers.
    needed: dict[int, bool] = {}

    def is_needed(t: Tensor) -> bool:
        got = needed.get(id(t))
        if got is not None:
            return got
        if id(t) in wrt_ids:
            needed[id(t)] = True
            return True
        needed[id(t)] = False
        return False

    for t in order:
        if id(t) in wrt_ids:
            needed[id(t)] = True
            continue
        needed[id(t)] = any(
            p.requires_grad and is_needed(p) for p in t.node.parents
        )

    global _RECORDING
    prev = _RECORDING
    _RECORDING = bool(create_graph)
    try:
        cot: dict[int, Tensor] = {id(output): Tensor(np.ones_like(output.data))}
        for t in reversed(order):
            g = cot.get(id(t))
            if g is None or t.node is None:
                continue
            parents = t.node.parents
            mask = tuple(p.requires_grad and is_needed(p) for p in parents)
            if not any(mask):
                continue
            parent_grads = t.node.vjp(g, mask)
            for p, pg, m in zip(parents, parent_grads, mask):
                if pg is None or not m:
                    continue
                held = cot.get(id(p))
                cot[id(p)] = pg if held is None else add(held, pg)
    finally:
        _RECORDING = prev

    out: list[Tensor] = []
    for w in wrt:
        g = cot.get(id(w))
        if g is None:
            g = Tensor(np.zeros_like(w.data))
        if not np.all(np.isfinite(g.data)):
            raise FloatingPointError("non-finite gradient")
        out.append(g)
    return out
