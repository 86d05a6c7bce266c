"""Minimal reverse-mode automatic differentiation on dense float64 arrays.

The op set is exactly what the learned dynamics and loss require: affine
layers, tanh, concatenation, elementwise add/mul, scaling by a Python
scalar, gather/scatter-add along an axis, full sum, absolute value and
reshape.  Graphs are built define-by-run; backward() walks a deterministic
topological order, so gradient accumulation has a fixed reduction order and
repeated runs are bit-identical.  Every op traps NaN/Inf in its output.
"""

from __future__ import annotations

import numpy as np

from .errors import GraphNotRecorded, NonFiniteOutput, ShapeMismatch


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _vjp=None):
        arr = np.asarray(data, dtype=np.float64)
        if not np.isfinite(arr).all():
            raise NonFiniteOutput("tensor contains NaN or Inf")
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._vjp = _vjp

    @property
    def shape(self):
        return self.data.shape

    def item(self) -> float:
        return float(self.data)

    def backward(self):
        backward(self)

    # arithmetic sugar used by the ODE solver's stage combinations
    def __add__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, scale(other, -1.0))

    def __neg__(self):
        return scale(self, -1.0)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, grad={self.requires_grad})"


def constant(data) -> Tensor:
    return data if isinstance(data, Tensor) else Tensor(data)


def parameter(data) -> Tensor:
    return Tensor(np.array(data, dtype=np.float64), requires_grad=True)


def _op(data, parents, vjp) -> Tensor:
    requires = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=requires,
                  _parents=tuple(parents) if requires else (),
                  _vjp=vjp if requires else None)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeMismatch(f"add: {a.data.shape} vs {b.data.shape}")
    return _op(a.data + b.data, (a, b), lambda g: (g, g))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.shape != b.data.shape:
        raise ShapeMismatch(f"mul: {a.data.shape} vs {b.data.shape}")
    return _op(a.data * b.data, (a, b),
               lambda g: (g * b.data, g * a.data))


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _op(a.data * c, (a,), lambda g: (g * c,))


def affine(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """x @ w.T + b with x of shape (B, in), w of shape (out, in), b (out,)."""
    if x.data.ndim != 2 or w.data.ndim != 2 or b.data.ndim != 1:
        raise ShapeMismatch("affine expects x (B,in), w (out,in), b (out,)")
    if x.data.shape[1] != w.data.shape[1] or w.data.shape[0] != b.data.shape[0]:
        raise ShapeMismatch(
            f"affine: x {x.data.shape}, w {w.data.shape}, b {b.data.shape}")

    def vjp(g):
        return g @ w.data, g.T @ x.data, g.sum(axis=0)

    return _op(x.data @ w.data.T + b.data, (x, w, b), vjp)


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _op(out, (a,), lambda g: (g * (1.0 - out * out),))


def concat(parts: list[Tensor], axis: int = 1) -> Tensor:
    widths = [p.data.shape[axis] for p in parts]
    splits = np.cumsum(widths)[:-1]

    def vjp(g):
        return tuple(np.split(g, splits, axis=axis))

    return _op(np.concatenate([p.data for p in parts], axis=axis), parts, vjp)


def gather(a: Tensor, idx, axis: int = 0) -> Tensor:
    """Index-select rows (axis 0) or columns (axis 1)."""
    idx = np.asarray(idx, dtype=np.int64)

    def vjp(g):
        out = np.zeros_like(a.data)
        if axis == 0:
            np.add.at(out, idx, g)
        else:
            np.add.at(out.T, idx, g.swapaxes(0, axis))
        return (out,)

    return _op(np.take(a.data, idx, axis=axis), (a,), vjp)


def scatter_add(a: Tensor, idx, size: int, axis: int = 0) -> Tensor:
    """Sum rows of `a` into a zero array of `size` rows at positions `idx`."""
    idx = np.asarray(idx, dtype=np.int64)
    if idx.shape[0] != a.data.shape[axis]:
        raise ShapeMismatch(f"scatter_add: {idx.shape[0]} indices for "
                            f"axis of extent {a.data.shape[axis]}")
    shape = list(a.data.shape)
    shape[axis] = size
    out = np.zeros(shape)
    if axis == 0:
        np.add.at(out, idx, a.data)
    else:
        np.add.at(out.T, idx, a.data.swapaxes(0, axis))
    return _op(out, (a,), lambda g: (np.take(g, idx, axis=axis),))


def sum_all(a: Tensor) -> Tensor:
    return _op(a.data.sum(), (a,),
               lambda g: (np.full(a.data.shape, float(g)),))


def absolute(a: Tensor) -> Tensor:
    # subgradient 0 at exactly 0 via np.sign
    return _op(np.abs(a.data), (a,), lambda g: (g * np.sign(a.data),))


def reshape(a: Tensor, shape) -> Tensor:
    orig = a.data.shape
    return _op(a.data.reshape(shape), (a,), lambda g: (g.reshape(orig),))


def backward(out: Tensor) -> None:
    """Accumulate gradients of a scalar output into every reachable leaf."""
    if out.data.size != 1:
        raise ShapeMismatch(f"backward needs a scalar, got shape {out.data.shape}")
    if not out.requires_grad:
        raise GraphNotRecorded("output does not depend on any parameter")

    # iterative topological sort; traversal order is fixed by graph structure
    topo: list[Tensor] = []
    state: dict[int, int] = {}
    stack: list[Tensor] = [out]
    while stack:
        node = stack[-1]
        nid = id(node)
        if state.get(nid, 0) == 0:
            state[nid] = 1
            for p in node._parents:
                if p.requires_grad and state.get(id(p), 0) == 0:
                    stack.append(p)
        else:
            stack.pop()
            if state[nid] == 1:
                state[nid] = 2
                topo.append(node)

    grads: dict[int, np.ndarray] = {id(out): np.ones_like(out.data)}
    for node in reversed(topo):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._vjp is None:
            node.grad = g if node.grad is None else node.grad + g
            continue
        for p, pg in zip(node._parents, node._vjp(g)):
            if not p.requires_grad or pg is None:
                continue
            pid = id(p)
            if pid in grads:
                grads[pid] = grads[pid] + pg
            else:
                grads[pid] = pg


def zero_grads(params) -> None:
    for p in params:
        p.grad = None
