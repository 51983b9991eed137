"""Reverse-mode automatic differentiation over dense float64 arrays.

A tape-free graph of `Node` objects is built by calling the primitive ops
below; `backward(loss)` then walks the graph in reverse topological order
and accumulates gradients into every reachable node that requires them.
Values are numpy float64 arrays of at most 3 axes.  Kernels are
single-threaded and bitwise deterministic for fixed inputs.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible for an op."""


class NumericError(ArithmeticError):
    """Raised when a non-finite value reaches a place that forbids it."""


def _as_value(x) -> np.ndarray:
    a = np.asarray(x, dtype=np.float64)
    if a.ndim > 3:
        raise ShapeError(f"arrays are limited to 3 axes, got shape {a.shape}")
    return a


class Node:
    """One value in the computation graph plus its local backward rule."""

    __slots__ = ("value", "grad", "_parents", "_backward", "requires_grad")

    def __init__(self, value, parents=(), backward=None, requires_grad=None):
        self.value = _as_value(value)
        self.grad = None
        self._parents = tuple(parents)
        self._backward = backward
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in self._parents)
        self.requires_grad = requires_grad

    @property
    def shape(self):
        return self.value.shape

    def __repr__(self):
        return f"Node(shape={self.value.shape}, requires_grad={self.requires_grad})"

    # operator sugar; ndarray/scalar operands are wrapped as constants
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

    def __matmul__(self, other):
        return matmul(self, other)

    def __neg__(self):
        return neg(self)


def constant(x) -> Node:
    return Node(x, requires_grad=False)


def parameter(x) -> Node:
    return Node(x, requires_grad=True)


def _wrap(x) -> Node:
    return x if isinstance(x, Node) else constant(x)


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum `grad` down to `shape`, undoing numpy broadcasting."""
    if grad.shape == shape:
        return grad
    extra = grad.ndim - len(shape)
    if extra > 0:
        grad = grad.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and grad.shape[i] != 1)
    if axes:
        grad = grad.sum(axis=axes, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# primitive ops


def add(a, b) -> Node:
    a, b = _wrap(a), _wrap(b)
    out = a.value + b.value

    def bwd(g, needs):
        return (
            _unbroadcast(g, a.value.shape) if needs[0] else None,
            _unbroadcast(g, b.value.shape) if needs[1] else None,
        )

    return Node(out, (a, b), bwd)


def sub(a, b) -> Node:
    a, b = _wrap(a), _wrap(b)
    out = a.value - b.value

    def bwd(g, needs):
        return (
            _unbroadcast(g, a.value.shape) if needs[0] else None,
            _unbroadcast(-g, b.value.shape) if needs[1] else None,
        )

    return Node(out, (a, b), bwd)


def neg(a) -> Node:
    a = _wrap(a)
    return Node(-a.value, (a,), lambda g, needs: (-g,))


def mul(a, b) -> Node:
    a, b = _wrap(a), _wrap(b)
    out = a.value * b.value

    def bwd(g, needs):
        return (
            _unbroadcast(g * b.value, a.value.shape) if needs[0] else None,
            _unbroadcast(g * a.value, b.value.shape) if needs[1] else None,
        )

    return Node(out, (a, b), bwd)


def _swap(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


def matmul(a, b) -> Node:
    a, b = _wrap(a), _wrap(b)
    av, bv = a.value, b.value
    if av.ndim < 2 or bv.ndim < 2:
        raise ShapeError(f"matmul needs 2D/3D operands, got {av.shape} @ {bv.shape}")
    if av.shape[-1] != bv.shape[-2]:
        raise ShapeError(f"matmul inner dims differ: {av.shape} @ {bv.shape}")
    if av.ndim == 3 and bv.ndim == 3 and av.shape[0] != bv.shape[0]:
        raise ShapeError(f"matmul batch dims differ: {av.shape} @ {bv.shape}")
    out = av @ bv

    def bwd(g, needs):
        da = db = None
        if needs[0]:
            da = g @ _swap(bv)
            if da.ndim > av.ndim:
                da = da.sum(axis=0)
        if needs[1]:
            if av.ndim == 3 and bv.ndim == 2:
                # shared right operand: contract the batch and row axes at once
                k, n = bv.shape
                db = av.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                db = _swap(av) @ g
        return (da, db)

    return Node(out, (a, b), bwd)


def concat(nodes, axis: int) -> Node:
    nodes = [_wrap(n) for n in nodes]
    if not nodes:
        raise ShapeError("concat of zero nodes")
    out = np.concatenate([n.value for n in nodes], axis=axis)
    sizes = [n.value.shape[axis] for n in nodes]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g, needs):
        pieces = np.split(g, splits, axis=axis)
        return tuple(p if need else None for p, need in zip(pieces, needs))

    return Node(out, tuple(nodes), bwd)


def row_softmax(x) -> Node:
    """Softmax along the last axis; numerically stable."""
    x = _wrap(x)
    out = _kernels.softmax_lastaxis(x.value)

    def bwd(g, needs):
        return (_kernels.softmax_lastaxis_bwd(out, g),)

    return Node(out, (x,), bwd)


def tanh(x) -> Node:
    x = _wrap(x)
    out = np.tanh(x.value)

    def bwd(g, needs):
        return (g * (1.0 - out * out),)

    return Node(out, (x,), bwd)


def relu(x) -> Node:
    x = _wrap(x)
    out = np.maximum(x.value, 0.0)

    def bwd(g, needs):
        return (g * (x.value > 0.0),)

    return Node(out, (x,), bwd)


def leaky_relu(x, slope: float = 0.2) -> Node:
    x = _wrap(x)
    out = _kernels.leaky_relu(x.value, slope)

    def bwd(g, needs):
        return (_kernels.leaky_relu_bwd(x.value, g, slope),)

    return Node(out, (x,), bwd)


def exp(x) -> Node:
    x = _wrap(x)
    out = np.exp(x.value)

    def bwd(g, needs):
        return (g * out,)

    return Node(out, (x,), bwd)


def log(x) -> Node:
    x = _wrap(x)
    out = np.log(x.value)

    def bwd(g, needs):
        return (g / x.value,)

    return Node(out, (x,), bwd)


def square(x) -> Node:
    x = _wrap(x)

    def bwd(g, needs):
        return (g * (2.0 * x.value),)

    return Node(x.value * x.value, (x,), bwd)


def sum_(x, axis=None, keepdims: bool = False) -> Node:
    x = _wrap(x)
    out = x.value.sum(axis=axis, keepdims=keepdims)

    def bwd(g, needs):
        if axis is None:
            return (np.broadcast_to(g, x.value.shape).copy(),)
        ge = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(ge, x.value.shape).copy(),)

    return Node(out, (x,), bwd)


def mean(x, axis=None, keepdims: bool = False) -> Node:
    x = _wrap(x)
    if axis is None:
        count = x.value.size
    else:
        count = x.value.shape[axis]
    out = x.value.mean(axis=axis, keepdims=keepdims)

    def bwd(g, needs):
        scale = 1.0 / count
        if axis is None:
            return (np.broadcast_to(g * scale, x.value.shape).copy(),)
        ge = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(ge * scale, x.value.shape).copy(),)

    return Node(out, (x,), bwd)


def masked_fill(x, mask: np.ndarray, value: float) -> Node:
    """Replace entries where `mask` is True with `value` (constant mask)."""
    x = _wrap(x)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != x.value.shape:
        raise ShapeError(f"mask shape {mask.shape} != value shape {x.value.shape}")
    out = np.where(mask, value, x.value)

    def bwd(g, needs):
        return (np.where(mask, 0.0, g),)

    return Node(out, (x,), bwd)


def transpose(x) -> Node:
    """Swap the last two axes."""
    x = _wrap(x)
    if x.value.ndim < 2:
        raise ShapeError(f"transpose needs >=2 axes, got shape {x.value.shape}")

    def bwd(g, needs):
        return (_swap(g),)

    return Node(_swap(x.value), (x,), bwd)


def reshape(x, shape) -> Node:
    x = _wrap(x)
    out = x.value.reshape(shape)

    def bwd(g, needs):
        return (g.reshape(x.value.shape),)

    return Node(out, (x,), bwd)


def gather_rows(x, idx) -> Node:
    """Select rows along axis 0; repeated indices accumulate on backward."""
    x = _wrap(x)
    idx = np.asarray(idx, dtype=np.intp)
    out = x.value[idx]

    def bwd(g, needs):
        dx = np.zeros_like(x.value)
        np.add.at(dx, idx, g)
        return (dx,)

    return Node(out, (x,), bwd)


# ---------------------------------------------------------------------------
# backward pass


def _topo_order(root: Node) -> list:
    """Parents-before-children order over the subgraph that requires grad."""
    order, visited, stack = [], set(), [(root, False)]
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
            if p.requires_grad and id(p) not in visited:
                stack.append((p, False))
    return order


def backward(loss: Node) -> None:
    """Accumulate gradients of a scalar `loss` into all reachable nodes."""
    if loss.value.size != 1:
        raise ShapeError(f"backward requires a scalar loss, got shape {loss.value.shape}")
    order = _topo_order(loss)
    for n in order:
        n.grad = None
    loss.grad = np.ones_like(loss.value)
    for node in reversed(order):
        if node._backward is None or node.grad is None:
            continue
        needs = tuple(p.requires_grad for p in node._parents)
        contribs = node._backward(node.grad, needs)
        for p, g in zip(node._parents, contribs):
            if g is None or not p.requires_grad:
                continue
            p.grad = g if p.grad is None else p.grad + g


# ---------------------------------------------------------------------------
# Adam optimizer


@dataclass
class AdamState:
    """Moment accumulators for Adam; shapes mirror the parameter dict."""

    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


def adam_step(params: dict, grads: dict, state: AdamState, lr: float):
    """One Adam update with bias correction, in place on `params`."""
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1 ** state.step
    c2 = 1.0 - b2 ** state.step
    for name, p in params.items():
        g = grads[name]
        if g is None:
            continue
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for parameter '{name}'")
        if name not in state.m:
            state.m[name] = np.zeros_like(p)
            state.v[name] = np.zeros_like(p)
        m, v = state.m[name], state.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * (g * g)
        p -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return params, state


# ---------------------------------------------------------------------------
# gradient checking


@dataclass
class GradcheckReport:
    """Per-parameter max relative error of reverse-mode vs central differences."""

    max_rel_err: dict
    tol: float

    @property
    def ok(self) -> bool:
        return all(e <= self.tol for e in self.max_rel_err.values())

    def failures(self) -> dict:
        return {k: e for k, e in self.max_rel_err.items() if e > self.tol}


def gradcheck(make_loss, params: dict, h: float = 1e-5, tol: float = 1e-4) -> GradcheckReport:
    """Compare reverse-mode gradients of `make_loss(params)` to central differences.

    `make_loss` must be a deterministic closure taking a dict of Nodes and
    returning a scalar Node.  Every entry of every parameter is perturbed.
    """
    nodes = {k: parameter(v.copy()) for k, v in params.items()}
    loss = make_loss(nodes)
    backward(loss)
    analytic = {
        k: (n.grad if n.grad is not None else np.zeros_like(n.value))
        for k, n in nodes.items()
    }

    work = {k: v.copy() for k, v in params.items()}

    def eval_loss() -> float:
        wrapped = {k: parameter(v) for k, v in work.items()}
        return float(make_loss(wrapped).value)

    errs = {}
    for name, arr in work.items():
        flat = arr.reshape(-1)
        worst = 0.0
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = eval_loss()
            flat[i] = orig - h
            down = eval_loss()
            flat[i] = orig
            numeric = (up - down) / (2.0 * h)
            a = analytic[name].reshape(-1)[i]
            denom = max(1.0, abs(a), abs(numeric))
            worst = max(worst, abs(a - numeric) / denom)
        errs[name] = worst
    return GradcheckReport(max_rel_err=errs, tol=tol)
