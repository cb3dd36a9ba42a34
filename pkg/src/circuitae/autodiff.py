"""Minimal reverse-mode automatic differentiation over dense numpy arrays.

Values are float64 throughout.  Broadcasting is deliberately restricted to
scalar-vs-array; anything else must go through an explicit ``broadcast_to``.
Graphs are built per forward pass and discarded after ``backward``.
"""

from __future__ import annotations

import numpy as np

DTYPE = np.float64


class AutodiffError(ValueError):
    """Raised on shape mismatches and domain violations inside ops."""


def _as_value(x) -> np.ndarray:
    return np.asarray(x, dtype=DTYPE)


class Node:
    """A value in the computation graph with optional gradient state."""

    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, value, requires_grad=False, parents=(), backward=None):
        self.value = _as_value(value)
        self.grad = None
        self.requires_grad = bool(requires_grad) or any(
            p.requires_grad for p in parents
        )
        # parents/backward are dropped for leaves so they can be kept around
        # across training steps without pinning old graphs.
        self._parents = tuple(parents) if self.requires_grad else ()
        self._backward = backward if self.requires_grad else None

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad = None

    def accumulate_grad(self, g):
        g = _as_value(g)
        if g.shape != self.value.shape:
            raise AutodiffError(
                f"gradient shape {g.shape} != value shape {self.value.shape}"
            )
        if self.grad is None:
            self.grad = g.copy()
        else:
            self.grad = self.grad + g

    # -- operator sugar -------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(constant(other), self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(constant(other), self)

    def __neg__(self):
        return neg(self)

    def __repr__(self):
        return f"Node(shape={self.value.shape}, requires_grad={self.requires_grad})"


def constant(x) -> Node:
    return x if isinstance(x, Node) else Node(x, requires_grad=False)


def parameter(x) -> Node:
    return Node(x, requires_grad=True)


def _check_elementwise(a: np.ndarray, b: np.ndarray):
    if a.shape == b.shape or a.ndim == 0 or b.ndim == 0:
        return
    raise AutodiffError(
        f"elementwise op needs equal shapes or a scalar, got {a.shape} vs {b.shape}"
    )


def _reduce_to_shape(g: np.ndarray, shape) -> np.ndarray:
    """Sum a gradient down to ``shape`` (undoes scalar broadcasting)."""
    if g.shape == tuple(shape):
        return g
    return np.sum(g).reshape(shape) if len(shape) == 0 else np.broadcast_to(
        np.sum(g), shape
    )


# -- elementwise binary ops --------------------------------------------


def add(a, b) -> Node:
    a, b = constant(a), constant(b)
    _check_elementwise(a.value, b.value)
    out = Node(a.value + b.value, parents=(a, b))

    def _bw(g):
        if a.requires_grad:
            a.accumulate_grad(_reduce_to_shape(g, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_reduce_to_shape(g, b.shape))

    out._backward = _bw if out.requires_grad else None
    return out


def sub(a, b) -> Node:
    a, b = constant(a), constant(b)
    _check_elementwise(a.value, b.value)
    out = Node(a.value - b.value, parents=(a, b))

    def _bw(g):
        if a.requires_grad:
            a.accumulate_grad(_reduce_to_shape(g, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_reduce_to_shape(-g, b.shape))

    out._backward = _bw if out.requires_grad else None
    return out


def mul(a, b) -> Node:
    a, b = constant(a), constant(b)
    _check_elementwise(a.value, b.value)
    out = Node(a.value * b.value, parents=(a, b))

    def _bw(g):
        if a.requires_grad:
            a.accumulate_grad(_reduce_to_shape(g * b.value, a.shape))
        if b.requires_grad:
            b.accumulate_grad(_reduce_to_shape(g * a.value, b.shape))

    out._backward = _bw if out.requires_grad else None
    return out


def div(a, b) -> Node:
    a, b = constant(a), constant(b)
    _check_elementwise(a.value, b.value)
    out = Node(a.value / b.value, parents=(a, b))

    def _bw(g):
        if a.requires_grad:
            a.accumulate_grad(_reduce_to_shape(g / b.value, a.shape))
        if b.requires_grad:
            b.accumulate_grad(
                _reduce_to_shape(-g * a.value / (b.value * b.value), b.shape)
            )

    out._backward = _bw if out.requires_grad else None
    return out


# -- elementwise unary ops ---------------------------------------------


def neg(a) -> Node:
    a = constant(a)
    out = Node(-a.value, parents=(a,))

    def _bw(g):
        a.accumulate_grad(-g)

    out._backward = _bw if out.requires_grad else None
    return out


def exp(a) -> Node:
    a = constant(a)
    v = np.exp(a.value)
    out = Node(v, parents=(a,))

    def _bw(g):
        a.accumulate_grad(g * v)

    out._backward = _bw if out.requires_grad else None
    return out


def log(a) -> Node:
    a = constant(a)
    if np.any(a.value <= 0.0):
        raise AutodiffError("log of non-positive value")
    out = Node(np.log(a.value), parents=(a,))

    def _bw(g):
        a.accumulate_grad(g / a.value)

    out._backward = _bw if out.requires_grad else None
    return out


def maximum(a, lo: float) -> Node:
    """Elementwise max with a constant (relu is ``maximum(x, 0.0)``)."""
    a = constant(a)
    lo = float(lo)
    mask = (a.value > lo).astype(DTYPE)
    out = Node(np.maximum(a.value, lo), parents=(a,))

    def _bw(g):
        a.accumulate_grad(g * mask)

    out._backward = _bw if out.requires_grad else None
    return out


def sigmoid(a) -> Node:
    a = constant(a)
    v = np.where(
        a.value >= 0,
        1.0 / (1.0 + np.exp(-np.abs(a.value))),
        np.exp(-np.abs(a.value)) / (1.0 + np.exp(-np.abs(a.value))),
    )
    out = Node(v, parents=(a,))

    def _bw(g):
        a.accumulate_grad(g * v * (1.0 - v))

    out._backward = _bw if out.requires_grad else None
    return out


def softplus(a) -> Node:
    """log(1 + exp(a)), computed without overflow."""
    a = constant(a)
    v = np.maximum(a.value, 0.0) + np.log1p(np.exp(-np.abs(a.value)))
    out = Node(v, parents=(a,))

    def _bw(g):
        s = np.where(
            a.value >= 0,
            1.0 / (1.0 + np.exp(-np.abs(a.value))),
            np.exp(-np.abs(a.value)) / (1.0 + np.exp(-np.abs(a.value))),
        )
        a.accumulate_grad(g * s)

    out._backward = _bw if out.requires_grad else None
    return out


def square(a) -> Node:
    return mul(a, a)


# -- shape ops ----------------------------------------------------------


def broadcast_to(a, shape) -> Node:
    a = constant(a)
    shape = tuple(shape)
    v = np.broadcast_to(a.value, shape)
    # which output axes were expanded relative to a.shape
    in_shape = a.value.shape
    pad = len(shape) - len(in_shape)
    if pad < 0:
        raise AutodiffError(f"cannot broadcast {in_shape} to {shape}")
    expanded = tuple(range(pad)) + tuple(
        pad + i for i, d in enumerate(in_shape) if d == 1 and shape[pad + i] != 1
    )
    out = Node(np.array(v), parents=(a,))

    def _bw(g):
        red = np.sum(g, axis=expanded, keepdims=False) if expanded else g
        a.accumulate_grad(red.reshape(in_shape))

    out._backward = _bw if out.requires_grad else None
    return out


def reshape(a, shape) -> Node:
    a = constant(a)
    shape = tuple(shape)
    out = Node(a.value.reshape(shape), parents=(a,))

    def _bw(g):
        a.accumulate_grad(g.reshape(a.value.shape))

    out._backward = _bw if out.requires_grad else None
    return out


def stack(nodes, axis: int = 0) -> Node:
    nodes = [constant(n) for n in nodes]
    out = Node(np.stack([n.value for n in nodes], axis=axis), parents=tuple(nodes))

    def _bw(g):
        slabs = np.moveaxis(g, axis, 0)
        for n, slab in zip(nodes, slabs):
            if n.requires_grad:
                n.accumulate_grad(slab)

    out._backward = _bw if out.requires_grad else None
    return out


def concat(nodes, axis: int = 0) -> Node:
    nodes = [constant(n) for n in nodes]
    sizes = [n.value.shape[axis] for n in nodes]
    out = Node(
        np.concatenate([n.value for n in nodes], axis=axis), parents=tuple(nodes)
    )

    def _bw(g):
        offs = np.cumsum([0] + sizes)
        for n, lo, hi in zip(nodes, offs[:-1], offs[1:]):
            if n.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                n.accumulate_grad(g[tuple(idx)])

    out._backward = _bw if out.requires_grad else None
    return out


def detach(a) -> Node:
    """Same value, no parents; blocks all gradient flow."""
    a = constant(a)
    return Node(a.value.copy(), requires_grad=False)


# -- reductions ---------------------------------------------------------


def _norm_axis(a: np.ndarray, axis):
    if axis is None:
        return None
    axis = int(axis)
    if axis < -a.ndim or axis >= a.ndim:
        raise AutodiffError(f"axis {axis} invalid for shape {a.shape}")
    axis = axis % a.ndim
    if a.shape[axis] == 0:
        raise AutodiffError("reduction over empty axis")
    return axis


def reduce_sum(a, axis=None) -> Node:
    a = constant(a)
    if axis is None and a.value.size == 0:
        raise AutodiffError("reduction over empty array")
    ax = _norm_axis(a.value, axis)
    out = Node(np.sum(a.value, axis=ax), parents=(a,))

    def _bw(g):
        if ax is None:
            a.accumulate_grad(np.broadcast_to(g, a.value.shape).copy())
        else:
            a.accumulate_grad(
                np.broadcast_to(np.expand_dims(g, ax), a.value.shape).copy()
            )

    out._backward = _bw if out.requires_grad else None
    return out


def reduce_mean(a, axis=None) -> Node:
    a = constant(a)
    n = a.value.size if axis is None else a.value.shape[_norm_axis(a.value, axis)]
    if n == 0:
        raise AutodiffError("reduction over empty axis")
    return mul(reduce_sum(a, axis=axis), 1.0 / n)


def logsumexp(a, axis=None) -> Node:
    """Stable log-sum-exp with max shift; -inf entries are handled."""
    a = constant(a)
    ax = _norm_axis(a.value, axis)
    if ax is None and a.value.size == 0:
        raise AutodiffError("reduction over empty array")
    m = np.max(a.value, axis=ax, keepdims=True)
    m_safe = np.where(np.isfinite(m), m, 0.0)
    e = np.exp(a.value - m_safe)
    s = np.sum(e, axis=ax, keepdims=True)
    with np.errstate(divide="ignore"):
        v = np.where(s > 0, np.log(np.where(s > 0, s, 1.0)) + m_safe, -np.inf)
    v = v.reshape(np.sum(a.value, axis=ax).shape)
    out = Node(v, parents=(a,))

    def _bw(g):
        w = np.where(s > 0, e / np.where(s > 0, s, 1.0), 0.0)
        if ax is None:
            a.accumulate_grad(g * w)
        else:
            a.accumulate_grad(np.expand_dims(g, ax) * w)

    out._backward = _bw if out.requires_grad else None
    return out


def reduce_max(a, axis=None) -> Node:
    """Max reduction; ties route gradient to the lowest index."""
    a = constant(a)
    ax = _norm_axis(a.value, axis)
    if ax is None:
        flat_idx = int(np.argmax(a.value))
        out = Node(a.value.flat[flat_idx], parents=(a,))

        def _bw(g):
            ga = np.zeros_like(a.value)
            ga.flat[flat_idx] = g
            a.accumulate_grad(ga)

    else:
        idx = np.argmax(a.value, axis=ax)
        out = Node(np.max(a.value, axis=ax), parents=(a,))

        def _bw(g):
            ga = np.zeros_like(a.value)
            np.put_along_axis(
                ga, np.expand_dims(idx, ax), np.expand_dims(g, ax), axis=ax
            )
            a.accumulate_grad(ga)

    out._backward = _bw if out.requires_grad else None
    return out


def argmax(a, axis=None) -> np.ndarray:
    """Plain argmax of a node's value (non-differentiable, lowest index wins)."""
    return np.argmax(constant(a).value, axis=axis)


# -- linear algebra -----------------------------------------------------


def matmul(a, b) -> Node:
    a, b = constant(a), constant(b)
    if a.value.ndim != 2 or b.value.ndim != 2 or a.value.shape[1] != b.value.shape[0]:
        raise AutodiffError(
            f"matmul shape mismatch: {a.value.shape} @ {b.value.shape}"
        )
    out = Node(a.value @ b.value, parents=(a, b))

    def _bw(g):
        if a.requires_grad:
            a.accumulate_grad(g @ b.value.T)
        if b.requires_grad:
            b.accumulate_grad(a.value.T @ g)

    out._backward = _bw if out.requires_grad else None
    return out


def conv_transpose2d(x, k, stride: int) -> Node:
    """Transposed 2-D convolution.

    x: (B, Cin, H, W), k: (Cin, Cout, KH, KW), output
    (B, Cout, (H-1)*stride+KH, (W-1)*stride+KW).
    """
    x, k = constant(x), constant(k)
    if x.value.ndim != 4 or k.value.ndim != 4:
        raise AutodiffError("conv_transpose2d expects 4-d input and kernel")
    B, Cin, H, W = x.value.shape
    Kin, Cout, KH, KW = k.value.shape
    if Kin != Cin:
        raise AutodiffError(
            f"conv_transpose2d channel mismatch: input {Cin}, kernel {Kin}"
        )
    s = int(stride)
    Ho, Wo = (H - 1) * s + KH, (W - 1) * s + KW
    if KH > Ho or KW > Wo:
        raise AutodiffError("kernel larger than output")
    y = np.zeros((B, Cout, Ho, Wo), dtype=DTYPE)
    for a in range(KH):
        for b in range(KW):
            # (B,H,W,Cout) from (B,Cin,H,W) x (Cin,Cout)
            contrib = np.tensordot(x.value, k.value[:, :, a, b], axes=(1, 0))
            y[:, :, a : a + H * s : s, b : b + W * s : s] += np.moveaxis(
                contrib, 3, 1
            )
    out = Node(y, parents=(x, k))

    def _bw(g):
        if x.requires_grad:
            gx = np.zeros_like(x.value)
            for a in range(KH):
                for b in range(KW):
                    gy = g[:, :, a : a + H * s : s, b : b + W * s : s]
                    gx += np.moveaxis(
                        np.tensordot(gy, k.value[:, :, a, b], axes=(1, 1)), 3, 1
                    )
            x.accumulate_grad(gx)
        if k.requires_grad:
            gk = np.zeros_like(k.value)
            for a in range(KH):
                for b in range(KW):
                    gy = g[:, :, a : a + H * s : s, b : b + W * s : s]
                    gk[:, :, a, b] = np.tensordot(
                        x.value, gy, axes=([0, 2, 3], [0, 2, 3])
                    )
            k.accumulate_grad(gk)

    out._backward = _bw if out.requires_grad else None
    return out


# -- backward pass ------------------------------------------------------


def topological_order(root: Node):
    """Reverse-postorder over the requires_grad subgraph (iterative DFS)."""
    order, seen = [], set()
    stack = [(root, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))
    return order


def backward(root: Node):
    """Populate grads of every requires_grad ancestor of a scalar root."""
    if root.value.ndim != 0:
        raise AutodiffError(f"backward root must be scalar, got {root.value.shape}")
    if not root.requires_grad:
        return
    order = topological_order(root)
    root.accumulate_grad(np.array(1.0, dtype=DTYPE))
    for node in reversed(order):
        if node._backward is not None and node.grad is not None:
            node._backward(node.grad)
