"""Minimal reverse-mode autodiff over dense float64 numpy arrays.

Tensors form an acyclic graph; each non-leaf keeps (parent, vjp) pairs.
Every loss in the package is expressed through these ops so that a single
finite-difference harness can certify all gradients.
"""

from __future__ import annotations

import warnings

import numpy as np

from .errors import NonFiniteValue, ShapeError


class Tensor:
    __slots__ = ("value", "grad", "parents", "requires_grad", "name")

    def __init__(self, value, parents=(), requires_grad=False, name=""):
        self.value = np.asarray(value, dtype=np.float64)
        if not np.all(np.isfinite(self.value)):
            raise NonFiniteValue(f"non-finite value in node '{name or 'tensor'}'")
        self.grad = None
        self.parents = tuple(parents)  # (Tensor, vjp) pairs
        self.requires_grad = requires_grad or any(p.requires_grad for p, _ in parents)
        self.name = name

    @property
    def shape(self):
        return self.value.shape

    def zero_grad(self):
        self.grad = None

    def backward(self):
        if self.value.size != 1:
            raise ShapeError(f"backward requires a scalar loss, got shape {self.shape}")
        order = _toposort(self)
        grads = {id(self): np.ones_like(self.value)}
        for node in order:
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad:
                node.grad = g if node.grad is None else node.grad + g
            for parent, vjp in node.parents:
                if not parent.requires_grad:
                    continue
                pg = vjp(g)
                if not np.all(np.isfinite(pg)):
                    raise NonFiniteValue(f"non-finite gradient through '{node.name}'")
                key = id(parent)
                if key in grads:
                    grads[key] = grads[key] + pg
                else:
                    grads[key] = np.array(pg, dtype=np.float64)

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"


def _toposort(root):
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
        for parent, _ in node.parents:
            if id(parent) not in seen:
                stack.append((parent, False))
    return list(reversed(order))


def as_tensor(x):
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad, shape):
    """Reduce an upstream gradient back to `shape` after numpy broadcasting."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad.reshape(shape)


def add(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(
        a.value + b.value,
        parents=(
            (a, lambda g: _unbroadcast(g, a.shape)),
            (b, lambda g: _unbroadcast(g, b.shape)),
        ),
        name="add",
    )


def sub(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(
        a.value - b.value,
        parents=(
            (a, lambda g: _unbroadcast(g, a.shape)),
            (b, lambda g: _unbroadcast(-g, b.shape)),
        ),
        name="sub",
    )


def mul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(
        a.value * b.value,
        parents=(
            (a, lambda g: _unbroadcast(g * b.value, a.shape)),
            (b, lambda g: _unbroadcast(g * a.value, b.shape)),
        ),
        name="mul",
    )


def div(a, b):
    a, b = as_tensor(a), as_tensor(b)
    return Tensor(
        a.value / b.value,
        parents=(
            (a, lambda g: _unbroadcast(g / b.value, a.shape)),
            (b, lambda g: _unbroadcast(-g * a.value / b.value**2, b.shape)),
        ),
        name="div",
    )


def matmul(a, b):
    a, b = as_tensor(a), as_tensor(b)
    if a.value.ndim != 2 or b.value.ndim != 2:
        raise ShapeError("matmul expects 2-D operands")
    return Tensor(
        a.value @ b.value,
        parents=(
            (a, lambda g: g @ b.value.T),
            (b, lambda g: a.value.T @ g),
        ),
        name="matmul",
    )


def tanh(a):
    a = as_tensor(a)
    out = np.tanh(a.value)
    return Tensor(out, parents=((a, lambda g: g * (1.0 - out**2)),), name="tanh")


def sigmoid(a):
    a = as_tensor(a)
    out = 1.0 / (1.0 + np.exp(-a.value))
    return Tensor(out, parents=((a, lambda g: g * out * (1.0 - out)),), name="sigmoid")


def silu(a):
    return mul(a, sigmoid(a))


def exp(a):
    a = as_tensor(a)
    out = np.exp(a.value)
    return Tensor(out, parents=((a, lambda g: g * out),), name="exp")


def log(a):
    a = as_tensor(a)
    return Tensor(np.log(a.value), parents=((a, lambda g: g / a.value),), name="log")


def square(a):
    a = as_tensor(a)
    return Tensor(a.value**2, parents=((a, lambda g: g * 2.0 * a.value),), name="square")


def sqrt(a):
    a = as_tensor(a)
    out = np.sqrt(a.value)
    return Tensor(out, parents=((a, lambda g: g * 0.5 / out),), name="sqrt")


def clip(a, lo, hi):
    a = as_tensor(a)
    mask = (a.value >= lo) & (a.value <= hi)
    return Tensor(
        np.clip(a.value, lo, hi),
        parents=((a, lambda g: g * mask),),
        name="clip",
    )


def vsum(a, axis=None):
    a = as_tensor(a)

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g, a.shape).copy()
        return np.broadcast_to(np.expand_dims(g, axis), a.shape).copy()

    return Tensor(a.value.sum(axis=axis), parents=((a, vjp),), name="sum")


def vmean(a, axis=None):
    a = as_tensor(a)
    n = a.value.size if axis is None else a.shape[axis]

    def vjp(g):
        if axis is None:
            return np.broadcast_to(g / n, a.shape).copy()
        return np.broadcast_to(np.expand_dims(g, axis) / n, a.shape).copy()

    return Tensor(a.value.mean(axis=axis), parents=((a, vjp),), name="mean")


def softmax(a, axis=-1):
    a = as_tensor(a)
    shifted = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out = e / e.sum(axis=axis, keepdims=True)

    def vjp(g):
        dot = (g * out).sum(axis=axis, keepdims=True)
        return out * (g - dot)

    return Tensor(out, parents=((a, vjp),), name="softmax")


def minimum(a, b):
    a, b = as_tensor(a), as_tensor(b)
    take_a = a.value <= b.value
    return Tensor(
        np.minimum(a.value, b.value),
        parents=(
            (a, lambda g: _unbroadcast(g * take_a, a.shape)),
            (b, lambda g: _unbroadcast(g * ~take_a, b.shape)),
        ),
        name="minimum",
    )


def concat(tensors, axis=1):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def make_vjp(i):
        def vjp(g):
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(offsets[i], offsets[i + 1])
            return g[tuple(sl)]

        return vjp

    return Tensor(
        np.concatenate([t.value for t in tensors], axis=axis),
        parents=tuple((t, make_vjp(i)) for i, t in enumerate(tensors)),
        name="concat",
    )


def global_norm_clip(grads, max_norm):
    """Rescale a list of gradient arrays so their joint L2 norm is <= max_norm."""
    total = float(np.sqrt(sum(float((g**2).sum()) for g in grads)))
    if total <= max_norm or total == 0.0:
        return list(grads), total
    scale = max_norm / total
    return [g * scale for g in grads], total


def adam_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8):
    """One Adam update. `params`/`grads` are lists of arrays; `state` is
    None (fresh) or the dict returned by a prior call. Returns (params, state).

    Non-finite gradients skip the step with a warning.
    """
    if state is None:
        state = {
            "t": 0,
            "m": [np.zeros_like(p) for p in params],
            "v": [np.zeros_like(p) for p in params],
        }
    for p, g in zip(params, grads):
        if p.shape != g.shape:
            raise ShapeError(f"param/grad shape mismatch: {p.shape} vs {g.shape}")
    if any(not np.all(np.isfinite(g)) for g in grads):
        warnings.warn("adam_step skipped: non-finite gradient", RuntimeWarning)
        return [p.copy() for p in params], state
    state["t"] += 1
    t = state["t"]
    out = []
    for i, (p, g) in enumerate(zip(params, grads)):
        state["m"][i] = beta1 * state["m"][i] + (1 - beta1) * g
        state["v"][i] = beta2 * state["v"][i] + (1 - beta2) * g**2
        m_hat = state["m"][i] / (1 - beta1**t)
        v_hat = state["v"][i] / (1 - beta2**t)
        out.append(p - lr * m_hat / (np.sqrt(v_hat) + eps))
    return out, state


class Adam:
    """Adam bound to a list of leaf Tensors (updates .value in place)."""

    def __init__(self, params, lr, max_grad_norm=None):
        self.params = list(params)
        self.lr = lr
        self.max_grad_norm = max_grad_norm
        self.state = None

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        grads = [p.grad if p.grad is not None else np.zeros_like(p.value) for p in self.params]
        if self.max_grad_norm is not None:
            grads, _ = global_norm_clip(grads, self.max_grad_norm)
        new_values, self.state = adam_step([p.value for p in self.params], grads, self.state, self.lr)
        for p, v in zip(self.params, new_values):
            p.value = v
