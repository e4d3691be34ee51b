"""A small tape-free reverse-mode autodiff over numpy arrays.

Each :class:`Var` keeps references to its parents and a closure that maps the
upstream gradient to parent gradients. :func:`backward` walks the graph in
reverse topological order. Subgradient 0 is used at the kinks of relu and abs.
"""

from __future__ import annotations

import numpy as np


class NumericError(FloatingPointError):
    """A non-finite value appeared while evaluating or differentiating a loss."""


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, size in enumerate(shape):
        if size == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


class Var:
    __slots__ = ("value", "grad", "parents", "backward_fn", "requires_grad")

    __array_priority__ = 100  # make ndarray <op> Var dispatch to Var

    def __init__(self, value, parents=(), backward_fn=None, requires_grad=None):
        self.value = np.asarray(value, dtype=float)
        self.grad = None
        self.parents = parents
        self.backward_fn = backward_fn
        if requires_grad is None:
            requires_grad = any(p.requires_grad for p in parents)
        self.requires_grad = requires_grad

    def __repr__(self):
        return f"Var({self.value!r})"

    @property
    def shape(self):
        return self.value.shape

    @property
    def ndim(self):
        return self.value.ndim

    def __len__(self):
        return len(self.value)

    # arithmetic -----------------------------------------------------------
    def __add__(self, other):
        other = as_var(other)
        a, b = self, other
        return Var(a.value + b.value, (a, b),
                   lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))

    __radd__ = __add__

    def __neg__(self):
        return Var(-self.value, (self,), lambda g: (-g,))

    def __sub__(self, other):
        return self + (-as_var(other))

    def __rsub__(self, other):
        return as_var(other) + (-self)

    def __mul__(self, other):
        other = as_var(other)
        a, b = self, other
        return Var(a.value * b.value, (a, b),
                   lambda g: (_unbroadcast(g * b.value, a.shape), _unbroadcast(g * a.value, b.shape)))

    __rmul__ = __mul__

    def __truediv__(self, other):
        other = as_var(other)
        a, b = self, other
        out = a.value / b.value
        return Var(out, (a, b),
                   lambda g: (_unbroadcast(g / b.value, a.shape),
                              _unbroadcast(-g * out / b.value, b.shape)))

    def __rtruediv__(self, other):
        return as_var(other) / self

    def __matmul__(self, other):
        other = as_var(other)
        a, b = self, other
        av, bv = a.value, b.value

        def back(g):
            if av.ndim == 1 and bv.ndim == 1:
                return g * bv, g * av
            if av.ndim == 1:
                return bv @ g, np.outer(av, g)
            if bv.ndim == 1:
                return np.outer(g, bv), av.T @ g
            return g @ bv.T, av.T @ g

        return Var(av @ bv, (a, b), back)

    def __rmatmul__(self, other):
        return as_var(other) @ self

    def square(self):
        return self * self

    # shape ----------------------------------------------------------------
    def __getitem__(self, idx):
        a = self
        shape = a.shape

        def back(g):
            out = np.zeros(shape)
            np.add.at(out, idx, g)
            return (out,)

        return Var(a.value[idx], (a,), back)

    def reshape(self, *shape):
        a = self
        old = a.shape
        return Var(a.value.reshape(*shape), (a,), lambda g: (g.reshape(old),))

    @property
    def T(self):
        return Var(self.value.T, (self,), lambda g: (g.T,))

    def sum(self, axis=None):
        a = self
        shape = a.shape

        def back(g):
            if axis is not None:
                g = np.expand_dims(g, axis)
            return (np.broadcast_to(g, shape).copy(),)

        return Var(a.value.sum(axis=axis), (a,), back)

    def mean(self, axis=None):
        count = self.value.size if axis is None else self.value.shape[axis]
        return self.sum(axis) * (1.0 / count)


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x, requires_grad=False)


def exp(x):
    x = as_var(x)
    out = np.exp(x.value)
    return Var(out, (x,), lambda g: (g * out,))


def log(x):
    x = as_var(x)
    return Var(np.log(x.value), (x,), lambda g: (g / x.value,))


def sqrt(x):
    x = as_var(x)
    out = np.sqrt(x.value)
    return Var(out, (x,), lambda g: (g * 0.5 / out,))


def relu(x):
    """Positive part ``[x]_+`` (also serves as the hinge in fairness terms)."""
    x = as_var(x)
    on = x.value > 0
    return Var(np.where(on, x.value, 0.0), (x,), lambda g: (g * on,))


def abs_(x):
    x = as_var(x)
    sign = np.sign(x.value)
    return Var(np.abs(x.value), (x,), lambda g: (g * sign,))


def clip_min(x, floor):
    """``max(x, floor)`` with zero gradient where the floor is active."""
    x = as_var(x)
    on = x.value > floor
    return Var(np.where(on, x.value, floor), (x,), lambda g: (g * on,))


def concat(parts, axis=0):
    parts = [as_var(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    cuts = np.cumsum(sizes)[:-1]
    return Var(np.concatenate([p.value for p in parts], axis=axis), tuple(parts),
               lambda g: tuple(np.split(g, cuts, axis=axis)))


def logsumexp(x, axis=-1, mask=None):
    """Max-stabilized log-sum-exp along ``axis``, optionally over masked entries only.

    Every reduced slice must contain at least one unmasked entry.
    """
    x = as_var(x)
    v = x.value
    if mask is None:
        mask = np.ones(v.shape, dtype=bool)
    mask = np.broadcast_to(mask, v.shape)
    safe = np.where(mask, v, -np.inf)
    top = np.max(safe, axis=axis, keepdims=True)
    w = np.where(mask, np.exp(safe - top), 0.0)
    total = w.sum(axis=axis, keepdims=True)
    out = (np.log(total) + top).squeeze(axis)
    soft = w / total
    return Var(out, (x,), lambda g: (np.expand_dims(g, axis) * soft,))


def softmax(x, axis=-1):
    x = as_var(x)
    v = x.value
    e = np.exp(v - v.max(axis=axis, keepdims=True))
    p = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (p * (g - (g * p).sum(axis=axis, keepdims=True)),)

    return Var(p, (x,), back)


def backward(out: Var):
    """Accumulate d(out)/d(node) into ``node.grad`` for every node needing a gradient."""
    if out.value.size != 1:
        raise ValueError("backward() needs a scalar output")
    order, seen = [], set()
    stack = [(out, False)]
    while stack:
        node, done = stack.pop()
        if done:
            order.append(node)
            continue
        if id(node) in seen or not node.requires_grad:
            continue
        seen.add(id(node))
        stack.append((node, True))
        for p in node.parents:
            if id(p) not in seen and p.requires_grad:
                stack.append((p, False))
    for node in order:
        node.grad = None
    out.grad = np.ones_like(out.value)
    for node in reversed(order):
        if node.backward_fn is None or node.grad is None:
            continue
        grads = node.backward_fn(node.grad)
        for p, g in zip(node.parents, grads):
            if not p.requires_grad:
                continue
            if not np.all(np.isfinite(g)):
                raise NumericError("non-finite gradient during backward pass")
            p.grad = g if p.grad is None else p.grad + g


def grad(loss_fn, params):
    """Return ``(value, gradient)`` of a scalar ``loss_fn(Var)`` at ``params``."""
    leaf = Var(np.array(params, dtype=float, copy=True), requires_grad=True)
    out = loss_fn(leaf)
    if not isinstance(out, Var):
        raise TypeError("loss function must return a Var")
    value = float(out.value)
    if not np.isfinite(value):
        raise NumericError(f"loss evaluated to {value}")
    backward(out)
    g = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.value)
    return value, g


def finite_difference(fn, params, step=1e-5):
    """Central differences of a numpy-valued scalar function."""
    params = np.array(params, dtype=float)
    out = np.zeros_like(params)
    flat = params.reshape(-1)
    for k in range(flat.size):
        old = flat[k]
        flat[k] = old + step
        up = fn(params.copy())
        flat[k] = old - step
        down = fn(params.copy())
        flat[k] = old
        out.reshape(-1)[k] = (up - down) / (2 * step)
    return out


def relative_error(analytic, numeric, floor=1e-6):
    """max_k |a_k - n_k| / max(|a_k|, |n_k|, floor)."""
    a = np.asarray(analytic, dtype=float)
    b = np.asarray(numeric, dtype=float)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom)) if a.size else 0.0


def gradcheck(loss_fn, params, step=1e-5):
    """Max relative error between reverse-mode and central-difference gradients."""
    _, g = grad(loss_fn, params)
    fd = finite_difference(lambda p: float(loss_fn(Var(p)).value), params, step)
    return relative_error(g, fd)
