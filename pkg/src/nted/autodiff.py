"""Reverse-mode differentiation over the tensor_core operation set.

A :class:`Var` wraps a forward value and remembers, for each input, a
vector-Jacobian product closure. :func:`backward` walks the graph once in
reverse topological order and accumulates gradients additively.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import tensor_core as tc


class GraphError(RuntimeError):
    pass


class Var:
    __slots__ = ("value", "grad", "parents", "op", "requires_grad", "__weakref__")

    def __init__(self, value, parents=(), op: str = "leaf", requires_grad: bool = False):
        self.value = np.asarray(value)
        self.grad = None
        self.parents = tuple(parents)
        self.op = op
        self.requires_grad = requires_grad or any(p.requires_grad for p, _ in self.parents)

    @property
    def shape(self):
        return self.value.shape

    @property
    def T(self):
        return transpose(self)

    def __repr__(self):
        return f"Var(op={self.op}, shape={self.value.shape})"

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

    def __rmatmul__(self, other):
        return matmul(other, self)


def leaf(value) -> Var:
    """A trainable leaf."""
    return Var(value, requires_grad=True)


def as_var(x, like: Var | None = None) -> Var:
    if isinstance(x, Var):
        return x
    if like is not None and np.ndim(x) == 0:
        # python scalars adopt the dtype of the other operand
        return Var(np.asarray(x, dtype=like.value.dtype))
    return Var(x)


def _pair(a, b) -> tuple[Var, Var]:
    if isinstance(a, Var):
        return a, as_var(b, like=a)
    b = as_var(b)
    return as_var(a, like=b), b


def _node(value, op, *pairs) -> Var:
    parents = tuple((p, fn) for p, fn in pairs if p.requires_grad)
    node = Var(value, parents, op)
    return node


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, s in enumerate(shape) if s == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# --------------------------------------------------------------------------
# backward pass


def _topological(root: Var) -> list[Var]:
    order: list[Var] = []
    state: dict[int, int] = {}  # 1 = on stack, 2 = done
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        key = id(node)
        if expanded:
            state[key] = 2
            order.append(node)
            continue
        mark = state.get(key)
        if mark == 2:
            continue
        if mark == 1:
            raise GraphError(f"cycle detected at {node!r}")
        state[key] = 1
        stack.append((node, True))
        for parent, _ in node.parents:
            pmark = state.get(id(parent))
            if pmark == 1:
                raise GraphError(f"cycle detected at {parent!r}")
            if pmark is None:
                stack.append((parent, False))
    return order


def backward(root: Var) -> dict[Var, np.ndarray]:
    """Accumulate d(root)/d(node) into ``.grad`` of every node that needs it.

    Returns the gradients of the leaves reachable from ``root``.
    """
    if root.value.size != 1:
        raise GraphError(f"backward needs a scalar root, got shape {root.value.shape}")
    order = _topological(root)
    for node in order:
        node.grad = None
    root.grad = np.ones_like(root.value)
    leaves: dict[Var, np.ndarray] = {}
    for node in reversed(order):
        g = node.grad
        if g is None:
            continue
        if not node.parents:
            if node.requires_grad:
                leaves[node] = g
            continue
        for parent, vjp in node.parents:
            contrib = vjp(g)
            if parent.grad is None:
                fresh = (
                    contrib is not g
                    and isinstance(contrib, np.ndarray)
                    and contrib.flags.owndata
                    and contrib.flags.writeable
                    and contrib.dtype == parent.value.dtype
                )
                # fresh buffers are adopted; views and shared arrays are copied
                parent.grad = contrib if fresh else np.array(contrib, dtype=parent.value.dtype, copy=True)
            else:
                parent.grad += contrib
    return leaves


# --------------------------------------------------------------------------
# ops


def add(a, b) -> Var:
    a, b = _pair(a, b)
    out = tc.add(a.value, b.value)
    return _node(
        out, "add",
        (a, lambda g: _unbroadcast(g, a.shape)),
        (b, lambda g: _unbroadcast(g, b.shape)),
    )


def sub(a, b) -> Var:
    a, b = _pair(a, b)
    out = tc.sub(a.value, b.value)
    return _node(
        out, "sub",
        (a, lambda g: _unbroadcast(g, a.shape)),
        (b, lambda g: -_unbroadcast(g, b.shape)),
    )


def mul(a, b) -> Var:
    a, b = _pair(a, b)
    out = tc.mul(a.value, b.value)
    return _node(
        out, "mul",
        (a, lambda g: _unbroadcast(g * b.value, a.shape)),
        (b, lambda g: _unbroadcast(g * a.value, b.shape)),
    )


def _swap(x: np.ndarray) -> np.ndarray:
    return np.swapaxes(x, -1, -2)


def matmul(a, b) -> Var:
    a, b = _pair(a, b)
    out = tc.matmul(a.value, b.value)
    return _node(
        out, "matmul",
        (a, lambda g: _unbroadcast(np.matmul(g, _swap(b.value)), a.shape)),
        (b, lambda g: _unbroadcast(np.matmul(_swap(a.value), g), b.shape)),
    )


def transpose(x) -> Var:
    """Swap the last two axes."""
    x = as_var(x)
    return _node(_swap(x.value), "transpose", (x, _swap))


def reshape(x, shape) -> Var:
    x = as_var(x)
    return _node(x.value.reshape(shape), "reshape", (x, lambda g: g.reshape(x.shape)))


def softmax(x, axis: int) -> Var:
    x = as_var(x)
    y = tc.softmax_axis(x.value, axis)

    def vjp(g):
        return y * (g - (g * y).sum(axis=axis, keepdims=True))

    return _node(y, "softmax", (x, vjp))


def sigmoid(x) -> Var:
    x = as_var(x)
    y = tc.sigmoid(x.value)
    return _node(y, "sigmoid", (x, lambda g: g * y * (1.0 - y)))


def absolute(x) -> Var:
    x = as_var(x)
    # np.sign(0) == 0 gives the zero subgradient at the kink
    return _node(tc.absolute(x.value), "abs", (x, lambda g: g * np.sign(x.value)))


def leaky_relu(x, slope: float = 0.2) -> Var:
    x = as_var(x)
    factor = np.where(x.value > 0, 1.0, slope).astype(x.value.dtype)
    return _node(x.value * factor, "leaky_relu", (x, lambda g: g * factor))


def total(x) -> Var:
    x = as_var(x)
    return _node(np.sum(x.value), "sum", (x, lambda g: np.broadcast_to(g, x.shape)))


def mean(x) -> Var:
    x = as_var(x)
    n = x.value.size
    return _node(tc.mean(x.value), "mean", (x, lambda g: np.broadcast_to(g / n, x.shape)))


def unfold3x3(x, stride: int = 1) -> Var:
    """im2col for a 3x3 window with zero padding 1 on (B, H, W, C) input.

    Output is (B, Ho, Wo, 9*C) with the window offsets major and channels minor.
    """
    x = as_var(x)
    B, H, W, C = x.shape
    Ho = (H - 1) // stride + 1
    Wo = (W - 1) // stride + 1
    xp = np.pad(x.value, ((0, 0), (1, 1), (1, 1), (0, 0)))
    cols = np.empty((B, Ho, Wo, 9 * C), dtype=x.value.dtype)
    slots = []
    for dy in range(3):
        for dx in range(3):
            sl = (slice(None), slice(dy, dy + stride * (Ho - 1) + 1, stride),
                  slice(dx, dx + stride * (Wo - 1) + 1, stride))
            j = (dy * 3 + dx) * C
            cols[..., j:j + C] = xp[sl]
            slots.append((sl, j))

    def vjp(g):
        gp = np.zeros((B, H + 2, W + 2, C), dtype=g.dtype)
        for sl, j in slots:
            gp[sl] += g[..., j:j + C]
        return gp[:, 1:-1, 1:-1, :]

    return _node(cols, "unfold3x3", (x, vjp))


def upsample2(x) -> Var:
    """Nearest-neighbour x2 upsampling of (B, H, W, C)."""
    x = as_var(x)
    B, H, W, C = x.shape
    out = np.repeat(np.repeat(x.value, 2, axis=1), 2, axis=2)
    return _node(out, "upsample2", (x, lambda g: g.reshape(B, H, 2, W, 2, C).sum(axis=(2, 4))))


def avg_pool2(x) -> Var:
    """2x2 average pooling of (B, H, W, C) with even H, W."""
    x = as_var(x)
    B, H, W, C = x.shape
    out = x.value.reshape(B, H // 2, 2, W // 2, 2, C).mean(axis=(2, 4))

    def vjp(g):
        return np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) / 4.0

    return _node(out, "avg_pool2", (x, vjp))


# --------------------------------------------------------------------------
# gradient checking


@dataclass
class GradCheckReport:
    max_rel_errors: list[float]
    tolerance: float
    passed: bool = field(init=False)

    def __post_init__(self):
        self.passed = all(e <= self.tolerance for e in self.max_rel_errors)


def grad_check(
    f: Callable[..., Var],
    inputs: Sequence[np.ndarray],
    step: float = 1e-6,
    tolerance: float = 1e-5,
) -> GradCheckReport:
    """Compare analytic gradients of scalar ``f(*vars)`` with central differences.

    The perturbation for element ``x`` is ``step * max(1, |x|)``; relative
    error uses ``max(|a|, |b|, 1e-8)`` as denominator.
    """
    arrays = [np.array(x, dtype=np.float64, copy=True) for x in inputs]
    leaves = [leaf(a) for a in arrays]
    out = as_var(f(*leaves))
    backward(out)
    analytic = [lf.grad if lf.grad is not None else np.zeros_like(lf.value) for lf in leaves]

    def evaluate(vals):
        return float(as_var(f(*[Var(v) for v in vals])).value)

    errors = []
    for i, a in enumerate(arrays):
        numeric = np.zeros_like(a)
        flat = a.reshape(-1)
        nflat = numeric.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            h = step * max(1.0, abs(orig))
            flat[j] = orig + h
            fp = evaluate(arrays)
            flat[j] = orig - h
            fm = evaluate(arrays)
            flat[j] = orig
            nflat[j] = (fp - fm) / (2.0 * h)
        denom = np.maximum(np.maximum(np.abs(analytic[i]), np.abs(numeric)), 1e-8)
        err = np.abs(analytic[i] - numeric) / denom
        errors.append(float(err.max()) if err.size else 0.0)
    return GradCheckReport(errors, tolerance)


# --------------------------------------------------------------------------
# optimizer


class Adam:
    """Adam over a dict of named arrays. Defaults follow the training setup:
    beta1 = 0, beta2 = 0.99, lr = 2e-3."""

    def __init__(self, lr: float = 2e-3, betas: tuple[float, float] = (0.0, 0.99), eps: float = 1e-8):
        self.lr = lr
        self.beta1, self.beta2 = betas
        self.eps = eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: dict[str, np.ndarray], grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        """Return updated parameters; ``params`` is left untouched."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        new = {}
        for name, p in params.items():
            g = grads.get(name)
            if g is None:
                new[name] = p
                continue
            m = self.m.get(name)
            v = self.v.get(name)
            m = (1.0 - b1) * g if m is None else b1 * m + (1.0 - b1) * g
            v = (1.0 - b2) * g * g if v is None else b2 * v + (1.0 - b2) * g * g
            self.m[name], self.v[name] = m, v
            update = self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)
            new[name] = (p - update).astype(p.dtype, copy=False)
        return new

    def state_dict(self) -> dict:
        return {"t": self.t, "m": dict(self.m), "v": dict(self.v)}

    def load_state_dict(self, state: dict) -> None:
        self.t = int(state["t"])
        self.m = dict(state["m"])
        self.v = dict(state["v"])
