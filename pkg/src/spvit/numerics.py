"""Dense float64 tensors with tape-based reverse-mode differentiation.

Arrays are plain ``numpy.ndarray`` objects (the ``Tensor`` of this package);
:class:`Var` pairs one with an accumulated gradient and a record of the
operation that produced it. Calling :meth:`Var.backward` on a scalar replays
that record in reverse topological order.
"""
from __future__ import annotations

import contextlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np
from scipy.special import erf

DTYPE = np.float64
_GRAD_ENABLED = True


class ShapeError(ValueError):
    """Operand extents are incompatible."""


class UnsupportedKernelError(ValueError):
    """Kernel size is not odd and positive."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _GRAD_ENABLED
    prev, _GRAD_ENABLED = _GRAD_ENABLED, False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def as_array(x) -> np.ndarray:
    return np.asarray(x, dtype=DTYPE)


class Var:
    """A differentiable value.

    ``grad`` has the shape of ``value`` and accumulates across
    :meth:`backward` calls until :meth:`zero_grad` is called. Only leaves
    (and nodes created with ``retain_grad=True``) accumulate; intermediate
    adjoints are discarded once propagated.
    """

    __slots__ = ("value", "_grad", "requires_grad", "retain_grad", "name",
                 "_parents", "_backward")

    def __init__(self, value, requires_grad: bool = False, name: str | None = None,
                 retain_grad: bool = False):
        self.value = as_array(value)
        self.requires_grad = requires_grad
        self.retain_grad = retain_grad
        self._grad: np.ndarray | None = None
        self.name = name
        self._parents: tuple[Var, ...] = ()
        self._backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None

    @property
    def grad(self) -> np.ndarray:
        if self._grad is None:
            self._grad = np.zeros_like(self.value)
        return self._grad

    @grad.setter
    def grad(self, g: np.ndarray) -> None:
        self._grad = g

    def __repr__(self):
        tag = f" {self.name!r}" if self.name else ""
        return f"Var{tag}(shape={self.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def numpy(self) -> np.ndarray:
        return self.value

    def zero_grad(self) -> None:
        self._grad = None

    def detach(self) -> "Var":
        return Var(self.value)

    def backward(self) -> None:
        if self.value.size != 1:
            raise ValueError(f"backward() needs a scalar root, got shape {self.shape}")
        order = _topological_order(self)
        adj: dict[int, np.ndarray] = {id(self): np.ones_like(self.value)}
        for node in reversed(order):
            g = adj.pop(id(node), None)
            if g is None:
                continue
            if node.requires_grad and (node._backward is None or node.retain_grad):
                node.grad = g if node._grad is None else node._grad + g
            if node._backward is None:
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                adj[key] = adj[key] + pg if key in adj else pg

    # operators -----------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(lift(other)))

    def __rsub__(self, other):
        return add(lift(other), neg(self))

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        if isinstance(other, Var):
            return mul(self, reciprocal(other))
        return mul(self, 1.0 / float(other))

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def sum(self, axis=None, keepdims=False):
        return sum_(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _topological_order(root: Var) -> list[Var]:
    order: list[Var] = []
    seen: set[int] = set()
    stack: list[tuple[Var, bool]] = [(root, False)]
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
            if id(p) not in seen:
                stack.append((p, False))
    return order


def lift(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def record(value: np.ndarray, parents: Iterable[Var], backward) -> Var:
    """Wrap ``value`` as the output of an operation on ``parents``.

    ``backward(g)`` must return one adjoint (or None) per parent.
    """
    parents = tuple(parents)
    out = Var(value)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = parents
        out._backward = backward
    return out


def unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# elementwise -------------------------------------------------------------

def add(a, b) -> Var:
    a, b = lift(a), lift(b)
    return record(
        a.value + b.value,
        (a, b),
        lambda g: (unbroadcast(g, a.shape), unbroadcast(g, b.shape)),
    )


def mul(a, b) -> Var:
    a, b = lift(a), lift(b)
    return record(
        a.value * b.value,
        (a, b),
        lambda g: (unbroadcast(g * b.value, a.shape), unbroadcast(g * a.value, b.shape)),
    )


def neg(a: Var) -> Var:
    return record(-a.value, (a,), lambda g: (-g,))


def reciprocal(a: Var) -> Var:
    out = 1.0 / a.value
    return record(out, (a,), lambda g: (-g * out * out,))


def exp(a: Var) -> Var:
    out = np.exp(a.value)
    return record(out, (a,), lambda g: (g * out,))


def log(a: Var) -> Var:
    return record(np.log(a.value), (a,), lambda g: (g / a.value,))


def square(a: Var) -> Var:
    return record(a.value**2, (a,), lambda g: (2.0 * g * a.value,))


def relu(a: Var) -> Var:
    mask = a.value > 0
    return record(np.where(mask, a.value, 0.0), (a,), lambda g: (g * mask,))


def sigmoid(a) -> Var:
    a = lift(a)
    out = sigmoid_np(a.value)
    return record(out, (a,), lambda g: (g * out * (1.0 - out),))


def sigmoid_np(x) -> np.ndarray:
    x = as_array(x)
    # split branches keep exp() from overflowing
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(a: Var) -> Var:
    """Exact (erf) GELU."""
    x = a.value
    cdf = 0.5 * (1.0 + erf(x * _INV_SQRT2))

    def back(g):
        pdf = _INV_SQRT2PI * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf),)

    return record(x * cdf, (a,), back)


# shape ------------------------------------------------------------------

def reshape(a: Var, shape) -> Var:
    return record(a.value.reshape(shape), (a,), lambda g: (g.reshape(a.shape),))


def transpose(a: Var, axes=None) -> Var:
    axes = tuple(range(a.ndim))[::-1] if axes is None else tuple(axes)
    inv = np.argsort(axes)
    return record(a.value.transpose(axes), (a,), lambda g: (g.transpose(inv),))


def getitem(a: Var, idx) -> Var:
    def back(g):
        full = np.zeros_like(a.value)
        if _has_fancy(idx):
            np.add.at(full, idx, g)
        else:
            full[idx] += g
        return (full,)

    return record(a.value[idx], (a,), back)


def _has_fancy(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return any(isinstance(i, (list, np.ndarray)) for i in items)


def concat(vars_: Sequence[Var], axis: int = 0) -> Var:
    vars_ = [lift(v) for v in vars_]
    sizes = [v.shape[axis] for v in vars_]
    splits = np.cumsum(sizes)[:-1]
    return record(
        np.concatenate([v.value for v in vars_], axis=axis),
        vars_,
        lambda g: np.split(g, splits, axis=axis),
    )


# reductions ---------------------------------------------------------------

def sum_(a: Var, axis=None, keepdims: bool = False) -> Var:
    def back(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, a.shape).copy(),)

    return record(np.sum(a.value, axis=axis, keepdims=keepdims), (a,), back)


def mean(a: Var, axis=None, keepdims: bool = False) -> Var:
    n = a.value.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return sum_(a, axis, keepdims) * (1.0 / float(n))


# linear algebra ----------------------------------------------------------

def matmul(a, b) -> Var:
    """Matrix product with numpy broadcasting over leading axes."""
    a, b = lift(a), lift(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    if b.ndim == 2 and a.ndim > 2:
        # batched input times a shared weight: fold the batch axes into rows
        rows = int(np.prod(a.shape[:-1]))  # explicit: -1 is ambiguous for empty axes
        a2 = a.value.reshape(rows, a.shape[-1])

        def back2(g):
            g2 = g.reshape(rows, g.shape[-1])
            ga = (g2 @ b.value.T).reshape(a.shape) if a.requires_grad else None
            gb = a2.T @ g2 if b.requires_grad else None
            return ga, gb

        return record((a2 @ b.value).reshape(a.shape[:-1] + b.shape[-1:]), (a, b), back2)

    def back(g):
        ga = unbroadcast(g @ np.swapaxes(b.value, -1, -2), a.shape) if a.requires_grad else None
        gb = unbroadcast(np.swapaxes(a.value, -1, -2) @ g, b.shape) if b.requires_grad else None
        return ga, gb

    return record(a.value @ b.value, (a, b), back)


def linear(x: Var, w: Var, b: Var | None = None) -> Var:
    y = matmul(x, w)
    return y if b is None else y + b


# softmax family ------------------------------------------------------------

def softmax(a: Var, axis: int = -1) -> Var:
    z = a.value - a.value.max(axis=axis, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=axis, keepdims=True)

    def back(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return record(out, (a,), back)


def log_softmax(a: Var, axis: int = -1) -> Var:
    z = a.value - a.value.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse

    def back(g):
        return (g - np.exp(out) * g.sum(axis=axis, keepdims=True),)

    return record(out, (a,), back)


def cross_entropy(logits: Var, labels) -> Var:
    """Mean negative log-likelihood of integer ``labels``.

    ``logits`` is ``[C]`` with a scalar label or ``[B, C]`` with ``B`` labels.
    """
    labels = np.asarray(labels, dtype=np.int64)
    if logits.ndim == 1:
        logits = reshape(logits, (1, -1))
        labels = labels.reshape(1)
    if labels.shape != (logits.shape[0],):
        raise ShapeError(f"labels {labels.shape} do not match logits {logits.shape}")
    lp = log_softmax(logits, axis=-1)
    rows = np.arange(labels.shape[0])
    picked = getitem(lp, (rows, labels))
    return -mean(picked)


# normalisation ----------------------------------------------------------

def layernorm(x: Var, gamma: Var, beta: Var, eps: float = 1e-5) -> Var:
    """Normalise over the last axis."""
    v = x.value
    mu = v.mean(axis=-1, keepdims=True)
    xc = v - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out = xhat * gamma.value + beta.value

    def back(g):
        gx_hat = g * gamma.value
        n = v.shape[-1]
        gx = inv / n * (
            n * gx_hat
            - gx_hat.sum(axis=-1, keepdims=True)
            - xhat * (gx_hat * xhat).sum(axis=-1, keepdims=True)
        )
        return gx, unbroadcast(g * xhat, gamma.shape), unbroadcast(g, beta.shape)

    return record(out, (x, gamma, beta), back)


class BatchNormState:
    """Running statistics of one batch-norm layer (not differentiated)."""

    def __init__(self, channels: int, momentum: float = 0.1, eps: float = 1e-5):
        self.running_mean = np.zeros(channels)
        self.running_var = np.ones(channels)
        self.momentum = momentum
        self.eps = eps

    def copy(self) -> "BatchNormState":
        out = BatchNormState(self.running_mean.shape[0], self.momentum, self.eps)
        out.running_mean = self.running_mean.copy()
        out.running_var = self.running_var.copy()
        return out


def batchnorm(x: Var, gamma: Var, beta: Var, state: BatchNormState, training: bool) -> Var:
    """Batch norm over every axis but the last (channel) one.

    In training mode the batch statistics normalise ``x`` and the running
    statistics are updated with ``state.momentum``; otherwise the running
    statistics are used.
    """
    v = x.value
    axes = tuple(range(v.ndim - 1))
    if not training:
        inv = 1.0 / np.sqrt(state.running_var + state.eps)
        xhat = (v - state.running_mean) * inv
        out = xhat * gamma.value + beta.value

        def back_eval(g):
            return (
                g * gamma.value * inv,
                unbroadcast(g * xhat, gamma.shape),
                unbroadcast(g, beta.shape),
            )

        return record(out, (x, gamma, beta), back_eval)

    n = int(np.prod([v.shape[a] for a in axes]))
    mu = v.mean(axis=axes)
    xc = v - mu
    var = (xc * xc).mean(axis=axes)
    inv = 1.0 / np.sqrt(var + state.eps)
    xhat = xc * inv
    out = xhat * gamma.value + beta.value
    m = state.momentum
    state.running_mean = (1 - m) * state.running_mean + m * mu
    unbiased = var * n / max(n - 1, 1)
    state.running_var = (1 - m) * state.running_var + m * unbiased

    def back(g):
        gx_hat = g * gamma.value
        gx = inv / n * (
            n * gx_hat - gx_hat.sum(axis=axes) - xhat * (gx_hat * xhat).sum(axis=axes)
        )
        return gx, (g * xhat).sum(axis=axes), g.sum(axis=axes)

    return record(out, (x, gamma, beta), back)


# convolution --------------------------------------------------------------

def check_kernel(k: int) -> int:
    if k < 1 or k % 2 == 0:
        raise UnsupportedKernelError(f"kernel size must be odd and positive, got {k}")
    return k // 2


def _pad_hw(v: np.ndarray, r: int, hw_axis: int) -> np.ndarray:
    widths = [(0, 0)] * v.ndim
    widths[hw_axis] = (r, r)
    widths[hw_axis + 1] = (r, r)
    return np.pad(v, widths)


def conv2d(x: Var, w: Var) -> Var:
    """Same-size zero-padded 2-D convolution (cross-correlation).

    ``x`` is ``[..., n_w, n_e, c_in]``, ``w`` is ``[k, k, c_in, c_out]`` and
    ``w[r + d1, r + d2]`` is the tap for offset ``(d1, d2)`` with ``r = k // 2``.
    """
    x, w = lift(x), lift(w)
    k = w.shape[0]
    r = check_kernel(k)
    if w.ndim != 4 or w.shape[1] != k or x.shape[-1] != w.shape[2]:
        raise ShapeError(f"conv2d shape mismatch: x {x.shape}, w {w.shape}")
    H, W, cin = x.shape[-3:]
    cout = w.shape[3]
    xp = _pad_hw(x.value, r, x.ndim - 3)
    cols = np.stack(
        [xp[..., a : a + H, b : b + W, :] for a in range(k) for b in range(k)], axis=-2
    ).reshape(x.shape[:-1] + (k * k * cin,))
    wm = w.value.reshape(k * k * cin, cout)

    def back(g):
        gcols = (g @ wm.T).reshape(x.shape[:-1] + (k * k, cin))
        gxp = np.zeros_like(xp)
        for t in range(k * k):
            a, b = divmod(t, k)
            gxp[..., a : a + H, b : b + W, :] += gcols[..., t, :]
        sl = [slice(None)] * gxp.ndim
        sl[x.ndim - 3] = slice(r, r + H)
        sl[x.ndim - 2] = slice(r, r + W)
        gw = cols.reshape(-1, k * k * cin).T @ g.reshape(-1, cout)
        return gxp[tuple(sl)], gw.reshape(w.shape)

    return record(cols @ wm, (x, w), back)


# straight-through gates -------------------------------------------------------

def straight_through(theta: Var, sample: np.ndarray) -> Var:
    """Emit the binary ``sample`` forward; backward treats it as ``sigmoid(theta)``."""
    p = sigmoid_np(theta.value)
    return record(as_array(sample), (theta,), lambda g: (g * p * (1.0 - p),))


# optimiser ------------------------------------------------------------------

class AdamW:
    """AdamW with decoupled weight decay, one learning rate per param group."""

    def __init__(self, groups: Sequence[dict], betas=(0.9, 0.999), eps: float = 1e-8):
        self.groups = [dict(g) for g in groups]
        for g in self.groups:
            g["params"] = list(g["params"])
            g.setdefault("weight_decay", 0.0)
        self.betas = betas
        self.eps = eps
        self.t = 0
        self.m: dict[int, np.ndarray] = {}
        self.v: dict[int, np.ndarray] = {}

    def params(self):
        for g in self.groups:
            yield from g["params"]

    def zero_grad(self) -> None:
        for p in self.params():
            p.zero_grad()

    def step(self) -> None:
        self.t += 1
        for g in self.groups:
            adamw_step(g["params"], self, g["lr"], g["weight_decay"])


def adamw_step(params: Sequence[Var], opt: AdamW, lr: float, weight_decay: float) -> None:
    b1, b2 = opt.betas
    c1 = 1 - b1**opt.t
    c2 = 1 - b2**opt.t
    for p in params:
        key = id(p)
        m = opt.m.get(key)
        if m is None:
            m = opt.m[key] = np.zeros_like(p.value)
            opt.v[key] = np.zeros_like(p.value)
        v = opt.v[key]
        m *= b1
        m += (1 - b1) * p.grad
        v *= b2
        v += (1 - b2) * p.grad * p.grad
        if weight_decay:
            p.value *= 1 - lr * weight_decay
        p.value -= lr * (m / c1) / (np.sqrt(v / c2) + opt.eps)
