"""Minimal reverse-mode automatic differentiation over float64 arrays.

Operations are recorded onto the innermost active :class:`Tape`. Outside a
tape (or when no input requires a gradient) primitives only compute values,
which is what evaluation and sampling code relies on for speed.

    params = Tensor(w, requires_grad=True)
    with Tape() as tape:
        loss = (params * params).sum()
    grads = backward(loss, tape)
    grads[params]
"""

from __future__ import annotations

import math
import threading

import numpy as np

from .errors import ConfigError, DomainError, NumericError, ShapeError

LOG_FLOOR = 1e-30
LN_EPS = 1e-5

_local = threading.local()


def _stack():
    if not hasattr(_local, "tapes"):
        _local.tapes = []
    return _local.tapes


def active_tape():
    tapes = _stack()
    return tapes[-1] if tapes else None


class Tape:
    """Ordered record of primitive applications (creation order is topological)."""

    def __init__(self):
        self.nodes = []

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        _stack().pop()
        return False

    def clear(self):
        self.nodes.clear()

    def __len__(self):
        return len(self.nodes)


class _Node:
    __slots__ = ("out", "inputs", "vjp")

    def __init__(self, out, inputs, vjp):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "__weakref__")
    __array_ufunc__ = None  # make numpy defer to our reflected operators

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.name = name

    def __repr__(self):
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad})"

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def item(self) -> float:
        return float(self.data)

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

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __rmatmul__(self, other):
        return matmul(other, self)

    def __getitem__(self, index):
        return getitem(self, index)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis=axis, keepdims=keepdims)

    def log(self):
        return log(self)

    def exp(self):
        return exp(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _unbroadcast(grad: np.ndarray, shape) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for i, dim in enumerate(shape):
        if dim == 1 and grad.shape[i] != 1:
            grad = grad.sum(axis=i, keepdims=True)
    return grad


def _finite(value: np.ndarray, kind: str) -> np.ndarray:
    if not np.all(np.isfinite(value)):
        raise NumericError(f"primitive {kind!r} produced non-finite values")
    return value


# Each primitive: forward(*arrays, **attrs) -> (value, ctx);
# vjp(ctx, g) -> tuple of cotangents, one per input (None when not needed).

def _fw_add(a, b):
    return a + b, (a.shape, b.shape)


def _vjp_add(ctx, g):
    return _unbroadcast(g, ctx[0]), _unbroadcast(g, ctx[1])


def _fw_sub(a, b):
    return a - b, (a.shape, b.shape)


def _vjp_sub(ctx, g):
    return _unbroadcast(g, ctx[0]), -_unbroadcast(g, ctx[1])


def _fw_mul(a, b):
    return a * b, (a, b)


def _vjp_mul(ctx, g):
    a, b = ctx
    return _unbroadcast(g * b, a.shape), _unbroadcast(g * a, b.shape)


def _fw_div(a, b):
    if np.any(b == 0):
        raise DomainError("division by zero")
    out = a / b
    return out, (a, b, out)


def _vjp_div(ctx, g):
    a, b, out = ctx
    return _unbroadcast(g / b, a.shape), _unbroadcast(-g * out / b, b.shape)


def _fw_neg(a):
    return -a, None


def _vjp_neg(ctx, g):
    return (-g,)


def _fw_matmul(a, b):
    if a.ndim < 2 or b.ndim < 2:
        raise ShapeError("matmul expects operands with ndim >= 2")
    if a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul shape mismatch {a.shape} @ {b.shape}")
    return a @ b, (a, b)


def _vjp_matmul(ctx, g):
    a, b = ctx
    ga = g @ np.swapaxes(b, -1, -2)
    gb = np.swapaxes(a, -1, -2) @ g
    return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)


def _fw_softmax(a, axis=-1, where=None):
    if where is None:
        z = a - a.max(axis=axis, keepdims=True)
        e = np.exp(z)
    else:
        z = np.where(where, a, -np.inf)
        z = z - z.max(axis=axis, keepdims=True)
        e = np.where(where, np.exp(z), 0.0)
    out = e / e.sum(axis=axis, keepdims=True)
    return out, (out, axis)


def _vjp_softmax(ctx, g):
    out, axis = ctx
    return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)


def _fw_log(a):
    if np.any(a < 0):
        raise DomainError("log of a negative value")
    clamped = a < LOG_FLOOR
    safe = np.where(clamped, LOG_FLOOR, a)
    return np.log(safe), (safe, clamped)


def _vjp_log(ctx, g):
    safe, clamped = ctx
    return (np.where(clamped, 0.0, g / safe),)


def _fw_exp(a):
    with np.errstate(over="ignore"):
        out = np.exp(a)
    return out, out


def _vjp_exp(ctx, g):
    return (g * ctx,)


def _fw_sum(a, axis=None, keepdims=False):
    return a.sum(axis=axis, keepdims=keepdims), (a.shape, axis, keepdims)


def _expand_reduced(g, shape, axis, keepdims):
    if axis is not None and not keepdims:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        axes = tuple(ax % len(shape) for ax in axes)
        for ax in sorted(axes):
            g = np.expand_dims(g, ax)
    return np.broadcast_to(g, shape)


def _vjp_sum(ctx, g):
    shape, axis, keepdims = ctx
    return (np.array(_expand_reduced(g, shape, axis, keepdims)),)


def _fw_mean(a, axis=None, keepdims=False):
    out = a.mean(axis=axis, keepdims=keepdims)
    count = a.size // max(out.size, 1)
    return out, (a.shape, axis, keepdims, count)


def _vjp_mean(ctx, g):
    shape, axis, keepdims, count = ctx
    return (np.array(_expand_reduced(g, shape, axis, keepdims)) / count,)


def _fw_gather(table, index=None):
    idx = np.asarray(index, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
        raise ShapeError("gather index out of range")
    return table[idx], (table.shape, idx)


def _vjp_gather(ctx, g):
    shape, idx = ctx
    out = np.zeros(shape)
    np.add.at(out, idx, g)
    return (out,)


def _fw_broadcast(a, shape=None):
    return np.array(np.broadcast_to(a, shape)), a.shape


def _vjp_broadcast(ctx, g):
    return (_unbroadcast(g, ctx),)


def _fw_layer_norm(a, axis=-1, eps=LN_EPS):
    mu = a.mean(axis=axis, keepdims=True)
    xc = a - mu
    var = (xc * xc).mean(axis=axis, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    return xhat, (xhat, inv, axis)


def _vjp_layer_norm(ctx, g):
    xhat, inv, axis = ctx
    n = xhat.shape[axis]
    gm = g.mean(axis=axis, keepdims=True)
    gx = (g * xhat).mean(axis=axis, keepdims=True)
    return (inv * (g - gm - xhat * gx) * (n / n),)


def _fw_relu(a):
    return np.maximum(a, 0.0), a > 0


def _vjp_relu(ctx, g):
    return (g * ctx,)


_GELU_C = math.sqrt(2.0 / math.pi)


def _fw_gelu(a):
    sq = a * a
    th = np.tanh(_GELU_C * a * (1.0 + 0.044715 * sq))
    return 0.5 * a * (1.0 + th), (a, sq, th)


def _vjp_gelu(ctx, g):
    a, sq, th = ctx
    d_inner = _GELU_C * (1.0 + 3 * 0.044715 * sq)
    d = 0.5 * (1.0 + th) + 0.5 * a * (1.0 - th * th) * d_inner
    return (g * d,)


def _fw_concat(*arrays, axis=0):
    sizes = [a.shape[axis] for a in arrays]
    return np.concatenate(arrays, axis=axis), (sizes, axis)


def _vjp_concat(ctx, g):
    sizes, axis = ctx
    cuts = np.cumsum(sizes)[:-1]
    return tuple(np.split(g, cuts, axis=axis))


def _fw_reshape(a, shape=None):
    return a.reshape(shape), a.shape


def _vjp_reshape(ctx, g):
    return (g.reshape(ctx),)


def _fw_transpose(a, axes=None):
    return np.transpose(a, axes), axes


def _vjp_transpose(ctx, g):
    if ctx is None:
        return (np.transpose(g),)
    return (np.transpose(g, np.argsort(ctx)),)


def _fw_where(a, b, cond=None):
    cond = np.asarray(cond, dtype=bool)
    return np.where(cond, a, b), (cond, a.shape, b.shape)


def _vjp_where(ctx, g):
    cond, sa, sb = ctx
    return _unbroadcast(np.where(cond, g, 0.0), sa), _unbroadcast(np.where(cond, 0.0, g), sb)


def _fw_getitem(a, index=None):
    return a[index], (a.shape, index)


def _vjp_getitem(ctx, g):
    shape, index = ctx
    out = np.zeros(shape)
    np.add.at(out, index, g)
    return (out,)


def _fw_sqrt(a):
    if np.any(a < 0):
        raise DomainError("sqrt of a negative value")
    out = np.sqrt(a)
    return out, out


def _vjp_sqrt(ctx, g):
    return (g * 0.5 / ctx,)


PRIMITIVES = {
    "add": (_fw_add, _vjp_add),
    "sub": (_fw_sub, _vjp_sub),
    "mul": (_fw_mul, _vjp_mul),
    "div": (_fw_div, _vjp_div),
    "neg": (_fw_neg, _vjp_neg),
    "matmul": (_fw_matmul, _vjp_matmul),
    "softmax": (_fw_softmax, _vjp_softmax),
    "log": (_fw_log, _vjp_log),
    "exp": (_fw_exp, _vjp_exp),
    "sum": (_fw_sum, _vjp_sum),
    "mean": (_fw_mean, _vjp_mean),
    "gather": (_fw_gather, _vjp_gather),
    "broadcast": (_fw_broadcast, _vjp_broadcast),
    "layer_norm": (_fw_layer_norm, _vjp_layer_norm),
    "relu": (_fw_relu, _vjp_relu),
    "gelu": (_fw_gelu, _vjp_gelu),
    "concat": (_fw_concat, _vjp_concat),
    "reshape": (_fw_reshape, _vjp_reshape),
    "transpose": (_fw_transpose, _vjp_transpose),
    "where": (_fw_where, _vjp_where),
    "getitem": (_fw_getitem, _vjp_getitem),
    "sqrt": (_fw_sqrt, _vjp_sqrt),
}


def apply_primitive(kind: str, inputs, **attrs) -> Tensor:
    try:
        forward, vjp = PRIMITIVES[kind]
    except KeyError:
        raise ValueError(f"unknown primitive {kind!r}") from None
    tensors = [as_tensor(x) for x in inputs]
    try:
        value, ctx = forward(*(t.data for t in tensors), **attrs)
    except ValueError as exc:
        # numpy broadcasting failures
        raise ShapeError(f"{kind}: {exc}") from None
    out = Tensor(_finite(np.asarray(value, dtype=np.float64), kind))
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in tensors):
        out.requires_grad = True
        tape.nodes.append(_Node(out, tensors, lambda g, _ctx=ctx: vjp(_ctx, g)))
    return out


def add(a, b):
    return apply_primitive("add", (a, b))


def sub(a, b):
    return apply_primitive("sub", (a, b))


def mul(a, b):
    return apply_primitive("mul", (a, b))


def div(a, b):
    return apply_primitive("div", (a, b))


def neg(a):
    return apply_primitive("neg", (a,))


def matmul(a, b):
    return apply_primitive("matmul", (a, b))


def softmax(a, axis=-1, where=None):
    return apply_primitive("softmax", (a,), axis=axis, where=where)


def log(a):
    return apply_primitive("log", (a,))


def exp(a):
    return apply_primitive("exp", (a,))


def tsum(a, axis=None, keepdims=False):
    return apply_primitive("sum", (a,), axis=axis, keepdims=keepdims)


def mean(a, axis=None, keepdims=False):
    return apply_primitive("mean", (a,), axis=axis, keepdims=keepdims)


def gather(table, index):
    return apply_primitive("gather", (table,), index=index)


def broadcast_to(a, shape):
    return apply_primitive("broadcast", (a,), shape=tuple(shape))


def layer_norm(a, axis=-1):
    return apply_primitive("layer_norm", (a,), axis=axis)


def relu(a):
    return apply_primitive("relu", (a,))


def gelu(a):
    return apply_primitive("gelu", (a,))


def concat(tensors, axis=0):
    return apply_primitive("concat", tuple(tensors), axis=axis)


def reshape(a, shape):
    return apply_primitive("reshape", (a,), shape=tuple(shape))


def transpose(a, axes=None):
    return apply_primitive("transpose", (a,), axes=None if axes is None else tuple(axes))


def where(cond, a, b):
    return apply_primitive("where", (a, b), cond=cond)


def getitem(a, index):
    return apply_primitive("getitem", (a,), index=index)


def sqrt(a):
    return apply_primitive("sqrt", (a,))


class Gradients:
    """Gradient map keyed by tensor identity; unreached tensors read as zeros."""

    def __init__(self, grads, tensors):
        self._grads = grads
        self._tensors = tensors

    def __getitem__(self, tensor: Tensor) -> np.ndarray:
        g = self._grads.get(id(tensor))
        if g is None:
            return np.zeros_like(tensor.data)
        return g

    def __contains__(self, tensor):
        return id(tensor) in self._grads

    def __len__(self):
        return len(self._grads)


def backward(loss: Tensor, tape: Tape | None = None) -> Gradients:
    if loss.data.ndim != 0 and loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    tape = tape if tape is not None else active_tape()
    grads = {id(loss): np.ones_like(loss.data)}
    keep = {id(loss): loss}
    if tape is not None:
        for node in reversed(tape.nodes):
            g = grads.get(id(node.out))
            if g is None:
                continue
            cotangents = node.vjp(g)
            for inp, ct in zip(node.inputs, cotangents):
                if ct is None or not inp.requires_grad:
                    continue
                key = id(inp)
                if key in grads:
                    grads[key] = grads[key] + ct
                else:
                    grads[key] = np.array(ct, dtype=np.float64)
                    keep[key] = inp
    return Gradients(grads, keep)


def value_and_grad(fn, params):
    """Run ``fn()`` under a fresh tape; return (loss value, list of grads)."""
    with Tape() as tape:
        loss = fn()
    grads = backward(loss, tape)
    return float(loss.data), [grads[p] for p in params]


def finite_difference_check(fn, params, h: float = 1e-6, n_coords: int = 20,
                            rng: np.random.Generator | None = None, stencil: int = 2) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``fn`` must rebuild its scalar loss from the current ``params`` values
    with all randomness frozen. Coordinates are sampled proportionally to
    parameter size; the relative error uses ``max(|g|, 1e-8)`` as the
    denominator.

    ``stencil=4`` uses the fourth-order central formula
    ``(8(f(+h) - f(-h)) - (f(+2h) - f(-2h))) / 12h``. It allows a larger
    ``h`` and so resolves gradients near the ``1e-8`` floor, where the
    two-point formula runs into float64 rounding of the loss.
    """
    if stencil not in (2, 4):
        raise ConfigError("stencil must be 2 or 4")
    rng = rng if rng is not None else np.random.default_rng(0)
    params = list(params)
    _, analytic = value_and_grad(fn, params)
    sizes = np.array([p.data.size for p in params], dtype=np.float64)
    picks = rng.choice(len(params), size=n_coords, p=sizes / sizes.sum())
    worst = 0.0
    for which in picks:
        p = params[which]
        flat = p.data.reshape(-1)
        i = int(rng.integers(flat.size))
        orig = flat[i]
        vals = {}
        for k in ((-1, 1) if stencil == 2 else (-2, -1, 1, 2)):
            flat[i] = orig + k * h
            vals[k] = float(fn().data)
        flat[i] = orig
        if not all(math.isfinite(v) for v in vals.values()):
            raise NumericError("non-finite function value during finite differences")
        if stencil == 2:
            numeric = (vals[1] - vals[-1]) / (2.0 * h)
        else:
            numeric = (8.0 * (vals[1] - vals[-1]) - (vals[2] - vals[-2])) / (12.0 * h)
        g = float(analytic[which].reshape(-1)[i])
        worst = max(worst, abs(g - numeric) / max(abs(g), 1e-8))
    return worst
