"""Dense tensors with tape-based reverse-mode automatic differentiation.

Values are numpy arrays; a :class:`Var` wraps one value together with a
gradient slot and the closure that maps an output gradient back onto its
parents. Every op accepts ``Var`` or array-likes and returns a ``Var``;
constants never receive gradients.

Layout convention used throughout the package: feature maps enter the
public API as ``C x H x W`` arrays and are flattened to ``HW x C`` pixel
rows internally, so linear layers act per pixel.
"""

from __future__ import annotations

import contextlib
import math
from dataclasses import dataclass
from typing import Callable, Iterable, Sequence

import numpy as np

EPS_COS = 1e-8
EPS_MINMAX = 1e-7
EPS_LN = 1e-5

DTYPE = np.float64


class ShapeError(ValueError):
    """Raised when operand shapes are incompatible."""


# --- allocation accounting --------------------------------------------------

_alloc_log: list[list[tuple[str, tuple[int, ...]]]] = []


@contextlib.contextmanager
def track_allocations():
    """Record ``(op, shape)`` of every buffer an op allocates inside the block.

    Views (transpose, reshape of contiguous data) are not counted since they
    share storage with their source.
    """
    log: list[tuple[str, tuple[int, ...]]] = []
    _alloc_log.append(log)
    try:
        yield log
    finally:
        _alloc_log.pop()


def _record(op: str, value: np.ndarray) -> None:
    if _alloc_log and value.flags.owndata:
        for log in _alloc_log:
            log.append((op, value.shape))


# --- Var ----------------------------------------------------------------------


class Var:
    """A node in the autodiff tape."""

    __slots__ = ("value", "grad", "requires_grad", "_parents", "_backward", "op")

    def __init__(
        self,
        value,
        requires_grad: bool = False,
        parents: tuple["Var", ...] = (),
        backward: Callable[[np.ndarray], Sequence[np.ndarray | None]] | None = None,
        op: str = "leaf",
    ):
        if not (isinstance(value, np.ndarray) and value.dtype == DTYPE):
            value = np.asarray(value, dtype=DTYPE)
        self.value = value
        self.grad = np.zeros_like(self.value) if requires_grad and not parents else None
        self.requires_grad = requires_grad
        self._parents = parents
        self._backward = backward
        self.op = op

    # conveniences
    @property
    def shape(self) -> tuple[int, ...]:
        return self.value.shape

    @property
    def ndim(self) -> int:
        return self.value.ndim

    def numpy(self) -> np.ndarray:
        return self.value

    def item(self) -> float:
        return float(self.value)

    def zero_grad(self) -> None:
        if self.grad is not None:
            self.grad[...] = 0.0

    def __repr__(self) -> str:
        return f"Var(op={self.op}, shape={self.shape}, requires_grad={self.requires_grad})"

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
        if isinstance(other, Var):
            return mul(self, reciprocal(other))
        return scale(self, 1.0 / float(other))

    def __neg__(self):
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    @property
    def T(self):
        return transpose(self)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def backward(self) -> None:
        backward(self)


def as_var(x) -> Var:
    return x if isinstance(x, Var) else Var(x)


def parameter(value) -> Var:
    return Var(np.array(value, dtype=DTYPE), requires_grad=True)


def _node(value: np.ndarray, parents: tuple[Var, ...], bw, op: str) -> Var:
    _record(op, value)
    req = any(p.requires_grad for p in parents)
    return Var(value, requires_grad=req, parents=parents if req else (), backward=bw if req else None, op=op)


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


def backward(loss: Var) -> None:
    """Fill ``.grad`` of every parameter reachable from the scalar ``loss``.

    Gradients accumulate across calls; call :func:`zero_grad` between steps.
    """
    if loss.value.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return

    order: list[Var] = []
    seen: set[int] = set()
    stack: list[tuple[Var, bool]] = [(loss, False)]
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
            if p.requires_grad and id(p) not in seen:
                stack.append((p, False))

    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.value)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.grad is None:
                node.grad = np.zeros_like(node.value)
            node.grad += g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def zero_grad(params: Iterable[Var]) -> None:
    for p in params:
        p.zero_grad()


# --- elementwise ------------------------------------------------------------


def add(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    sa, sb = a.shape, b.shape
    return _node(a.value + b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    sa, sb = a.shape, b.shape
    return _node(a.value - b.value, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Var:
    a, b = as_var(a), as_var(b)
    av, bv = a.value, b.value
    return _node(
        av * bv,
        (a, b),
        lambda g: (_unbroadcast(g * bv, av.shape), _unbroadcast(g * av, bv.shape)),
        "mul",
    )


def scale(a, s: float) -> Var:
    a = as_var(a)
    s = float(s)
    return _node(a.value * s, (a,), lambda g: (g * s,), "scale")


def reciprocal(a) -> Var:
    a = as_var(a)
    out = 1.0 / a.value
    return _node(out, (a,), lambda g: (-g * out * out,), "reciprocal")


def log(a) -> Var:
    a = as_var(a)
    av = a.value
    return _node(np.log(av), (a,), lambda g: (g / av,), "log")


def exp(a) -> Var:
    a = as_var(a)
    out = np.exp(a.value)
    return _node(out, (a,), lambda g: (g * out,), "exp")


def sigmoid(a) -> Var:
    a = as_var(a)
    x = a.value
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _node(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def relu(a) -> Var:
    a = as_var(a)
    keep = a.value > 0
    return _node(np.where(keep, a.value, 0.0), (a,), lambda g: (g * keep,), "relu")


def clip(a, lo: float, hi: float) -> Var:
    """Clamp to ``[lo, hi]``; gradient passes only where the input is inside."""
    a = as_var(a)
    inside = (a.value >= lo) & (a.value <= hi)
    return _node(np.clip(a.value, lo, hi), (a,), lambda g: (g * inside,), "clip")


# --- reductions -----------------------------------------------------------


def sum(a, axis=None, keepdims: bool = False) -> Var:  # noqa: A001
    a = as_var(a)
    shape = a.shape

    def bw(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _node(np.asarray(a.value.sum(axis=axis, keepdims=keepdims)), (a,), bw, "sum")


def mean(a, axis=None, keepdims: bool = False) -> Var:
    a = as_var(a)
    n = a.value.size if axis is None else np.prod([a.shape[i] for i in np.atleast_1d(axis)])
    return scale(sum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def _extreme(a, fn, op: str) -> Var:
    a = as_var(a)
    flat = a.value.reshape(-1)
    idx = int(fn(flat))
    shape = a.shape

    def bw(g):
        out = np.zeros(int(np.prod(shape)), dtype=DTYPE)
        out[idx] = g
        return (out.reshape(shape),)

    return _node(np.asarray(flat[idx]), (a,), bw, op)


def vmax(a) -> Var:
    """Global maximum; the gradient routes to the first arg-max."""
    return _extreme(a, np.argmax, "max")


def vmin(a) -> Var:
    return _extreme(a, np.argmin, "min")


# --- shape ops --------------------------------------------------------------


def reshape(a, shape) -> Var:
    a = as_var(a)
    old = a.shape
    return _node(a.value.reshape(shape), (a,), lambda g: (g.reshape(old),), "reshape")


def transpose(a) -> Var:
    a = as_var(a)
    if a.ndim != 2:
        raise ShapeError("transpose expects a 2-D tensor")
    return _node(a.value.T, (a,), lambda g: (g.T,), "transpose")


def concat(parts: Sequence, axis: int = 0) -> Var:
    parts = [as_var(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    try:
        out = np.concatenate([p.value for p in parts], axis=axis)
    except ValueError as exc:
        raise ShapeError(str(exc)) from None
    cuts = np.cumsum(sizes)[:-1]
    return _node(out, tuple(parts), lambda g: tuple(np.split(g, cuts, axis=axis)), "concat")


def concat_channels(a, b) -> Var:
    """Stack ``C1 x H x W`` and ``C2 x H x W`` maps along channels, ``a`` first."""
    a, b = as_var(a), as_var(b)
    if a.ndim != 3 or b.ndim != 3 or a.shape[1:] != b.shape[1:]:
        raise ShapeError(f"spatial shapes differ: {a.shape} vs {b.shape}")
    return concat([a, b], axis=0)


def take_rows(a, idx: np.ndarray) -> Var:
    a = as_var(a)
    idx = np.asarray(idx)
    shape = a.shape

    def bw(g):
        out = np.zeros(shape, dtype=DTYPE)
        np.add.at(out, idx, g)
        return (out,)

    return _node(a.value[idx], (a,), bw, "take_rows")


def take_cols(a, j: int) -> Var:
    """Column ``j`` of a 2-D tensor as a vector."""
    a = as_var(a)
    shape = a.shape

    def bw(g):
        out = np.zeros(shape, dtype=DTYPE)
        out[:, j] = g
        return (out,)

    return _node(a.value[:, j].copy(), (a,), bw, "take_cols")


def broadcast_rows(v, n: int) -> Var:
    """Repeat a length-C vector into an ``n x C`` matrix."""
    v = as_var(v)
    return _node(np.broadcast_to(v.value, (n,) + v.shape).copy(), (v,), lambda g: (g.sum(axis=0),), "broadcast_rows")


def chw_to_rows(a) -> Var:
    """``C x H x W`` map to ``HW x C`` pixel rows (a view, no copy)."""
    a = as_var(a)
    c = a.shape[0]
    return transpose(reshape(a, (c, -1)))


def rows_to_chw(a, h: int, w: int) -> Var:
    a = as_var(a)
    return reshape(transpose(a), (a.shape[1], h, w))


# --- linear algebra -----------------------------------------------------------


def matmul(a, b) -> Var:
    """Matrix product for 2-D x 2-D, 2-D x 1-D and 1-D x 2-D operands."""
    a, b = as_var(a), as_var(b)
    av, bv = a.value, b.value
    if av.ndim not in (1, 2) or bv.ndim not in (1, 2) or av.ndim + bv.ndim < 3:
        raise ShapeError(f"matmul expects matrix operands, got {av.shape} and {bv.shape}")
    if av.shape[-1] != bv.shape[0]:
        raise ShapeError(f"inner dimensions differ: {av.shape} @ {bv.shape}")

    def bw(g):
        if av.ndim == 1:
            return bv @ g, np.outer(av, g)
        if bv.ndim == 1:
            return np.outer(g, bv), av.T @ g
        return g @ bv.T, av.T @ g

    return _node(av @ bv, (a, b), bw, "matmul")


def _row_norms(x: np.ndarray) -> np.ndarray:
    return np.sqrt(np.einsum("ij,ij->i", x, x))


def cosine(u, v) -> Var:
    """Cosine similarity of two vectors, ``u.v / (|u||v| + eps)`` clamped to [-1, 1]."""
    u, v = as_var(u), as_var(v)
    uv, vv = u.value, v.value
    if uv.shape != vv.shape or uv.ndim != 1:
        raise ShapeError(f"cosine expects equal-length vectors, got {uv.shape} and {vv.shape}")
    nu, nv = float(np.sqrt(uv @ uv)), float(np.sqrt(vv @ vv))
    den = nu * nv + EPS_COS
    raw = float(uv @ vv) / den
    out = min(max(raw, -1.0), 1.0)
    inside = -1.0 <= raw <= 1.0

    def bw(g):
        if not inside:
            return np.zeros_like(uv), np.zeros_like(vv)
        g = float(g)
        # d/du [u.v / (|u||v| + e)] = v/den - (u.v) * |v| * u/|u| / den^2
        gu = vv / den - (uv @ vv) * nv * (uv / nu if nu > 0 else 0.0) / den**2
        gv = uv / den - (uv @ vv) * nu * (vv / nv if nv > 0 else 0.0) / den**2
        return g * gu, g * gv

    return _node(np.asarray(out), (u, v), bw, "cosine")


def cosine_rows(x, p) -> Var:
    """Cosine between every row of ``x`` (``n x C``) and the vector ``p`` (``C``).

    Memory is ``O(n + C)`` beyond the inputs: no per-element temporary and
    no ``n x n`` matrix.
    """
    x, p = as_var(x), as_var(p)
    xv, pv = x.value, p.value
    if xv.ndim != 2 or pv.shape != (xv.shape[1],):
        raise ShapeError(f"cosine_rows expects n x C and C, got {xv.shape} and {pv.shape}")
    nx = _row_norms(xv)
    npv = float(np.sqrt(pv @ pv))
    dots = xv @ pv
    den = nx * npv + EPS_COS
    raw = dots / den
    out = np.clip(raw, -1.0, 1.0)
    inside = (raw >= -1.0) & (raw <= 1.0)

    def bw(g):
        g = g * inside
        safe_nx = np.where(nx > 0, nx, 1.0)
        # row gradient: p/den - dots*|p| * x/|x| / den^2
        coef_p = g / den
        coef_x = -g * dots * npv / (den**2 * safe_nx) * (nx > 0)
        gx = np.outer(coef_p, pv) + coef_x[:, None] * xv if x.requires_grad else None
        gp = None
        if p.requires_grad:
            gp = xv.T @ coef_p
            if npv > 0:
                gp = gp - pv * float(np.sum(g * dots * nx / den**2)) / npv
        return gx, gp

    return _node(out, (x, p), bw, "cosine_rows")


def softmax(x, axis: int = -1) -> Var:
    x = as_var(x)
    z = x.value - x.value.max(axis=axis, keepdims=True)
    e = np.exp(z)
    y = e / e.sum(axis=axis, keepdims=True)
    return _node(y, (x,), lambda g: (y * (g - (g * y).sum(axis=axis, keepdims=True)),), "softmax")


def minmax_norm(x) -> Var:
    """``(x - min) / (max - min + eps)``; a constant input maps to zeros."""
    x = as_var(x)
    lo, hi = vmin(x), vmax(x)
    return mul(sub(x, lo), reciprocal(add(sub(hi, lo), EPS_MINMAX)))


def layer_norm(x, gain, bias, eps: float = EPS_LN) -> Var:
    """Normalise each row of ``x`` (``n x C``) over channels, then scale and shift per channel."""
    x, gain, bias = as_var(x), as_var(gain), as_var(bias)
    xv = x.value
    mu = xv.mean(axis=1, keepdims=True)
    xc = xv - mu
    var = (xc * xc).mean(axis=1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gv = gain.value
    c = xv.shape[1]

    def bw(g):
        gg = (g * xhat).sum(axis=0) if gain.requires_grad else None
        gb = g.sum(axis=0) if bias.requires_grad else None
        gx = None
        if x.requires_grad:
            dxh = g * gv
            gx = inv / c * (c * dxh - dxh.sum(axis=1, keepdims=True) - xhat * (dxh * xhat).sum(axis=1, keepdims=True))
        return gx, gg, gb

    return _node(xhat * gv + bias.value, (x, gain, bias), bw, "layer_norm")


# --- resampling --------------------------------------------------------------


def avg_pool(x, k: int) -> Var:
    """Non-overlapping ``k x k`` average pooling on the trailing two axes."""
    x = as_var(x)
    *lead, h, w = x.shape
    if h % k or w % k:
        raise ShapeError(f"spatial size {(h, w)} not divisible by {k}")
    out = x.value.reshape(*lead, h // k, k, w // k, k).mean(axis=(-3, -1))

    def bw(g):
        g = np.repeat(np.repeat(g, k, axis=-2), k, axis=-1)
        return (g / (k * k),)

    return _node(out, (x,), bw, "avg_pool")


def upsample_nearest(x, k: int) -> Var:
    x = as_var(x)
    out = np.repeat(np.repeat(x.value, k, axis=-2), k, axis=-1)

    def bw(g):
        *lead, h, w = g.shape
        return (g.reshape(*lead, h // k, k, w // k, k).sum(axis=(-3, -1)),)

    return _node(out, (x,), bw, "upsample_nearest")


# --- layers -------------------------------------------------------------------


def glorot(rng: np.random.Generator, fan_out: int, fan_in: int) -> np.ndarray:
    bound = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-bound, bound, size=(fan_out, fan_in))


@dataclass
class LinearLayer:
    weight: Var  # out x in
    bias: Var  # out

    def __post_init__(self):
        if self.weight.ndim != 2 or self.bias.shape != (self.weight.shape[0],):
            raise ShapeError(f"inconsistent linear layer: W {self.weight.shape}, b {self.bias.shape}")

    @classmethod
    def init(cls, rng: np.random.Generator, n_in: int, n_out: int) -> "LinearLayer":
        return cls(parameter(glorot(rng, n_out, n_in)), parameter(np.zeros(n_out)))

    @property
    def n_in(self) -> int:
        return self.weight.shape[1]

    @property
    def n_out(self) -> int:
        return self.weight.shape[0]

    def params(self) -> list[Var]:
        return [self.weight, self.bias]

    def __call__(self, x) -> Var:
        return linear_forward(self, x)


def linear_forward(layer: LinearLayer, x) -> Var:
    """``x @ W.T + b`` for ``x`` of shape ``n x in``."""
    x = as_var(x)
    if x.ndim != 2 or x.shape[1] != layer.n_in:
        raise ShapeError(f"linear layer expects n x {layer.n_in}, got {x.shape}")
    return add(matmul(x, transpose(layer.weight)), layer.bias)


@dataclass
class LayerNorm:
    gain: Var
    bias: Var

    @classmethod
    def init(cls, c: int) -> "LayerNorm":
        return cls(parameter(np.ones(c)), parameter(np.zeros(c)))

    def params(self) -> list[Var]:
        return [self.gain, self.bias]

    def __call__(self, x) -> Var:
        return layer_norm(x, self.gain, self.bias)


@dataclass
class FeedForward:
    """Two linear layers ``C -> 4C -> C`` with a ReLU in between."""

    fc1: LinearLayer
    fc2: LinearLayer

    @classmethod
    def init(cls, rng: np.random.Generator, c: int, expand: int = 4) -> "FeedForward":
        return cls(LinearLayer.init(rng, c, expand * c), LinearLayer.init(rng, expand * c, c))

    def params(self) -> list[Var]:
        return self.fc1.params() + self.fc2.params()

    def __call__(self, x) -> Var:
        return self.fc2(relu(self.fc1(x)))


@dataclass
class Module:
    """Mixin that collects parameters from dataclass fields."""

    def params(self) -> list[Var]:
        out: list[Var] = []
        for name in self.__dataclass_fields__:
            out.extend(_collect(getattr(self, name)))
        return out


def _collect(obj) -> list[Var]:
    if isinstance(obj, Var):
        return [obj] if obj.requires_grad else []
    if hasattr(obj, "params"):
        return obj.params()
    if isinstance(obj, (list, tuple)):
        return [p for item in obj for p in _collect(item)]
    return []


__all__ = [
    "Var", "LinearLayer", "LayerNorm", "FeedForward", "Module", "ShapeError",
    "add", "sub", "mul", "scale", "reciprocal", "log", "exp", "sigmoid", "relu", "clip",
    "sum", "mean", "vmax", "vmin", "reshape", "transpose", "concat", "concat_channels",
    "take_rows", "take_cols", "broadcast_rows", "chw_to_rows", "rows_to_chw", "matmul", "cosine",
    "cosine_rows", "softmax", "minmax_norm", "layer_norm", "avg_pool", "upsample_nearest",
    "linear_forward", "backward", "zero_grad", "parameter", "as_var", "glorot",
    "track_allocations",
]
