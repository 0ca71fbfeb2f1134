"""Reverse-mode automatic differentiation over numpy arrays.

Every primitive builds its output eagerly and, when gradients are enabled and
an operand requires them, records a closure mapping the output gradient to a
tuple of operand gradients. :meth:`Tensor.backward` replays the closures in
reverse topological order and accumulates into leaf tensors.
"""

from __future__ import annotations

import contextlib
import math
from typing import Callable, Sequence

import numpy as np

from streampoint.errors import NumericFault, ShapeError

LN_EPS = 1e-6
ROPE_BASE = 10000.0

_grad_enabled = True
_checked = False


@contextlib.contextmanager
def no_grad():
    global _grad_enabled
    prev, _grad_enabled = _grad_enabled, False
    try:
        yield
    finally:
        _grad_enabled = prev


@contextlib.contextmanager
def checked(enabled: bool = True):
    """Raise :class:`NumericFault` whenever an op sees or makes a non-finite value."""
    global _checked
    prev, _checked = _checked, enabled
    try:
        yield
    finally:
        _checked = prev


def is_grad_enabled() -> bool:
    return _grad_enabled


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")
    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64 if dtype is None else dtype)
        self.data = arr
        self.grad = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op = "leaf"

    # -- introspection ---------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, dtype={self.dtype}, op={self._op})"

    def zero_grad(self) -> None:
        self.grad = None

    # -- autodiff --------------------------------------------------------
    def backward(self, grad=None) -> None:
        if grad is None:
            if self.data.size != 1:
                raise ShapeError(f"backward() without a seed needs a scalar, got shape {self.shape}")
            grad = np.ones_like(self.data)
        order = _topological(self)
        grads = {id(self): np.asarray(grad, dtype=self.dtype)}
        for node in reversed(order):
            g = grads.pop(id(node), None)
            if g is None:
                continue
            if node._backward is None:
                node.grad = g if node.grad is None else node.grad + g
                continue
            for parent, pg in zip(node._parents, node._backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                prev = grads.get(id(parent))
                grads[id(parent)] = pg if prev is None else prev + pg

    # -- operator sugar --------------------------------------------------
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
        return scale(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, axes=None):
        return transpose(self, axes)

    @property
    def T(self):
        return transpose(self)

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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


def as_tensor(x, like: Tensor | None = None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    dtype = like.dtype if like is not None else None
    return Tensor(np.asarray(x, dtype=dtype))


def _check(op: str, arrays) -> None:
    for a in arrays:
        if not np.all(np.isfinite(a)):
            raise NumericFault(f"non-finite value in {op}")


def _make(data: np.ndarray, parents: Sequence[Tensor], backward: Callable, op: str) -> Tensor:
    if _checked:
        _check(op, [p.data for p in parents])
        _check(op, [data])
    out = Tensor(data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward
        out._op = op
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _broadcast_shape(a: Tensor, b: Tensor, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# -- elementwise arithmetic -------------------------------------------------

def add(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "add")
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)), "add")


def sub(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "sub")
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b), lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)), "sub")


def mul(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "mul")
    ad, bd = a.data, b.data

    def backward(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return _make(ad * bd, (a, b), backward, "mul")


def div(a, b) -> Tensor:
    a, b = _pair(a, b)
    _broadcast_shape(a, b, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def backward(g):
        return (
            _unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None,
        )

    return _make(out, (a, b), backward, "div")


def scale(a: Tensor, c: float) -> Tensor:
    c = a.dtype.type(c)
    return _make(a.data * c, (a,), lambda g: (g * c,), "scale")


def _pair(a, b) -> tuple[Tensor, Tensor]:
    if isinstance(a, Tensor):
        return a, as_tensor(b, a)
    b = as_tensor(b)
    return as_tensor(a, b), b


# -- linear algebra ---------------------------------------------------------

def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {a.shape} and {b.shape}")
    ad, bd = a.data, b.data

    def backward(g):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if a.requires_grad else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if b.requires_grad else None
        return ga, gb

    return _make(ad @ bd, (a, b), backward, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` with ``weight`` of shape ``(in, out)``."""
    if weight.ndim != 2 or x.shape[-1] != weight.shape[0]:
        raise ShapeError(f"linear: input {x.shape} does not match weight {weight.shape}")
    xd, wd = x.data, weight.data
    out = xd @ wd
    if bias is not None:
        if bias.shape != (wd.shape[1],):
            raise ShapeError(f"linear: bias {bias.shape} does not match weight {weight.shape}")
        out = out + bias.data
    n_in = wd.shape[0]

    def backward(g):
        g2 = g.reshape(-1, g.shape[-1])
        gx = g @ wd.T if x.requires_grad else None
        gw = xd.reshape(-1, n_in).T @ g2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        gb = g2.sum(axis=0) if bias.requires_grad else None
        return gx, gw, gb

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out, parents, backward, "linear")


# -- shape manipulation -----------------------------------------------------

def reshape(x: Tensor, shape) -> Tensor:
    src = x.shape
    try:
        out = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {src} as {tuple(shape)}") from None
    return _make(out, (x,), lambda g: (g.reshape(src),), "reshape")


def transpose(x: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(x.ndim)))
    axes = tuple(axes)
    inv = tuple(np.argsort(axes))
    return _make(x.data.transpose(axes), (x,), lambda g: (g.transpose(inv),), "transpose")


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    try:
        out = np.concatenate([t.data for t in tensors], axis=axis)
    except ValueError:
        raise ShapeError(f"concat: incompatible shapes {[t.shape for t in tensors]} on axis {axis}") from None
    bounds = np.cumsum([t.shape[axis] for t in tensors])[:-1]

    def backward(g):
        return tuple(np.split(g, bounds, axis=axis))

    return _make(out, tensors, backward, "concat")


def stack(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    tensors = list(tensors)
    expanded = []
    for t in tensors:
        ax = axis if axis >= 0 else t.ndim + 1 + axis
        expanded.append(reshape(t, t.shape[:ax] + (1,) + t.shape[ax:]))
    return concat(expanded, axis=axis)


def slice_axis(x: Tensor, start: int, stop: int, axis: int = -1) -> Tensor:
    axis = axis % x.ndim
    index = (slice(None),) * axis + (slice(start, stop),)
    shape, dtype = x.shape, x.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        full[index] = g
        return (full,)

    return _make(x.data[index], (x,), backward, "slice")


def split(x: Tensor, sizes: Sequence[int], axis: int = -1) -> list[Tensor]:
    if sum(sizes) != x.shape[axis]:
        raise ShapeError(f"split: sizes {list(sizes)} do not cover axis of length {x.shape[axis]}")
    out, start = [], 0
    for n in sizes:
        out.append(slice_axis(x, start, start + n, axis))
        start += n
    return out


def gather(x: Tensor, index) -> Tensor:
    """Rows of ``x`` along axis 0."""
    index = np.asarray(index, dtype=np.int64)
    shape, dtype = x.shape, x.dtype

    def backward(g):
        full = np.zeros(shape, dtype=dtype)
        np.add.at(full, index, g)
        return (full,)

    return _make(x.data[index], (x,), backward, "gather")


# -- reductions -------------------------------------------------------------

def _normalize_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, x.ndim)
    shape = x.shape
    kept = tuple(1 if i in axes else n for i, n in enumerate(shape))

    def backward(g):
        return (np.broadcast_to(g.reshape(kept), shape),)

    return _make(np.asarray(x.data.sum(axis=axes, keepdims=keepdims)), (x,), backward, "sum")


def mean(x: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _normalize_axes(axis, x.ndim)
    count = int(np.prod([x.shape[a] for a in axes])) if axes else 1
    return scale(tsum(x, axis, keepdims), 1.0 / count)


# -- nonlinearities -----------------------------------------------------------

def exp(x: Tensor) -> Tensor:
    out = np.exp(x.data)
    return _make(out, (x,), lambda g: (g * out,), "exp")


def log(x: Tensor) -> Tensor:
    xd = x.data
    return _make(np.log(xd), (x,), lambda g: (g / xd,), "log")


def sqrt(x: Tensor) -> Tensor:
    out = np.sqrt(x.data)
    return _make(out, (x,), lambda g: (g * 0.5 / out,), "sqrt")


def sigmoid(x: Tensor) -> Tensor:
    xd = x.data
    out = np.empty_like(xd)
    pos = xd >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-xd[pos]))
    ez = np.exp(xd[~pos])
    out[~pos] = ez / (1.0 + ez)
    return _make(out, (x,), lambda g: (g * out * (1.0 - out),), "sigmoid")


_GELU_K = math.sqrt(2.0 / math.pi)


def gelu(x: Tensor) -> Tensor:
    """Tanh-approximated GELU."""
    xd = x.data
    x2 = xd * xd
    t = np.tanh(_GELU_K * xd * (1.0 + 0.044715 * x2))
    out = 0.5 * xd * (1.0 + t)

    def backward(g):
        d = 0.5 * (1.0 + t) + 0.5 * xd * (1.0 - t * t) * _GELU_K * (1.0 + 3 * 0.044715 * x2)
        return (g * d,)

    return _make(out, (x,), backward, "gelu")


def softmax(x: Tensor) -> Tensor:
    if x.shape[-1] == 0:
        raise ShapeError("softmax over an empty axis")
    z = x.data - x.data.max(axis=-1, keepdims=True)
    e = np.exp(z)
    out = e / e.sum(axis=-1, keepdims=True)

    def backward(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _make(out, (x,), backward, "softmax")


def l2norm(x: Tensor) -> Tensor:
    """Euclidean norm over the last axis; the subgradient at 0 is taken as 0."""
    xd = x.data
    out = np.sqrt((xd * xd).sum(axis=-1))

    def backward(g):
        safe = np.where(out > 0, out, 1.0)
        return (np.where(out[..., None] > 0, xd / safe[..., None], 0.0) * g[..., None],)

    return _make(out, (x,), backward, "l2norm")


# -- normalization ------------------------------------------------------------

def _ln_backward(gxhat, xhat, rstd):
    return rstd * (
        gxhat - gxhat.mean(axis=-1, keepdims=True) - xhat * (gxhat * xhat).mean(axis=-1, keepdims=True)
    )


def layer_norm(x: Tensor, gain: Tensor | None = None, bias: Tensor | None = None, eps: float = LN_EPS) -> Tensor:
    if x.shape[-1] == 0:
        raise ShapeError("layer_norm over an empty axis")
    d = x.shape[-1]
    for p in (gain, bias):
        if p is not None and p.shape != (d,):
            raise ShapeError(f"layer_norm: affine parameter {p.shape} does not match width {d}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * rstd
    out = xhat
    if gain is not None:
        out = out * gain.data
    if bias is not None:
        out = out + bias.data

    def backward(g):
        gxhat = g * gain.data if gain is not None else g
        grads = [_ln_backward(gxhat, xhat, rstd) if x.requires_grad else None]
        g2 = g.reshape(-1, d)
        if gain is not None:
            grads.append((g2 * xhat.reshape(-1, d)).sum(axis=0) if gain.requires_grad else None)
        if bias is not None:
            grads.append(g2.sum(axis=0) if bias.requires_grad else None)
        return tuple(grads)

    parents = tuple(p for p in (x, gain, bias) if p is not None)
    return _make(out, parents, backward, "layer_norm")


def modulated_layer_norm(
    x: Tensor,
    cond: Tensor,
    w_gain: Tensor,
    b_gain: Tensor,
    w_bias: Tensor,
    b_bias: Tensor,
    eps: float = LN_EPS,
) -> Tensor:
    """Layer norm whose gain and bias are affine functions of a conditioning vector.

    ``gain = cond @ w_gain + b_gain`` and ``bias = cond @ w_bias + b_bias``;
    ``x`` is ``(..., d)`` and ``cond`` a single vector shared by all rows.
    """
    d = x.shape[-1]
    if cond.ndim != 1 or w_gain.shape != (cond.shape[0], d) or w_bias.shape != (cond.shape[0], d):
        raise ShapeError(
            f"modulated_layer_norm: x {x.shape}, cond {cond.shape}, w_gain {w_gain.shape}, w_bias {w_bias.shape}"
        )
    xd, cd = x.data, cond.data
    gain = cd @ w_gain.data + b_gain.data
    bias = cd @ w_bias.data + b_bias.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    rstd = 1.0 / np.sqrt((xc * xc).mean(axis=-1, keepdims=True) + eps)
    xhat = xc * rstd
    out = xhat * gain + bias

    def backward(g):
        g2 = g.reshape(-1, d)
        d_gain = (g2 * xhat.reshape(-1, d)).sum(axis=0)
        d_bias = g2.sum(axis=0)
        gx = _ln_backward(g * gain, xhat, rstd) if x.requires_grad else None
        gc = w_gain.data @ d_gain + w_bias.data @ d_bias
        return (
            gx,
            gc,
            np.outer(cd, d_gain) if w_gain.requires_grad else None,
            d_gain,
            np.outer(cd, d_bias) if w_bias.requires_grad else None,
            d_bias,
        )

    return _make(out, (x, cond, w_gain, b_gain, w_bias, b_bias), backward, "modulated_layer_norm")


# -- rotary position embedding -------------------------------------------------

_rope_cache: dict = {}


def rope_angles(positions, dim: int, base: float = ROPE_BASE) -> np.ndarray:
    """Rotation angle per (token, feature pair); negative positions map to angle 0.

    ``positions`` of shape ``(n,)`` rotates all ``dim/2`` pairs with that index.
    Shape ``(n, 2)`` is the 2D variant: the first half of the pairs follows the
    row coordinate, the second half the column coordinate.
    """
    positions = np.asarray(positions)
    key = (positions.tobytes(), positions.shape, dim, base)
    cached = _rope_cache.get(key)
    if cached is not None:
        return cached
    if dim % 2:
        raise ShapeError(f"rope needs an even feature dimension, got {dim}")
    pos = np.where(positions < 0, 0, positions).astype(np.float64)
    if pos.ndim == 1:
        theta = base ** (-2.0 * np.arange(dim // 2) / dim)
        angles = pos[:, None] * theta
    elif pos.ndim == 2 and pos.shape[1] == 2:
        if dim % 4:
            raise ShapeError(f"2D rope needs a feature dimension divisible by 4, got {dim}")
        half = dim // 2
        theta = base ** (-2.0 * np.arange(half // 2) / half)
        angles = np.concatenate([pos[:, :1] * theta, pos[:, 1:] * theta], axis=1)
    else:
        raise ShapeError(f"rope positions must be (n,) or (n, 2), got {positions.shape}")
    if len(_rope_cache) > 256:
        _rope_cache.clear()
    _rope_cache[key] = angles
    return angles


def rope_apply(x: Tensor, positions, base: float = ROPE_BASE) -> Tensor:
    """Rotate interleaved feature pairs ``(x[2i], x[2i+1])`` of each token.

    ``x`` is ``(..., n, dim)``; ``positions`` indexes the ``n`` tokens.
    """
    n, dim = x.shape[-2], x.shape[-1]
    if dim % 2:
        raise ShapeError(f"rope needs an even feature dimension, got {dim}")
    positions = np.asarray(positions)
    if positions.shape[0] != n:
        raise ShapeError(f"rope: {positions.shape[0]} positions for {n} tokens")
    angles = rope_angles(positions, dim, base)
    cos = np.cos(angles).astype(x.dtype)
    sin = np.sin(angles).astype(x.dtype)
    xd = x.data
    xe, xo = xd[..., 0::2], xd[..., 1::2]
    out = np.empty_like(xd)
    out[..., 0::2] = xe * cos - xo * sin
    out[..., 1::2] = xe * sin + xo * cos

    def backward(g):
        ge, go = g[..., 0::2], g[..., 1::2]
        gx = np.empty_like(g)
        gx[..., 0::2] = ge * cos + go * sin
        gx[..., 1::2] = go * cos - ge * sin
        return (gx,)

    return _make(out, (x,), backward, "rope")
