"""Minimal reverse-mode automatic differentiation over dense float64 arrays.

Every operation returns a new :class:`Tensor` holding a reference to its
inputs and a closure mapping the output gradient to input gradients.  The
graph is rebuilt on each forward pass; :func:`backward` orders it
topologically and walks it once in reverse.

Leaf tensors (created directly with ``requires_grad=True``) accumulate into
``.grad`` across repeated ``backward`` calls until :meth:`Tensor.zero_grad`.
"""

from __future__ import annotations

import contextlib
from typing import Callable, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

__all__ = [
    "Tensor",
    "DimensionError",
    "DomainError",
    "ContractError",
    "no_grad",
    "set_debug",
    "tensor",
    "backward",
    "grad_check",
    "matmul",
    "linear",
    "softmax",
    "log_softmax",
    "layer_norm",
    "conv3d",
    "concat",
    "take",
    "where",
]


class DimensionError(ValueError):
    """Operand extents are incompatible."""


class DomainError(ValueError):
    """Input lies outside an operation's domain."""


class ContractError(RuntimeError):
    """A caller broke an API precondition."""


_grad_enabled = True
_debug = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def set_debug(flag: bool) -> bool:
    """Toggle the non-finite output assertion; returns the previous setting."""
    global _debug
    prev = _debug
    _debug = bool(flag)
    return prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "_op")

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False):
        self.data = np.ascontiguousarray(np.array(data, dtype=np.float64))
        self.grad: np.ndarray | None = None
        self.requires_grad = bool(requires_grad)
        self._parents: tuple[Tensor, ...] = ()
        self._backward: Callable | None = None
        self._op = "leaf"

    # -- basic protocol --------------------------------------------------
    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def is_leaf(self) -> bool:
        return not self._parents

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}, op={self._op}{flag})"

    def __len__(self) -> int:
        return self.shape[0]

    # -- operators ---------------------------------------------------------
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
        return mul(self, -1.0)

    def __pow__(self, exponent: float):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    # -- method forms ------------------------------------------------------
    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def backward(self) -> None:
        backward(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _result(data: np.ndarray, parents: Sequence[Tensor], bwd: Callable, op: str) -> Tensor:
    out = Tensor.__new__(Tensor)
    out.data = data if data.flags.c_contiguous else np.ascontiguousarray(data)
    if out.data.dtype != np.float64:
        out.data = out.data.astype(np.float64)
    out.grad = None
    out._op = op
    if _debug and not np.isfinite(out.data).all():
        raise FloatingPointError(f"non-finite values produced by {op}")
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = bwd
    else:
        out.requires_grad = False
        out._parents = ()
        out._backward = None
    return out


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


# ---------------------------------------------------------------------------
# backward pass
# ---------------------------------------------------------------------------


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack: list[tuple[Tensor, bool]] = [(root, False)]
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
    return order


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` of every leaf that ``loss`` depends on.

    Gradients accumulate into existing leaf buffers; call ``zero_grad`` on
    parameters between steps.
    """
    if loss.data.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        raise ContractError("loss is not connected to any tensor requiring grad")
    tape = _topological(loss)
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node.is_leaf:
            node.grad = g.copy() if node.grad is None else node.grad + g
            continue
        for parent, pg in zip(node._parents, node._backward(g)):
            if pg is None or not parent.requires_grad:
                continue
            key = id(parent)
            if key in grads:
                grads[key] = grads[key] + pg
            else:
                grads[key] = pg


def grad_check(f: Callable[..., Tensor], inputs, h: float = 1e-4) -> float:
    """Max relative error between analytic and central-difference gradients.

    ``inputs`` is a tensor or a sequence of tensors; every one is perturbed.
    The error per coordinate is ``|a - n| / max(1, |a|)``.
    """
    xs = [inputs] if isinstance(inputs, Tensor) else list(inputs)
    if h <= 0:
        raise DomainError("step h must be positive")
    saved = [(x.requires_grad, x.grad) for x in xs]
    for x in xs:
        x.requires_grad = True
        x.grad = None
    try:
        out = f(*xs) if not isinstance(inputs, Tensor) else f(xs[0])
        backward(out)
        analytic = [np.zeros_like(x.data) if x.grad is None else x.grad.copy() for x in xs]
        worst = 0.0
        with no_grad():
            for k, x in enumerate(xs):
                flat = x.data.reshape(-1)
                for i in range(flat.size):
                    orig = flat[i]
                    flat[i] = orig + h
                    up = _call_scalar(f, inputs, xs)
                    flat[i] = orig - h
                    down = _call_scalar(f, inputs, xs)
                    flat[i] = orig
                    num = (up - down) / (2.0 * h)
                    a = analytic[k].reshape(-1)[i]
                    if not (np.isfinite(num) and np.isfinite(a)):
                        raise FloatingPointError(
                            f"non-finite gradient at input {k}, coordinate {i}"
                        )
                    worst = max(worst, abs(a - num) / max(1.0, abs(a)))
        return worst
    finally:
        for x, (rg, g) in zip(xs, saved):
            x.requires_grad = rg
            x.grad = g


def _call_scalar(f, inputs, xs) -> float:
    out = f(*xs) if not isinstance(inputs, Tensor) else f(xs[0])
    return float(out.data.reshape(-1)[0])


# ---------------------------------------------------------------------------
# elementwise arithmetic
# ---------------------------------------------------------------------------


def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result(
        a.data + b.data,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)),
        "add",
    )


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    sa, sb = a.shape, b.shape
    return _result(
        a.data - b.data,
        (a, b),
        lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)),
        "sub",
    )


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data

    def bwd(g):
        return (
            _unbroadcast(g * bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(g * ad, bd.shape) if b.requires_grad else None,
        )

    return _result(ad * bd, (a, b), bwd, "mul")


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    ad, bd = a.data, b.data
    out = ad / bd

    def bwd(g):
        return (
            _unbroadcast(g / bd, ad.shape) if a.requires_grad else None,
            _unbroadcast(-g * out / bd, bd.shape) if b.requires_grad else None,
        )

    return _result(out, (a, b), bwd, "div")


def power(a: Tensor, exponent: float) -> Tensor:
    ad = a.data
    return _result(
        ad**exponent,
        (a,),
        lambda g: (g * exponent * ad ** (exponent - 1),),
        "pow",
    )


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return _result(out, (a,), lambda g: (g * out,), "exp")


def log(a: Tensor) -> Tensor:
    ad = a.data
    if np.any(ad <= 0):
        raise DomainError("log of a non-positive value")
    return _result(np.log(ad), (a,), lambda g: (g / ad,), "log")


def absolute(a: Tensor) -> Tensor:
    ad = a.data
    return _result(np.abs(ad), (a,), lambda g: (g * np.sign(ad),), "abs")


def tanh(a: Tensor) -> Tensor:
    out = np.tanh(a.data)
    return _result(out, (a,), lambda g: (g * (1.0 - out * out),), "tanh")


def sigmoid(a: Tensor) -> Tensor:
    out = _sigmoid(a.data)
    return _result(out, (a,), lambda g: (g * out * (1.0 - out),), "sigmoid")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    e = np.exp(x[~pos])
    out[~pos] = e / (1.0 + e)
    return out


def softplus(a: Tensor) -> Tensor:
    ad = a.data
    return _result(np.logaddexp(0.0, ad), (a,), lambda g: (g * _sigmoid(ad),), "softplus")


def relu(a: Tensor) -> Tensor:
    ad = a.data
    return _result(np.maximum(ad, 0.0), (a,), lambda g: (g * (ad > 0),), "relu")


_GELU_C = np.sqrt(2.0 / np.pi)


def gelu(a: Tensor) -> Tensor:
    """Tanh approximation of GELU."""
    x = a.data
    u = _GELU_C * (x + 0.044715 * (x * x * x))
    t = np.tanh(u)
    out = 0.5 * x * (1.0 + t)

    def bwd(g):
        du = _GELU_C * (1.0 + 3 * 0.044715 * x * x)
        return (g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du),)

    return _result(out, (a,), bwd, "gelu")


def where(cond: np.ndarray, a, b) -> Tensor:
    """Select from ``a`` where ``cond`` holds, else from ``b`` (cond is constant)."""
    a, b = _as_tensor(a), _as_tensor(b)
    cond = np.asarray(cond, dtype=bool)
    sa, sb = a.shape, b.shape

    def bwd(g):
        return (_unbroadcast(g * cond, sa), _unbroadcast(g * ~cond, sb))

    return _result(np.where(cond, a.data, b.data), (a, b), bwd, "where")


# ---------------------------------------------------------------------------
# reductions and shape ops
# ---------------------------------------------------------------------------


def _norm_axes(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(a % ndim for a in axis)


def tsum(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    shape = a.shape
    axes = _norm_axes(axis, a.ndim)

    def bwd(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, shape).copy(),)

    return _result(np.asarray(a.data.sum(axis=axes, keepdims=keepdims)), (a,), bwd, "sum")


def mean(a: Tensor, axis=None, keepdims: bool = False) -> Tensor:
    axes = _norm_axes(axis, a.ndim)
    n = 1
    for ax in axes:
        n *= a.shape[ax]
    return tsum(a, axes, keepdims) * (1.0 / n)


def reshape(a: Tensor, shape) -> Tensor:
    src = a.shape
    return _result(a.data.reshape(shape), (a,), lambda g: (g.reshape(src),), "reshape")


def transpose(a: Tensor, axes=None) -> Tensor:
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return _result(
        np.ascontiguousarray(a.data.transpose(axes)),
        (a,),
        lambda g: (np.ascontiguousarray(g.transpose(inv)),),
        "transpose",
    )


def swapaxes(a: Tensor, i: int, j: int) -> Tensor:
    axes = list(range(a.ndim))
    axes[i], axes[j] = axes[j], axes[i]
    return transpose(a, tuple(axes))


def concat(tensors: Sequence[Tensor], axis: int = 0) -> Tensor:
    ts = [_as_tensor(t) for t in tensors]
    if not ts:
        raise DimensionError("concat of an empty sequence")
    axis = axis % ts[0].ndim
    sizes = [t.shape[axis] for t in ts]
    bounds = np.cumsum([0] + sizes)

    def bwd(g):
        out = []
        for t, lo, hi in zip(ts, bounds[:-1], bounds[1:]):
            if not t.requires_grad:
                out.append(None)
                continue
            sl = [slice(None)] * g.ndim
            sl[axis] = slice(lo, hi)
            out.append(np.ascontiguousarray(g[tuple(sl)]))
        return tuple(out)

    try:
        data = np.concatenate([t.data for t in ts], axis=axis)
    except ValueError as exc:
        raise DimensionError(str(exc)) from exc
    return _result(data, ts, bwd, "concat")


def take(a: Tensor, indices, axis: int = 0) -> Tensor:
    """Gather along ``axis``; repeated indices sum their gradients."""
    idx = np.asarray(indices, dtype=np.intp)
    shape = a.shape
    axis = axis % a.ndim

    def bwd(g):
        out = np.zeros(shape)
        sl = [slice(None)] * len(shape)
        sl[axis] = idx
        np.add.at(out, tuple(sl), g)
        return (out,)

    return _result(np.take(a.data, idx, axis=axis), (a,), bwd, "take")


def _is_basic(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (int, np.integer, slice)) or i is None or i is Ellipsis for i in items)


def getitem(a: Tensor, idx) -> Tensor:
    shape = a.shape
    basic = _is_basic(idx)

    def bwd(g):
        out = np.zeros(shape)
        if basic:
            out[idx] = g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return _result(np.array(a.data[idx]), (a,), bwd, "getitem")


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise DimensionError(f"matmul needs ndim >= 2, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise DimensionError(f"matmul inner extents differ: {a.shape} @ {b.shape}")
    try:
        out = np.matmul(a.data, b.data)
    except ValueError as exc:
        raise DimensionError(str(exc)) from exc
    ad, bd = a.data, b.data

    def bwd(g):
        ga = gb = None
        if a.requires_grad:
            ga = _unbroadcast(np.matmul(g, np.swapaxes(bd, -1, -2)), ad.shape)
        if b.requires_grad:
            gb = _unbroadcast(np.matmul(np.swapaxes(ad, -1, -2), g), bd.shape)
        return ga, gb

    return _result(out, (a, b), bwd, "matmul")


def linear(x: Tensor, weight: Tensor, bias: Tensor | None = None) -> Tensor:
    """``x @ weight + bias`` over the last axis; weight is (in, out)."""
    if x.shape[-1] != weight.shape[0]:
        raise DimensionError(f"linear expects width {weight.shape[0]}, got {x.shape}")
    lead = x.shape[:-1]
    x2 = x.data.reshape(-1, x.shape[-1])
    wd = weight.data
    out = x2 @ wd
    if bias is not None:
        out = out + bias.data
    out = out.reshape(lead + (wd.shape[1],))
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bwd(g):
        g2 = g.reshape(-1, wd.shape[1])
        gx = (g2 @ wd.T).reshape(lead + (wd.shape[0],)) if x.requires_grad else None
        gw = x2.T @ g2 if weight.requires_grad else None
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _result(out, parents, bwd, "linear")


# ---------------------------------------------------------------------------
# normalisation
# ---------------------------------------------------------------------------


def softmax(x: Tensor, axis: int = -1, mask: np.ndarray | None = None) -> Tensor:
    """Softmax with max subtraction.

    ``mask`` (broadcastable boolean) excludes entries: they get probability
    zero, and a slice with every entry excluded is all zeros.
    """
    if x.shape[axis] == 0:
        raise DomainError("softmax over an empty axis")
    xd = x.data
    if mask is None:
        z = xd - xd.max(axis=axis, keepdims=True)
        e = np.exp(z)
        out = e / e.sum(axis=axis, keepdims=True)
    else:
        m = np.broadcast_to(mask, xd.shape)
        shifted = np.where(m, xd, -np.inf)
        top = shifted.max(axis=axis, keepdims=True)
        top = np.where(np.isfinite(top), top, 0.0)
        e = np.where(m, np.exp(np.where(m, xd - top, 0.0)), 0.0)
        s = e.sum(axis=axis, keepdims=True)
        out = e / np.where(s > 0, s, 1.0)

    def bwd(g):
        return (out * (g - (g * out).sum(axis=axis, keepdims=True)),)

    return _result(out, (x,), bwd, "softmax")


def log_softmax(x: Tensor, axis: int = -1) -> Tensor:
    if x.shape[axis] == 0:
        raise DomainError("log_softmax over an empty axis")
    xd = x.data
    z = xd - xd.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(z).sum(axis=axis, keepdims=True))
    out = z - lse
    p = np.exp(out)

    def bwd(g):
        return (g - p * g.sum(axis=axis, keepdims=True),)

    return _result(out, (x,), bwd, "log_softmax")


def layer_norm(x: Tensor, gain: Tensor, bias: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalise the last axis to zero mean / unit variance, then scale and shift."""
    if eps <= 0:
        raise DomainError("eps must be positive")
    if gain.shape != x.shape[-1:] or bias.shape != x.shape[-1:]:
        raise DimensionError(f"layer_norm affine shape must be {x.shape[-1:]}")
    xd = x.data
    mu = xd.mean(axis=-1, keepdims=True)
    xc = xd - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    gd = gain.data
    out = xhat * gd + bias.data
    lead = tuple(range(xd.ndim - 1))

    def bwd(g):
        gx = None
        if x.requires_grad:
            gh = g * gd
            gx = inv * (
                gh
                - gh.mean(axis=-1, keepdims=True)
                - xhat * (gh * xhat).mean(axis=-1, keepdims=True)
            )
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    return _result(out, (x, gain, bias), bwd, "layer_norm")


# ---------------------------------------------------------------------------
# convolution
# ---------------------------------------------------------------------------


def _triple(v) -> tuple[int, int, int]:
    if isinstance(v, (int, np.integer)):
        return (int(v),) * 3
    t = tuple(int(i) for i in v)
    if len(t) != 3:
        raise DimensionError(f"expected 3 extents, got {v!r}")
    return t


def conv3d_output_shape(in_shape, kernel, stride=1, padding=0) -> tuple[int, int, int]:
    k, s, p = _triple(kernel), _triple(stride), _triple(padding)
    out = []
    for n, kk, ss, pp in zip(in_shape, k, s, p):
        if ss < 1 or pp < 0:
            raise DimensionError("stride must be >= 1 and padding >= 0")
        if kk > n + 2 * pp:
            raise DimensionError(f"kernel extent {kk} exceeds padded input extent {n + 2 * pp}")
        out.append((n + 2 * pp - kk) // ss + 1)
    return tuple(out)


def conv3d(x: Tensor, weight: Tensor, bias: Tensor | None = None, stride=1, padding=0) -> Tensor:
    """3-D cross-correlation.

    ``x`` is (C, T, H, W) or (B, C, T, H, W); ``weight`` is
    (C_out, C, kt, kh, kw).  Output extents per axis are
    ``floor((n + 2*pad - k) / stride) + 1``.
    """
    batched = x.ndim == 5
    if x.ndim not in (4, 5) or weight.ndim != 5:
        raise DimensionError(f"conv3d expects (B,)C,T,H,W input and 5-d kernel, got {x.shape}")
    xd = x.data if batched else x.data[None]
    B, C = xd.shape[:2]
    co, ci, kt, kh, kw = weight.shape
    if ci != C:
        raise DimensionError(f"kernel expects {ci} input channels, input has {C}")
    st, sh, sw = _triple(stride)
    pt, ph, pw = _triple(padding)
    ot, oh, ow = conv3d_output_shape(xd.shape[2:], (kt, kh, kw), (st, sh, sw), (pt, ph, pw))
    xp = np.pad(xd, ((0, 0), (0, 0), (pt, pt), (ph, ph), (pw, pw))) if pt or ph or pw else xd
    fast = (kt, kh, kw) == (st, sh, sw) and xp.shape[2:] == (ot * kt, oh * kh, ow * kw)
    if fast:
        cols = xp.reshape(B, C, ot, kt, oh, kh, ow, kw).transpose(0, 2, 4, 6, 1, 3, 5, 7)
    else:
        win = sliding_window_view(xp, (kt, kh, kw), axis=(2, 3, 4))[:, :, ::st, ::sh, ::sw]
        cols = win.transpose(0, 2, 3, 4, 1, 5, 6, 7)
    P, K = ot * oh * ow, C * kt * kh * kw
    cols = cols.reshape(B * P, K)
    wmat = weight.data.reshape(co, K)
    out = cols @ wmat.T
    if bias is not None:
        out = out + bias.data
    out = out.reshape(B, ot, oh, ow, co).transpose(0, 4, 1, 2, 3)
    if not batched:
        out = out[0]
    parents = (x, weight) if bias is None else (x, weight, bias)

    def bwd(g):
        gb = g if batched else g[None]
        g2 = gb.transpose(0, 2, 3, 4, 1).reshape(B * P, co)
        gw = (g2.T @ cols).reshape(weight.shape) if weight.requires_grad else None
        gx = None
        if x.requires_grad:
            dcols = (g2 @ wmat).reshape(B, ot, oh, ow, C, kt, kh, kw)
            if fast:
                gxp = dcols.transpose(0, 4, 1, 5, 2, 6, 3, 7).reshape(xp.shape)
            else:
                gxp = np.zeros(xp.shape)
                dc = dcols.transpose(0, 4, 1, 2, 3, 5, 6, 7)
                for i in range(kt):
                    for j in range(kh):
                        for k in range(kw):
                            gxp[
                                :,
                                :,
                                i : i + st * ot : st,
                                j : j + sh * oh : sh,
                                k : k + sw * ow : sw,
                            ] += dc[..., i, j, k]
            gxp = gxp[:, :, pt : pt + xd.shape[2], ph : ph + xd.shape[3], pw : pw + xd.shape[4]]
            gx = np.ascontiguousarray(gxp if batched else gxp[0])
        if bias is None:
            return gx, gw
        return gx, gw, g2.sum(axis=0)

    return _result(out, parents, bwd, "conv3d")
