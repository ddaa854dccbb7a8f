"""Reverse-mode automatic differentiation over dense float64 numpy arrays.

A :class:`Tensor` wraps an ``ndarray`` and remembers the operation that
produced it.  Calling :func:`backward` on a scalar tensor walks the recorded
graph in reverse topological order and accumulates ``.grad`` on every tensor
that requires gradients.

Every operation checks its result for NaN/Inf and raises
:class:`NonFiniteError` rather than letting a bad value propagate.
"""
from __future__ import annotations

import math
from typing import Callable, Iterable, Sequence

import numpy as np
from numba import njit
from scipy.special import erf, expit

__all__ = [
    "NonFiniteError",
    "Tensor",
    "tensor",
    "backward",
    "no_grad",
    "no_grad_value",
    "add",
    "sub",
    "mul",
    "div",
    "neg",
    "matmul",
    "exp",
    "log",
    "sqrt",
    "relu",
    "sigmoid",
    "softplus",
    "silu",
    "gelu",
    "tsum",
    "tmean",
    "reshape",
    "transpose",
    "concat",
    "take_rows",
    "take_along",
    "scatter_rows",
    "softmax",
    "rms_norm",
    "layer_norm",
    "batch_norm",
    "huber",
    "dropout",
    "selective_scan",
    "gradcheck",
]


class NonFiniteError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


_SQRT_2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _check_finite(data: np.ndarray, op: str) -> None:
    if not np.isfinite(data).all():
        raise NonFiniteError(f"{op}: non-finite value in result")


class Tensor:
    """A node in the computation graph."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "op")
    __array_ufunc__ = None  # make ndarray <op> Tensor defer to Tensor's reflected operator

    def __init__(self, data, requires_grad: bool = False, *, _parents: tuple = (),
                 _backward: Callable[[np.ndarray], None] | None = None, op: str = "leaf"):
        arr = np.asarray(data, dtype=np.float64)
        _check_finite(arr, op)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._backward = _backward
        self.op = op

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        if self.data.size != 1:
            raise ValueError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(()))

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        return f"Tensor(shape={self.shape}, op={self.op}, requires_grad={self.requires_grad})"

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

    def sum(self, axis=None, keepdims=False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return tmean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    @property
    def T(self):
        return transpose(self)


def tensor(data, requires_grad: bool = False) -> Tensor:
    return Tensor(data, requires_grad=requires_grad)


def _as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def no_grad_value(x) -> np.ndarray:
    return x.data if isinstance(x, Tensor) else np.asarray(x, dtype=np.float64)


_GRAD_ENABLED = True


class no_grad:
    """Context manager: operations inside record no backward graph."""

    def __enter__(self):
        global _GRAD_ENABLED
        self._prev = _GRAD_ENABLED
        _GRAD_ENABLED = False
        return self

    def __exit__(self, *exc):
        global _GRAD_ENABLED
        _GRAD_ENABLED = self._prev
        return False


def _make(data: np.ndarray, parents: Sequence[Tensor], backward_fn, op: str) -> Tensor:
    req = _GRAD_ENABLED and any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=req, _parents=tuple(parents) if req else (),
                  _backward=backward_fn if req else None, op=op)


def _accum(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, size in enumerate(shape):
        if size == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def backward(root: Tensor) -> None:
    """Populate ``.grad`` for every tensor reachable from a scalar ``root``."""
    if root.data.size != 1:
        raise ValueError(f"backward requires a scalar root, got shape {root.shape}")
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
            if id(p) not in seen:
                stack.append((p, False))
    grads: dict[int, np.ndarray] = {id(root): np.ones_like(root.data)}
    for node in reversed(order):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            _accum(node, g)
            continue
        if not node._parents:
            continue
        for p, pg in zip(node._parents, node._backward(g)):
            if pg is None or not p.requires_grad:
                continue
            if id(p) in grads:
                grads[id(p)] = grads[id(p)] + pg
            else:
                grads[id(p)] = pg


# ---------------------------------------------------------------- elementwise

def add(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(g, b.shape)

    return _make(a.data + b.data, (a, b), bw, "add")


def sub(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def bw(g):
        return _unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)

    return _make(a.data - b.data, (a, b), bw, "sub")


def mul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def bw(g):
        return _unbroadcast(g * b.data, a.shape), _unbroadcast(g * a.data, b.shape)

    return _make(a.data * b.data, (a, b), bw, "mul")


def div(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)

    def bw(g):
        return (_unbroadcast(g / b.data, a.shape),
                _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    with np.errstate(divide="ignore", invalid="ignore"):
        out = a.data / b.data
    return _make(out, (a, b), bw, "div")


def neg(a) -> Tensor:
    a = _as_tensor(a)
    return _make(-a.data, (a,), lambda g: (-g,), "neg")


def matmul(a, b) -> Tensor:
    a, b = _as_tensor(a), _as_tensor(b)
    if a.ndim < 2 or b.ndim != 2:
        raise ValueError(f"matmul expects (..., n, k) @ (k, m), got {a.shape} @ {b.shape}")
    if a.shape[-1] != b.shape[0]:
        raise ValueError(f"matmul shape mismatch: {a.shape} @ {b.shape}")

    def bw(g):
        ga = g @ b.data.T
        a2 = a.data.reshape(-1, a.shape[-1])
        gb = a2.T @ g.reshape(-1, g.shape[-1])
        return ga, gb

    return _make(a.data @ b.data, (a, b), bw, "matmul")


def exp(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(over="ignore"):
        out = np.exp(a.data)
    return _make(out, (a,), lambda g: (g * out,), "exp")


def log(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(divide="ignore", invalid="ignore"):
        out = np.log(a.data)
    return _make(out, (a,), lambda g: (g / a.data,), "log")


def sqrt(a) -> Tensor:
    a = _as_tensor(a)
    with np.errstate(invalid="ignore"):
        out = np.sqrt(a.data)
    return _make(out, (a,), lambda g: (g * 0.5 / out,), "sqrt")


def relu(a) -> Tensor:
    a = _as_tensor(a)
    pos = a.data > 0
    return _make(np.where(pos, a.data, 0.0), (a,), lambda g: (g * pos,), "relu")


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return expit(x)


def sigmoid(a) -> Tensor:
    a = _as_tensor(a)
    s = _sigmoid(a.data)
    return _make(s, (a,), lambda g: (g * s * (1.0 - s),), "sigmoid")


def softplus(a) -> Tensor:
    a = _as_tensor(a)
    out = np.logaddexp(0.0, a.data)
    return _make(out, (a,), lambda g: (g * _sigmoid(a.data),), "softplus")


def silu(a) -> Tensor:
    a = _as_tensor(a)
    s = _sigmoid(a.data)
    return _make(a.data * s, (a,), lambda g: (g * (s + a.data * s * (1.0 - s)),), "silu")


def gelu(a) -> Tensor:
    """Exact (erf) Gaussian error linear unit."""
    a = _as_tensor(a)
    x = a.data
    cdf = 0.5 * (1.0 + erf(x / _SQRT_2))

    def bw(g):
        pdf = _INV_SQRT_2PI * np.exp(-0.5 * x * x)
        return (g * (cdf + x * pdf),)

    return _make(x * cdf, (a,), bw, "gelu")


# ------------------------------------------------------------------ reductions

def _norm_axis(axis, ndim):
    if axis is None:
        return tuple(range(ndim))
    if isinstance(axis, int):
        axis = (axis,)
    return tuple(ax % ndim for ax in axis)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    out = a.data.sum(axis=axes, keepdims=keepdims)

    def bw(g):
        if not keepdims:
            g = np.expand_dims(g, axes)
        return (np.broadcast_to(g, a.shape),)

    return _make(out, (a,), bw, "sum")


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = _as_tensor(a)
    axes = _norm_axis(axis, a.ndim)
    count = int(np.prod([a.shape[ax] for ax in axes])) if axes else 1
    return tsum(a, axes, keepdims) * (1.0 / count)


# -------------------------------------------------------------- shape / index

def reshape(a, shape) -> Tensor:
    a = _as_tensor(a)
    return _make(a.data.reshape(shape), (a,), lambda g: (g.reshape(a.shape),), "reshape")


def transpose(a, axes=None) -> Tensor:
    a = _as_tensor(a)
    if axes is None:
        axes = tuple(reversed(range(a.ndim)))
    inv = np.argsort(axes)
    return _make(np.transpose(a.data, axes), (a,), lambda g: (np.transpose(g, inv),), "transpose")


def concat(parts: Sequence, axis: int = -1) -> Tensor:
    parts = [_as_tensor(p) for p in parts]
    sizes = [p.shape[axis] for p in parts]
    cuts = np.cumsum(sizes)[:-1]

    def bw(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _make(np.concatenate([p.data for p in parts], axis=axis), parts, bw, "concat")


def take_rows(a, index) -> Tensor:
    """Gather ``a[index]`` along axis 0 (gradient scatter-adds back)."""
    a = _as_tensor(a)
    index = np.asarray(index, dtype=np.int64)

    def bw(g):
        out = np.zeros_like(a.data)
        np.add.at(out, index, g)
        return (out,)

    return _make(a.data[index], (a,), bw, "take_rows")


def take_along(a, index, axis: int) -> Tensor:
    """``np.take_along_axis`` with gradient."""
    a = _as_tensor(a)
    index = np.asarray(index, dtype=np.int64)

    def bw(g):
        out = np.zeros_like(a.data)
        idx = list(np.indices(index.shape, sparse=True))
        idx[axis] = index
        np.add.at(out, tuple(idx), g)
        return (out,)

    return _make(np.take_along_axis(a.data, index, axis=axis), (a,), bw, "take_along")


def scatter_rows(a, index, n_rows: int) -> Tensor:
    """Sum rows of ``a`` into ``n_rows`` buckets: ``out[index[e]] += a[e]``."""
    a = _as_tensor(a)
    index = np.asarray(index, dtype=np.int64)
    out = np.zeros((n_rows,) + a.shape[1:])
    np.add.at(out, index, a.data)
    return _make(out, (a,), lambda g: (g[index],), "scatter_rows")


# ------------------------------------------------------------- normalization

def softmax(a, axis: int = -1) -> Tensor:
    a = _as_tensor(a)
    z = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(z)
    s = e / e.sum(axis=axis, keepdims=True)

    def bw(g):
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)

    return _make(s, (a,), bw, "softmax")


def rms_norm(x, gain, eps: float = 1e-6) -> Tensor:
    """``x / sqrt(mean(x**2) + eps) * gain`` over the last axis."""
    x, gain = _as_tensor(x), _as_tensor(gain)
    if x.shape[-1] == 0:
        raise ValueError("rms_norm: zero-length last axis")
    if eps < 0:
        raise ValueError("rms_norm: eps must be non-negative")
    d = x.shape[-1]
    ms = (x.data * x.data).mean(axis=-1, keepdims=True) + eps
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / np.sqrt(ms)
        xhat = x.data * inv
    out = xhat * gain.data

    def bw(g):
        gh = g * gain.data
        gx = inv * (gh - xhat * (gh * xhat).sum(axis=-1, keepdims=True) / d)
        return gx, _unbroadcast(g * xhat, gain.shape)

    return _make(out, (x, gain), bw, "rms_norm")


def layer_norm(x, gain, bias, eps: float = 1e-5) -> Tensor:
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    d = x.shape[-1]
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv

    def bw(g):
        gh = g * gain.data
        gx = inv * (gh - gh.mean(axis=-1, keepdims=True)
                    - xhat * (gh * xhat).sum(axis=-1, keepdims=True) / d)
        return gx, _unbroadcast(g * xhat, gain.shape), _unbroadcast(g, bias.shape)

    return _make(xhat * gain.data + bias.data, (x, gain, bias), bw, "layer_norm")


def batch_norm(x, gain, bias, mean: np.ndarray | None = None, var: np.ndarray | None = None,
               eps: float = 1e-5) -> Tensor:
    """Normalize over axis 0.

    With ``mean``/``var`` given (evaluation mode) those statistics are used as
    constants; otherwise batch statistics are computed and differentiated.
    """
    x, gain, bias = _as_tensor(x), _as_tensor(gain), _as_tensor(bias)
    n = x.shape[0]
    if mean is not None:
        inv = 1.0 / np.sqrt(var + eps)
        xhat = (x.data - mean) * inv

        def bw_eval(g):
            return (g * gain.data * inv, _unbroadcast(g * xhat, gain.shape),
                    _unbroadcast(g, bias.shape))

        return _make(xhat * gain.data + bias.data, (x, gain, bias), bw_eval, "batch_norm")
    mu = x.data.mean(axis=0, keepdims=True)
    xc = x.data - mu
    v = (xc * xc).mean(axis=0, keepdims=True)
    inv = 1.0 / np.sqrt(v + eps)
    xhat = xc * inv

    def bw(g):
        gh = g * gain.data
        gx = inv * (gh - gh.mean(axis=0, keepdims=True)
                    - xhat * (gh * xhat).sum(axis=0, keepdims=True) / n)
        return gx, _unbroadcast(g * xhat, gain.shape), _unbroadcast(g, bias.shape)

    return _make(xhat * gain.data + bias.data, (x, gain, bias), bw, "batch_norm")


# ----------------------------------------------------------------- loss / misc

def huber(pred, target, delta: float = 1.0) -> Tensor:
    """Elementwise Huber loss."""
    if delta <= 0:
        raise ValueError("huber: delta must be positive")
    pred, target = _as_tensor(pred), _as_tensor(target)
    r = pred.data - target.data
    ar = np.abs(r)
    quad = ar <= delta
    out = np.where(quad, 0.5 * r * r, delta * (ar - 0.5 * delta))

    def bw(g):
        slope = np.where(quad, r, delta * np.sign(r))
        return _unbroadcast(g * slope, pred.shape), _unbroadcast(-g * slope, target.shape)

    return _make(out, (pred, target), bw, "huber")


def dropout(a, rate: float, rng: np.random.Generator | None, training: bool) -> Tensor:
    """Inverted dropout; identity when not training or rate is 0."""
    a = _as_tensor(a)
    if not training or rate <= 0.0:
        return a
    if rng is None:
        raise ValueError("dropout in training mode needs an rng")
    keep = (rng.random(a.shape) >= rate) / (1.0 - rate)
    return _make(a.data * keep, (a,), lambda g: (g * keep,), "dropout")


def selective_scan(x, delta, A, Bm, C) -> Tensor:
    """Diagonal selective state-space scan.

    Shapes: ``x, delta`` (B, T, D); ``A`` (D, N) with negative entries;
    ``Bm, C`` (B, T, N).  For every step::

        s_t = exp(delta_t * A) * s_{t-1} + (delta_t * B_t) * x_t
        y_t = sum_n C_t[n] * s_t[:, n]

    with ``s_0 = 0``.  Returns ``y`` of shape (B, T, D).
    """
    x, delta, A, Bm, C = (_as_tensor(v) for v in (x, delta, A, Bm, C))
    nb, nt, nd = x.shape
    ns = A.shape[1]
    if delta.shape != x.shape or A.shape[0] != nd or Bm.shape != (nb, nt, ns) or C.shape != Bm.shape:
        raise ValueError("selective_scan: inconsistent shapes "
                         f"x={x.shape} delta={delta.shape} A={A.shape} B={Bm.shape} C={C.shape}")
    xd, dd, Ad, Bd, Cd = (np.ascontiguousarray(v.data) for v in (x, delta, A, Bm, C))
    states = np.empty((nb, nt, nd, ns))
    y = _scan_forward(xd, dd, Ad, Bd, Cd, states)
    _check_finite(states, "selective_scan state")

    def bw(g):
        return _scan_backward(np.ascontiguousarray(g), xd, dd, Ad, Bd, Cd, states)

    return _make(y, (x, delta, A, Bm, C), bw, "selective_scan")


@njit(cache=True)
def _scan_forward(x, delta, A, Bm, C, states):
    nb, nt, nd = x.shape
    ns = A.shape[1]
    y = np.zeros((nb, nt, nd))
    for b in range(nb):
        s = np.zeros((nd, ns))
        for t in range(nt):
            for d in range(nd):
                dt = delta[b, t, d]
                u = dt * x[b, t, d]
                acc = 0.0
                for n in range(ns):
                    v = np.exp(dt * A[d, n]) * s[d, n] + u * Bm[b, t, n]
                    s[d, n] = v
                    states[b, t, d, n] = v
                    acc += C[b, t, n] * v
                y[b, t, d] = acc
    return y


@njit(cache=True)
def _scan_backward(g, x, delta, A, Bm, C, states):
    nb, nt, nd = x.shape
    ns = A.shape[1]
    gx = np.zeros((nb, nt, nd))
    gdelta = np.zeros((nb, nt, nd))
    gA = np.zeros((nd, ns))
    gB = np.zeros((nb, nt, ns))
    gC = np.zeros((nb, nt, ns))
    for b in range(nb):
        gs = np.zeros((nd, ns))
        for t in range(nt - 1, -1, -1):
            for d in range(nd):
                gy = g[b, t, d]
                dt = delta[b, t, d]
                xt = x[b, t, d]
                u = dt * xt
                gu = 0.0
                gd = 0.0
                for n in range(ns):
                    gC[b, t, n] += gy * states[b, t, d, n]
                    gsn = gs[d, n] + gy * C[b, t, n]
                    bt = Bm[b, t, n]
                    gu += gsn * bt
                    gB[b, t, n] += gsn * u
                    decay = np.exp(dt * A[d, n])
                    if t > 0:
                        gpre = gsn * states[b, t - 1, d, n] * decay
                        gd += gpre * A[d, n]
                        gA[d, n] += gpre * dt
                    gs[d, n] = gsn * decay
                gx[b, t, d] = gu * dt
                gdelta[b, t, d] = gu * xt + gd
    return gx, gdelta, gA, gB, gC


# ------------------------------------------------------------------ gradcheck

def gradcheck(fn: Callable[..., Tensor], inputs: Iterable[np.ndarray], h: float = 1e-5) -> float:
    """Max relative error between reverse-mode and central-difference gradients.

    ``fn`` takes tensors and returns a scalar tensor.  The relative error of
    each input is ``|g_ad - g_fd|_max / max(|g_fd|_max, 1e-8)``.
    """
    arrays = [np.array(v, dtype=np.float64) for v in inputs]
    leaves = [Tensor(v, requires_grad=True) for v in arrays]
    out = fn(*leaves)
    backward(out)
    worst = 0.0
    for k, arr in enumerate(arrays):
        analytic = leaves[k].grad if leaves[k].grad is not None else np.zeros_like(arr)
        numeric = np.zeros_like(arr)
        flat = arr.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            fp = fn(*[Tensor(v) for v in arrays]).item()
            flat[i] = orig - h
            fm = fn(*[Tensor(v) for v in arrays]).item()
            flat[i] = orig
            numeric.reshape(-1)[i] = (fp - fm) / (2 * h)
        scale = max(np.abs(numeric).max(initial=0.0), 1e-8)
        worst = max(worst, float(np.abs(analytic - numeric).max(initial=0.0) / scale))
    return worst
