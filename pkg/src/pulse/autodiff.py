"""Minimal reverse-mode automatic differentiation over numpy arrays.

Storage is float32; reductions accumulate in float64 (full reductions keep
the float64 scalar so downstream finite differences are not quantized).
Graphs are built eagerly; ``Tensor.backward`` walks the tape in reverse
topological order. Single-threaded evaluation is bit-deterministic.
"""

from __future__ import annotations

import math

import numpy as np
from scipy.special import erf, expit

from .errors import NumericsError

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class Tensor:
    """An ndarray with an optional gradient and a backward closure."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _backward=None):
        if isinstance(data, Tensor):
            data = data.data
        arr = np.asarray(data)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = _parents
        self._backward = _backward

    # -- conveniences ------------------------------------------------------
    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"

    # -- operators ---------------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __neg__(self):
        return mul(self, -1.0)

    def __matmul__(self, other):
        return matmul(self, other)

    # -- backward ----------------------------------------------------------
    def backward(self) -> None:
        if self.data.size != 1:
            raise ValueError("backward() requires a scalar tensor")
        order = []
        seen = set()
        stack = [(self, False)]
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
        self.grad = np.ones_like(self.data)
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=t.data.dtype)
    if g.shape != t.data.shape:
        g = np.broadcast_to(g, t.data.shape)
    # Gradients are never mutated in place, so aliasing a child's array is safe.
    t.grad = g if t.grad is None else t.grad + g


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, d in enumerate(shape) if d == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g


def _make(data, parents, backward) -> Tensor:
    requires = any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=requires, _parents=tuple(p for p in parents if p.requires_grad),
                  _backward=backward if requires else None)


# ---------------------------------------------------------------------------
# Elementwise arithmetic


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data + b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g, b.shape))

    return _make(out_data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data - b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g, b.shape))

    return _make(out_data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data * b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(g * a.data, b.shape))

    return _make(out_data, (a, b), backward)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    out_data = a.data / b.data

    def backward(g):
        if a.requires_grad:
            _accumulate(a, _unbroadcast(g / b.data, a.shape))
        if b.requires_grad:
            _accumulate(b, _unbroadcast(-g * a.data / (b.data * b.data), b.shape))

    return _make(out_data, (a, b), backward)


# ---------------------------------------------------------------------------
# Linear algebra and shape ops


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError("matmul requires tensors with ndim >= 2")
    out_data = np.matmul(a.data, b.data)

    def backward(g):
        if a.requires_grad:
            ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
            _accumulate(a, _unbroadcast(ga, a.shape))
        if b.requires_grad:
            gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
            _accumulate(b, _unbroadcast(gb, b.shape))

    return _make(out_data, (a, b), backward)


def transpose(a, axis0: int, axis1: int) -> Tensor:
    a = as_tensor(a)
    out_data = np.swapaxes(a.data, axis0, axis1)

    def backward(g):
        _accumulate(a, np.swapaxes(g, axis0, axis1))

    return _make(out_data, (a,), backward)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    shape = tuple(shape)
    out_data = a.data.reshape(shape)

    def backward(g):
        _accumulate(a, g.reshape(a.shape))

    return _make(out_data, (a,), backward)


def concat(tensors, axis: int = 0) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def backward(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                idx = [slice(None)] * g.ndim
                idx[axis] = slice(lo, hi)
                _accumulate(t, g[tuple(idx)])

    return _make(out_data, tuple(tensors), backward)


def gather(a, indices, axis: int) -> Tensor:
    """Select ``indices`` along ``axis`` (backward scatters with addition)."""
    a = as_tensor(a)
    idx = np.asarray(indices, dtype=np.int64)
    if idx.ndim != 1:
        raise ValueError("gather expects a 1-D index set")
    out_data = np.take(a.data, idx, axis=axis)

    def backward(g):
        ga = np.zeros(a.shape, dtype=np.float32)
        key = (slice(None),) * (axis % a.data.ndim) + (idx,)
        np.add.at(ga, key, g)
        _accumulate(a, ga)

    return _make(out_data, (a,), backward)


# ---------------------------------------------------------------------------
# Reductions (float64 accumulation)


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    acc = np.sum(a.data, axis=axis, keepdims=keepdims, dtype=np.float64)
    out_data = acc if np.ndim(acc) == 0 else acc.astype(a.data.dtype)

    def backward(g):
        g = np.asarray(g, dtype=a.data.dtype)
        if axis is None:
            ga = np.broadcast_to(g.reshape((1,) * a.data.ndim), a.shape)
        else:
            axes = (axis,) if isinstance(axis, int) else tuple(axis)
            axes = tuple(ax % a.data.ndim for ax in axes)
            if not keepdims:
                for ax in sorted(axes):
                    g = np.expand_dims(g, ax)
            ga = np.broadcast_to(g, a.shape)
        _accumulate(a, ga)

    return _make(out_data, (a,), backward)


def tmean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    if axis is None:
        count = a.data.size
    else:
        axes = (axis,) if isinstance(axis, int) else tuple(axis)
        count = int(np.prod([a.shape[ax % a.data.ndim] for ax in axes]))
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / count)


# ---------------------------------------------------------------------------
# Nonlinearities


def relu(a) -> Tensor:
    """Clamp at zero; the subgradient at the kink is 0."""
    a = as_tensor(a)
    out_data = np.maximum(a.data, 0)
    mask = (a.data > 0).astype(a.data.dtype)

    def backward(g):
        _accumulate(a, g * mask)

    return _make(out_data, (a,), backward)


def gelu(a) -> Tensor:
    a = as_tensor(a)
    x = a.data.astype(np.float64)
    cdf = 0.5 * (1.0 + erf(x / _SQRT2))
    out_data = (x * cdf).astype(a.data.dtype)
    local = (cdf + x * _INV_SQRT_2PI * np.exp(-0.5 * x * x)).astype(a.data.dtype)

    def backward(g):
        _accumulate(a, g * local)

    return _make(out_data, (a,), backward)


def texp(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.exp(a.data)

    def backward(g):
        _accumulate(a, g * out_data)

    return _make(out_data, (a,), backward)


def tlog(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.log(a.data)

    def backward(g):
        _accumulate(a, g / a.data)

    return _make(out_data, (a,), backward)


def tsqrt(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.sqrt(a.data)

    def backward(g):
        _accumulate(a, g * (0.5 / out_data))

    return _make(out_data, (a,), backward)


def softplus(a) -> Tensor:
    """log(1 + exp(x)) computed stably; derivative is the logistic function."""
    a = as_tensor(a)
    out_data = np.logaddexp(0.0, a.data.astype(np.float64)).astype(a.data.dtype)
    local = expit(a.data.astype(np.float64)).astype(a.data.dtype)

    def backward(g):
        _accumulate(a, g * local)

    return _make(out_data, (a,), backward)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - np.max(a.data, axis=axis, keepdims=True)
    e = np.exp(shifted.astype(np.float64))
    y = (e / np.sum(e, axis=axis, keepdims=True)).astype(a.data.dtype)

    def backward(g):
        dot = np.sum(g * y, axis=axis, keepdims=True, dtype=np.float64).astype(a.data.dtype)
        _accumulate(a, y * (g - dot))

    return _make(y, (a,), backward)


def layer_norm(a, gain=None, bias=None, eps: float = 1e-5) -> Tensor:
    """Standardize over the last axis; optional learnable scale/shift."""
    a = as_tensor(a)
    x = a.data.astype(np.float64)
    d = x.shape[-1]
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=-1, keepdims=True)
    istd = 1.0 / np.sqrt(var + eps)
    xhat64 = xc * istd
    xhat = xhat64.astype(a.data.dtype)
    parents = [a]
    if gain is not None:
        gain = as_tensor(gain)
        bias = as_tensor(bias)
        parents += [gain, bias]
        out_data = xhat * gain.data + bias.data
    else:
        out_data = xhat

    istd_t = istd.astype(a.data.dtype)

    def backward(g):
        gh = g * gain.data if gain is not None else g
        if a.requires_grad:
            # d/dx of (x - mu) / sqrt(var + eps)
            sum_gh = np.sum(gh, axis=-1, keepdims=True, dtype=np.float64).astype(a.data.dtype)
            sum_ghx = np.sum(gh * xhat, axis=-1, keepdims=True, dtype=np.float64).astype(a.data.dtype)
            ga = istd_t * (gh - sum_gh / d - xhat * (sum_ghx / d))
            _accumulate(a, ga)
        if gain is not None:
            reduce_axes = tuple(range(g.ndim - 1))
            if gain.requires_grad:
                _accumulate(gain, np.sum(g * xhat, axis=reduce_axes, dtype=np.float64))
            if bias.requires_grad:
                _accumulate(bias, np.sum(g, axis=reduce_axes, dtype=np.float64))

    return _make(out_data, tuple(parents), backward)


# ---------------------------------------------------------------------------
# Composites


def square(a) -> Tensor:
    return mul(a, a)


def l2_norm(a, axis: int = -1, keepdims: bool = False) -> Tensor:
    return tsqrt(tsum(square(a), axis=axis, keepdims=keepdims))


def cosine_similarity(a, b, axis: int = -1) -> Tensor:
    """cos(a, b) along ``axis``; undefined (raises) only via zero norms upstream."""
    num = tsum(mul(a, b), axis=axis)
    return div(num, mul(l2_norm(a, axis=axis), l2_norm(b, axis=axis)))


def attention(q, k, v) -> Tensor:
    """Scaled dot-product attention over [ ..., tokens, head_dim ] operands."""
    dim = q.shape[-1]
    scores = mul(matmul(q, transpose(k, -1, -2)), 1.0 / math.sqrt(dim))
    return matmul(softmax(scores, axis=-1), v)


# ---------------------------------------------------------------------------
# Gradient verification


def grad_check(f, x, eps: float = 1e-3) -> float:
    """Max relative error between reverse-mode and central finite differences.

    ``x`` is a Tensor or a sequence of Tensors with requires_grad set; ``f``
    must be pure and return a scalar Tensor when called as ``f(x)``. The
    check temporarily widens the inputs to float64 so finite-difference
    quantization does not mask backward-pass defects; original float32 data
    is restored afterwards.
    """
    tensors = [x] if isinstance(x, Tensor) else list(x)
    saved = [t.data for t in tensors]
    try:
        for t in tensors:
            t.data = np.ascontiguousarray(t.data, dtype=np.float64)
            t.zero_grad()
        out = f(x)
        if not np.isfinite(out.data).all():
            raise NumericsError("grad_check: non-finite function value")
        out.backward()
        analytic = [np.zeros_like(t.data) if t.grad is None else np.asarray(t.grad, dtype=np.float64)
                    for t in tensors]

        worst = 0.0
        for t, g_ad in zip(tensors, analytic):
            flat = t.data.reshape(-1)
            for i in range(flat.size):
                orig = flat[i]
                flat[i] = orig + eps
                hi = float(f(x).data)
                flat[i] = orig - eps
                lo = float(f(x).data)
                flat[i] = orig
                if not (math.isfinite(hi) and math.isfinite(lo)):
                    raise NumericsError("grad_check: non-finite value during finite differences")
                g_fd = (hi - lo) / (2.0 * eps)
                g_an = float(g_ad.reshape(-1)[i])
                err = abs(g_an - g_fd) / max(1e-6, abs(g_an) + abs(g_fd))
                worst = max(worst, err)
    finally:
        for t, data in zip(tensors, saved):
            t.data = data
            t.zero_grad()
    return worst
