"""Minimal reverse-mode autodiff over numpy arrays.

A Tensor wraps an ndarray plus a vjp closure; backward() walks the
graph in reverse topological order and accumulates gradients into
every leaf marked requires_grad. Gradients for constant branches are
skipped entirely.
"""

from __future__ import annotations

import numpy as np
from scipy.special import erf

from .errors import ShapeError


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_vjp")

    def __init__(self, data, requires_grad=False, parents=(), vjp=None):
        self.data = np.asarray(data)
        self.grad = None
        self.requires_grad = requires_grad or any(p.requires_grad for p in parents)
        self._parents = parents
        self._vjp = vjp

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def backward(self, grad=None):
        if grad is None:
            grad = np.ones_like(self.data)
        topo, seen, stack = [], set(), [(self, False)]
        while stack:
            node, expanded = stack.pop()
            if expanded:
                topo.append(node)
                continue
            if id(node) in seen or not node.requires_grad:
                continue
            seen.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                stack.append((p, False))
        self.grad = np.asarray(grad, dtype=self.data.dtype)
        for node in reversed(topo):
            if node._vjp is None or node.grad is None:
                continue
            for parent, g in zip(node._parents, node._vjp(node.grad)):
                if g is None or not parent.requires_grad:
                    continue
                parent.grad = g if parent.grad is None else parent.grad + g

    # operator sugar
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(_wrap(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return take(self, idx)

    @property
    def T(self):
        return transpose(self)


def _wrap(x, dtype) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(g: np.ndarray, shape) -> np.ndarray:
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, (gs, ss) in enumerate(zip(g.shape, shape)):
        if ss == 1 and gs != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def add(a: Tensor, b) -> Tensor:
    b = _wrap(b, a.dtype)
    return Tensor(a.data + b.data, parents=(a, b),
                  vjp=lambda g: (_unbroadcast(g, a.shape), _unbroadcast(g, b.shape)))


def sub(a: Tensor, b) -> Tensor:
    b = _wrap(b, a.dtype)
    return Tensor(a.data - b.data, parents=(a, b),
                  vjp=lambda g: (_unbroadcast(g, a.shape), _unbroadcast(-g, b.shape)))


def mul(a: Tensor, b) -> Tensor:
    b = _wrap(b, a.dtype)
    return Tensor(a.data * b.data, parents=(a, b),
                  vjp=lambda g: (_unbroadcast(g * b.data, a.shape),
                                 _unbroadcast(g * a.data, b.shape)))


def div(a: Tensor, b) -> Tensor:
    b = _wrap(b, a.dtype)
    return Tensor(a.data / b.data, parents=(a, b),
                  vjp=lambda g: (_unbroadcast(g / b.data, a.shape),
                                 _unbroadcast(-g * a.data / (b.data * b.data), b.shape)))


def neg(a: Tensor) -> Tensor:
    return Tensor(-a.data, parents=(a,), vjp=lambda g: (-g,))


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.data.ndim != 2 or b.data.ndim != 2:
        raise ShapeError(f"matmul expects 2-D operands, got {a.shape} @ {b.shape}")
    return Tensor(a.data @ b.data, parents=(a, b),
                  vjp=lambda g: (g @ b.data.T, a.data.T @ g))


def transpose(a: Tensor) -> Tensor:
    return Tensor(a.data.T, parents=(a,), vjp=lambda g: (g.T,))


def reshape(a: Tensor, shape) -> Tensor:
    orig = a.shape
    return Tensor(a.data.reshape(shape), parents=(a,),
                  vjp=lambda g: (g.reshape(orig),))


def take(a: Tensor, idx) -> Tensor:
    no_dups = isinstance(idx, (int, slice)) or (
        isinstance(idx, tuple) and all(isinstance(i, (int, slice)) for i in idx))

    def vjp(g):
        out = np.zeros_like(a.data)
        if no_dups:
            out[idx] += g
        else:
            np.add.at(out, idx, g)
        return (out,)

    return Tensor(a.data[idx], parents=(a,), vjp=vjp)


def concat(tensors, axis=0) -> Tensor:
    tensors = list(tensors)
    sizes = [t.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]
    return Tensor(np.concatenate([t.data for t in tensors], axis=axis),
                  parents=tuple(tensors),
                  vjp=lambda g: tuple(np.split(g, splits, axis=axis)))


def relu(a: Tensor) -> Tensor:
    mask = a.data > 0
    return Tensor(a.data * mask, parents=(a,), vjp=lambda g: (g * mask,))


_INV_SQRT2 = 1.0 / np.sqrt(2.0)
_INV_SQRT2PI = 1.0 / np.sqrt(2.0 * np.pi)


def gelu(a: Tensor) -> Tensor:
    cdf = 0.5 * (1.0 + erf(a.data * _INV_SQRT2))
    pdf = np.exp(-0.5 * a.data * a.data) * _INV_SQRT2PI
    return Tensor(a.data * cdf, parents=(a,),
                  vjp=lambda g: (g * (cdf + a.data * pdf),))


def exp(a: Tensor) -> Tensor:
    out = np.exp(a.data)
    return Tensor(out, parents=(a,), vjp=lambda g: (g * out,))


def log(a: Tensor) -> Tensor:
    return Tensor(np.log(a.data), parents=(a,), vjp=lambda g: (g / a.data,))


def sqrt(a: Tensor) -> Tensor:
    out = np.sqrt(a.data)
    return Tensor(out, parents=(a,), vjp=lambda g: (g * (0.5 / out),))


def square(a: Tensor) -> Tensor:
    return mul(a, a)


def clip(a: Tensor, lo: float, hi: float) -> Tensor:
    mask = (a.data > lo) & (a.data < hi)
    return Tensor(np.clip(a.data, lo, hi), parents=(a,), vjp=lambda g: (g * mask,))


def tsum(a: Tensor, axis=None, keepdims=False) -> Tensor:
    def vjp(g):
        if axis is None:
            return (np.broadcast_to(g, a.shape).copy(),)
        gg = g if keepdims else np.expand_dims(g, axis)
        return (np.broadcast_to(gg, a.shape).copy(),)
    return Tensor(a.data.sum(axis=axis, keepdims=keepdims), parents=(a,), vjp=vjp)


def tmean(a: Tensor, axis=None, keepdims=False) -> Tensor:
    n = a.data.size if axis is None else a.shape[axis]
    return mul(tsum(a, axis=axis, keepdims=keepdims), 1.0 / n)


def log_softmax(a: Tensor, axis=-1) -> Tensor:
    shift = a.data - a.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shift).sum(axis=axis, keepdims=True))
    out = shift - lse
    soft = np.exp(out)
    return Tensor(out, parents=(a,),
                  vjp=lambda g: (g - soft * g.sum(axis=axis, keepdims=True),))


def l2_normalize(a: Tensor, axis=-1) -> Tensor:
    """Rows scaled to unit norm; tiny additive floor keeps 0 safe and is
    exact (below one ulp) for unit-scale inputs."""
    nrm = sqrt(add(tsum(square(a), axis=axis, keepdims=True), 1e-24))
    return div(a, nrm)


def conv1d(x: Tensor, w: Tensor, b: Tensor) -> Tensor:
    """Same-padded 1-D convolution over time.

    x: (N, T, Cin), w: (Cout, Cin, k) with k odd, b: (Cout,) -> (N, T, Cout).
    """
    n, t, cin = x.shape
    cout, cin_w, k = w.shape
    if cin_w != cin:
        raise ShapeError(f"conv1d channel mismatch: input {cin}, weight {cin_w}")
    pad = (k - 1) // 2
    xp = np.pad(x.data, ((0, 0), (pad, pad), (0, 0)))
    windows = np.lib.stride_tricks.sliding_window_view(xp, k, axis=1)  # (N, T, Cin, k)
    xcol = windows.reshape(n * t, cin * k)
    w2 = w.data.reshape(cout, cin * k)
    y = (xcol @ w2.T + b.data).reshape(n, t, cout)

    def vjp(g):
        g2 = g.reshape(n * t, cout)
        dw = (g2.T @ xcol).reshape(cout, cin, k) if w.requires_grad else None
        db = g2.sum(axis=0) if b.requires_grad else None
        dx = None
        if x.requires_grad:
            dxcol = (g2 @ w2).reshape(n, t, cin, k)
            dxp = np.zeros_like(xp)
            for j in range(k):
                dxp[:, j:j + t, :] += dxcol[:, :, :, j]
            dx = dxp[:, pad:pad + t, :]
        return (dx, dw, db)

    return Tensor(y, parents=(x, w, b), vjp=vjp)
