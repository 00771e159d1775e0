"""Reverse-mode automatic differentiation over numpy arrays.

A Tensor wraps an ndarray plus the closure that routes its output gradient to
its parents. Graphs are rebuilt per step (define-by-run); dtype follows the
data, so the same network runs in float32 for training and float64 for
finite-difference checks.
"""

from __future__ import annotations

from contextlib import contextmanager

import numpy as np

from . import kernels
from .errors import ShapeError

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph construction (inference / sampling loops)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_bwd")

    def __init__(self, data, requires_grad: bool = False, _parents=(), _bwd=None):
        if isinstance(data, np.ndarray):
            self.data = data
        elif isinstance(data, np.generic):  # numpy scalar: keep its dtype
            self.data = np.asarray(data)
        else:
            self.data = np.asarray(data, dtype=np.float64)
        self.grad = None
        self.requires_grad = requires_grad
        self._parents = _parents
        self._bwd = _bwd

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self) -> float:
        return float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def backward(self):
        if self.data.size != 1:
            raise ShapeError("backward() requires a scalar loss")
        topo: list[Tensor] = []
        seen: set[int] = set()
        stack: list[tuple[Tensor, bool]] = [(self, False)]
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
        self.grad = np.ones_like(self.data)
        for node in reversed(topo):
            if node._bwd is not None:
                node._bwd(node.grad)
            if node is not self and node._parents:
                node.grad = None  # free intermediate gradients as we go

    # operator sugar ---------------------------------------------------
    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __sub__(self, other):
        if isinstance(other, (int, float)):
            return add(self, -other)
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __neg__(self):
        return mul(self, -1.0)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(other, self)

    def __matmul__(self, other):
        return matmul(self, other)


def as_tensor(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x))


def _accum(t: Tensor, g: np.ndarray):
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = g.copy() if isinstance(g, np.ndarray) else np.asarray(g)
    else:
        t.grad = t.grad + g


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g.reshape(shape)


def _make(data, parents, bwd) -> Tensor:
    req = _grad_enabled and any(p.requires_grad for p in parents)
    return Tensor(data, requires_grad=req, _parents=tuple(parents) if req else (), _bwd=bwd if req else None)


# elementwise ----------------------------------------------------------
# python-number operands take a fast path that keeps numpy's weak scalar
# promotion (so float32 graphs stay float32)
def add(a, b) -> Tensor:
    if isinstance(b, (int, float)) and isinstance(a, Tensor):
        b = float(b)  # numpy scalars are dtype-strong; builtins stay weak

        def bwd_s(g):
            _accum(a, _unbroadcast(g, a.data.shape))

        return _make(a.data + b, (a,), bwd_s)
    if isinstance(a, (int, float)) and isinstance(b, Tensor):
        return add(b, a)
    a, b = as_tensor(a), as_tensor(b)

    def bwd(g):
        _accum(a, _unbroadcast(g, a.data.shape))
        _accum(b, _unbroadcast(g, b.data.shape))

    return _make(a.data + b.data, (a, b), bwd)


def mul(a, b) -> Tensor:
    if isinstance(b, (int, float)) and isinstance(a, Tensor):
        b = float(b)

        def bwd_s(g):
            _accum(a, _unbroadcast(g * b, a.data.shape))

        return _make(a.data * b, (a,), bwd_s)
    if isinstance(a, (int, float)) and isinstance(b, Tensor):
        return mul(b, a)
    a, b = as_tensor(a), as_tensor(b)

    def bwd(g):
        _accum(a, _unbroadcast(g * b.data, a.data.shape))
        _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(a.data * b.data, (a, b), bwd)


def div(a, b) -> Tensor:
    if isinstance(b, (int, float)):
        return mul(a, 1.0 / float(b))
    if isinstance(a, (int, float)) and isinstance(b, Tensor):
        a = float(a)

        def bwd_s(g):
            _accum(b, _unbroadcast(-g * a / (b.data * b.data), b.data.shape))

        return _make(a / b.data, (b,), bwd_s)
    a, b = as_tensor(a), as_tensor(b)

    def bwd(g):
        _accum(a, _unbroadcast(g / b.data, a.data.shape))
        _accum(b, _unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(a.data / b.data, (a, b), bwd)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.exp(a.data)

    def bwd(g):
        _accum(a, g * out_data)

    return _make(out_data, (a,), bwd)


def log(a) -> Tensor:
    a = as_tensor(a)

    def bwd(g):
        _accum(a, g / a.data)

    return _make(np.log(a.data), (a,), bwd)


def sqrt(a) -> Tensor:
    a = as_tensor(a)
    out_data = np.sqrt(a.data)

    def bwd(g):
        _accum(a, g * 0.5 / out_data)

    return _make(out_data, (a,), bwd)


def square(a) -> Tensor:
    a = as_tensor(a)

    def bwd(g):
        _accum(a, g * 2.0 * a.data)

    return _make(a.data * a.data, (a,), bwd)


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp; gradient is passed through inside [lo, hi] and zero outside."""
    a = as_tensor(a)
    inside = ((a.data >= lo) & (a.data <= hi)).astype(a.data.dtype)

    def bwd(g):
        _accum(a, g * inside)

    return _make(np.clip(a.data, lo, hi), (a,), bwd)


def silu(a) -> Tensor:
    a = as_tensor(a)
    sig = 1.0 / (1.0 + np.exp(-a.data))
    out_data = a.data * sig

    def bwd(g):
        _accum(a, g * sig * (1.0 + a.data * (1.0 - sig)))

    return _make(out_data, (a,), bwd)


def where_const(cond: np.ndarray, a, b) -> Tensor:
    """Select a where cond else b; cond is a non-differentiable mask."""
    a, b = as_tensor(a), as_tensor(b)
    m = np.asarray(cond).astype(bool)

    def bwd(g):
        _accum(a, _unbroadcast(g * m, a.data.shape))
        _accum(b, _unbroadcast(g * ~m, b.data.shape))

    return _make(np.where(m, a.data, b.data), (a, b), bwd)


# shape ----------------------------------------------------------------
def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.data.shape

    def bwd(g):
        _accum(a, g.reshape(old))

    return _make(a.data.reshape(shape), (a,), bwd)


def transpose(a, axes) -> Tensor:
    a = as_tensor(a)
    inv = np.argsort(axes)

    def bwd(g):
        _accum(a, g.transpose(inv))

    return _make(np.ascontiguousarray(a.data.transpose(axes)), (a,), bwd)


def concat(tensors, axis: int = 1) -> Tensor:
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.data.shape[axis] for t in tensors]
    splits = np.cumsum(sizes)[:-1]

    def bwd(g):
        for t, piece in zip(tensors, np.split(g, splits, axis=axis)):
            _accum(t, piece)

    return _make(np.concatenate([t.data for t in tensors], axis=axis), tensors, bwd)


def split(a, sizes, axis: int = 1) -> list[Tensor]:
    a = as_tensor(a)
    splits = np.cumsum(sizes)[:-1]
    pieces = np.split(a.data, splits, axis=axis)
    outs = []
    offset = 0
    for piece in pieces:
        start = offset
        size = piece.shape[axis]
        offset += size

        def bwd(g, start=start, size=size):
            full = np.zeros_like(a.data)
            sl = [slice(None)] * a.data.ndim
            sl[axis] = slice(start, start + size)
            full[tuple(sl)] = g
            _accum(a, full)

        outs.append(_make(np.ascontiguousarray(piece), (a,), bwd))
    return outs


# reductions -----------------------------------------------------------
def mean(a) -> Tensor:
    a = as_tensor(a)
    n = a.data.size

    def bwd(g):
        _accum(a, np.full(a.data.shape, float(g) / n, dtype=a.data.dtype))

    return _make(np.asarray(a.data.mean()), (a,), bwd)


def sum_(a) -> Tensor:
    a = as_tensor(a)

    def bwd(g):
        _accum(a, np.full(a.data.shape, float(g), dtype=a.data.dtype))

    return _make(np.asarray(a.data.sum()), (a,), bwd)


def mean_axes(a, axes: tuple) -> Tensor:
    """Mean over the given axes (kept out of the result's shape)."""
    a = as_tensor(a)
    n = int(np.prod([a.data.shape[ax] for ax in axes]))
    out_shape_kept = list(a.data.shape)
    for ax in axes:
        out_shape_kept[ax] = 1

    def bwd(g):
        _accum(a, np.broadcast_to(g.reshape(out_shape_kept) / n, a.data.shape))

    return _make(a.data.mean(axis=axes), (a,), bwd)


def softmax(a, axis: int = -1) -> Tensor:
    a = as_tensor(a)
    shifted = a.data - a.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        dot = (g * out_data).sum(axis=axis, keepdims=True)
        _accum(a, out_data * (g - dot))

    return _make(out_data, (a,), bwd)


# linear algebra -------------------------------------------------------
def matmul(a, b) -> Tensor:
    """Matrix product; supports stacked (batched) operands like np.matmul."""
    a, b = as_tensor(a), as_tensor(b)

    def bwd(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g @ b.data.swapaxes(-1, -2), a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(a.data.swapaxes(-1, -2) @ g, b.data.shape))

    return _make(a.data @ b.data, (a, b), bwd)


def conv2d(x, w, b, stride: int = 1, pad: int = 1) -> Tensor:
    """2D convolution: shifted channels-last views are packed into one column
    buffer and reduced by a single GEMM; the input gradient scatters back via
    strided adds, so both directions stay BLAS-bound.
    x [B,Cin,H,W], w [Cout,Cin,kh,kw], b [Cout]."""
    x, w, b = as_tensor(x), as_tensor(w), as_tensor(b)
    bs, cin, h, ww = x.data.shape
    cout, cin_w, kh, kw = w.data.shape
    if cin != cin_w:
        raise ShapeError(f"conv2d: input has {cin} channels, weight expects {cin_w}")
    oh = (h + 2 * pad - kh) // stride + 1
    ow = (ww + 2 * pad - kw) // stride + 1
    w_taps = np.ascontiguousarray(w.data.transpose(2, 3, 1, 0))  # [kh,kw,Cin,Cout]

    if kh == kw == 1 and stride == 1 and pad == 0:
        x2d = np.ascontiguousarray(x.data.transpose(0, 2, 3, 1)).reshape(-1, cin)
        y2d = x2d @ w_taps[0, 0] + b.data
        out_data = np.ascontiguousarray(
            y2d.reshape(bs, oh, ow, cout).transpose(0, 3, 1, 2))

        def bwd_1x1(g):
            g2d = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, cout)
            if w.requires_grad:
                _accum(w, (x2d.T @ g2d).T.reshape(w.data.shape))
            if b.requires_grad:
                _accum(b, g2d.sum(axis=0))
            if x.requires_grad:
                dx2d = g2d @ w_taps[0, 0].T
                _accum(x, np.ascontiguousarray(
                    dx2d.reshape(bs, h, ww, cin).transpose(0, 3, 1, 2)))

        return _make(out_data, (x, w, b), bwd_1x1)

    xp = np.zeros((bs, h + 2 * pad, ww + 2 * pad, cin), dtype=x.data.dtype)
    xp[:, pad:pad + h, pad:pad + ww, :] = x.data.transpose(0, 2, 3, 1)
    # channels-last column buffer: tap (di,dj) occupies one contiguous block
    col = np.empty((bs, oh, ow, kh * kw * cin), dtype=x.data.dtype)
    k = 0
    for di in range(kh):
        for dj in range(kw):
            col[..., k:k + cin] = xp[:, di:di + oh * stride:stride,
                                     dj:dj + ow * stride:stride, :]
            k += cin
    col2d = col.reshape(-1, kh * kw * cin)
    w2d = w_taps.reshape(kh * kw * cin, cout)
    y2d = col2d @ w2d + b.data
    out_data = np.ascontiguousarray(y2d.reshape(bs, oh, ow, cout).transpose(0, 3, 1, 2))

    def bwd(g):
        g2d = np.ascontiguousarray(g.transpose(0, 2, 3, 1)).reshape(-1, cout)
        if b.requires_grad:
            _accum(b, g2d.sum(axis=0))
        if w.requires_grad:
            dw2d = col2d.T @ g2d  # [kh*kw*cin, cout]
            _accum(w, np.ascontiguousarray(
                dw2d.reshape(kh, kw, cin, cout).transpose(3, 2, 0, 1)))
        if x.requires_grad:
            dcol = (g2d @ w2d.T).reshape(bs, oh, ow, kh * kw * cin)
            dxp = np.zeros_like(xp)
            kk = 0
            for di in range(kh):
                for dj in range(kw):
                    dxp[:, di:di + oh * stride:stride,
                        dj:dj + ow * stride:stride, :] += dcol[..., kk:kk + cin]
                    kk += cin
            dx = dxp[:, pad:pad + h, pad:pad + ww, :]
            _accum(x, np.ascontiguousarray(dx.transpose(0, 3, 1, 2)))

    return _make(out_data, (x, w, b), bwd)


def linear(x, w, b) -> Tensor:
    """x [B,D] @ w [D,E] + b [E]."""
    return add(matmul(x, w), b)


def group_norm(x, gamma, beta, groups: int, eps: float = 1e-5) -> Tensor:
    x, gamma, beta = as_tensor(x), as_tensor(gamma), as_tensor(beta)
    y, xhat, rstd = kernels.group_norm_fwd(x.data, gamma.data, beta.data, groups, eps)

    def bwd(g):
        dx, dgamma, dbeta = kernels.group_norm_bwd(g, xhat, gamma.data, rstd, groups)
        _accum(x, dx)
        _accum(gamma, dgamma)
        _accum(beta, dbeta)

    return _make(y, (x, gamma, beta), bwd)


def upsample_nearest2x(x) -> Tensor:
    x = as_tensor(x)
    b, c, h, w = x.data.shape
    out_data = x.data.repeat(2, axis=2).repeat(2, axis=3)

    def bwd(g):
        _accum(x, g.reshape(b, c, h, 2, w, 2).sum(axis=(3, 5)))

    return _make(out_data, (x,), bwd)
