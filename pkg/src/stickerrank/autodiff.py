"""Reverse-mode automatic differentiation on numpy arrays.

Only the operations the ranking model actually uses are implemented.
Every op records an exact analytic backward; the whole set is validated
against central finite differences (see gradcheck). Forward passes are
pure functions of their inputs, so repeated evaluation is bit-identical.
"""

from __future__ import annotations

import contextlib

import numpy as np

from .errors import NumericError, ShapeError

_GRAD_ENABLED = True


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (forward values only)."""
    global _GRAD_ENABLED
    prev = _GRAD_ENABLED
    _GRAD_ENABLED = False
    try:
        yield
    finally:
        _GRAD_ENABLED = prev


def grad_enabled():
    return _GRAD_ENABLED


class Tensor:
    """A float numpy array plus reverse-mode bookkeeping."""

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward")

    def __init__(self, data, requires_grad=False, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype not in (np.float32, np.float64):
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None

    @property
    def shape(self):
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def item(self):
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self, seed=None):
        """Accumulate gradients of this tensor into every reachable parent.

        ``seed`` defaults to ones (suitable for scalar losses).
        """
        if not self.requires_grad:
            raise ValueError("backward() on a tensor that does not require grad")
        topo = []
        visited = set()
        stack = [(self, False)]
        while stack:
            node, emitted = stack.pop()
            if emitted:
                topo.append(node)
                continue
            if id(node) in visited:
                continue
            visited.add(id(node))
            stack.append((node, True))
            for p in node._parents:
                if p.requires_grad and id(p) not in visited:
                    stack.append((p, False))
        self.grad = np.ones_like(self.data) if seed is None else np.asarray(seed, dtype=self.data.dtype)
        for node in reversed(topo):
            if node._backward is not None:
                node._backward(node.grad)

    # -- operator sugar ---------------------------------------------------

    def __add__(self, other):
        return add(self, _wrap(other, self.dtype))

    __radd__ = __add__

    def __sub__(self, other):
        return add(self, neg(_wrap(other, self.dtype)))

    def __rsub__(self, other):
        return add(_wrap(other, self.dtype), neg(self))

    def __mul__(self, other):
        return mul(self, _wrap(other, self.dtype))

    __rmul__ = __mul__

    def __neg__(self):
        return neg(self)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("tensor/tensor division is not an op; multiply by a reciprocal")
        return mul(self, _wrap(1.0 / other, self.dtype))

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        data = self.data[key]

        def _bw(g):
            gx = np.zeros_like(self.data)
            np.add.at(gx, key, g)
            _accum(self, gx)

        return _make(data, (self,), _bw)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        data = self.data.reshape(shape)

        def _bw(g):
            _accum(self, g.reshape(self.data.shape))

        return _make(data, (self,), _bw)

    @property
    def T(self):
        data = self.data.T

        def _bw(g):
            _accum(self, g.T)

        return _make(data, (self,), _bw)

    def __repr__(self):
        return f"Tensor(shape={self.data.shape}, requires_grad={self.requires_grad})"


def _wrap(value, dtype):
    if isinstance(value, Tensor):
        return value
    return Tensor(np.asarray(value, dtype=dtype))


def constant(value, dtype=None):
    """A non-trainable tensor (gradients never flow into it)."""
    return Tensor(value, requires_grad=False, dtype=dtype)


def _accum(t, g):
    if t.grad is None:
        t.grad = np.zeros_like(t.data)
    t.grad += g


def _make(data, parents, backward):
    out = Tensor(data)
    if _GRAD_ENABLED and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(p for p in parents if p.requires_grad)
        out._backward = backward
    return out


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (inverse of numpy broadcasting)."""
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, (gs, s) in enumerate(zip(g.shape, shape)):
        if s == 1 and gs != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


# -- elementwise ----------------------------------------------------------


def add(a, b):
    data = a.data + b.data

    def _bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g, b.data.shape))

    return _make(data, (a, b), _bw)


def mul(a, b):
    data = a.data * b.data

    def _bw(g):
        if a.requires_grad:
            _accum(a, _unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            _accum(b, _unbroadcast(g * a.data, b.data.shape))

    return _make(data, (a, b), _bw)


def neg(a):
    def _bw(g):
        _accum(a, -g)

    return _make(-a.data, (a,), _bw)


def relu(a):
    data = np.maximum(a.data, 0.0)

    def _bw(g):
        _accum(a, g * (a.data > 0))

    return _make(data, (a,), _bw)


def sigmoid(a):
    x = a.data
    data = np.empty_like(x)
    pos = x >= 0
    data[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    data[~pos] = ex / (1.0 + ex)

    def _bw(g):
        _accum(a, g * data * (1.0 - data))

    return _make(data, (a,), _bw)


def tanh(a):
    data = np.tanh(a.data)

    def _bw(g):
        _accum(a, g * (1.0 - data * data))

    return _make(data, (a,), _bw)


def exp(a):
    data = np.exp(a.data)

    def _bw(g):
        _accum(a, g * data)

    return _make(data, (a,), _bw)


def log(a):
    data = np.log(a.data)

    def _bw(g):
        _accum(a, g / a.data)

    return _make(data, (a,), _bw)


def pow_const(a, p):
    """a ** p for a constant exponent p."""
    data = a.data**p

    def _bw(g):
        _accum(a, g * p * a.data ** (p - 1))

    return _make(data, (a,), _bw)


# -- linear algebra -------------------------------------------------------


def matmul(a, b):
    ad, bd = a.data, b.data
    if ad.ndim > 2 or bd.ndim > 2:
        raise ShapeError(f"matmul supports 1-D/2-D operands, got {ad.shape} @ {bd.shape}")
    try:
        data = ad @ bd
    except ValueError as e:
        raise ShapeError(f"matmul: {ad.shape} @ {bd.shape}") from e

    def _bw(g):
        if a.requires_grad:
            if ad.ndim == 1 and bd.ndim == 1:
                ga = g * bd
            elif ad.ndim == 1:
                ga = bd @ g
            elif bd.ndim == 1:
                ga = np.outer(g, bd)
            else:
                ga = g @ bd.T
            _accum(a, ga)
        if b.requires_grad:
            if ad.ndim == 1 and bd.ndim == 1:
                gb = g * ad
            elif ad.ndim == 1:
                gb = np.outer(ad, g)
            elif bd.ndim == 1:
                gb = ad.T @ g
            else:
                gb = ad.T @ g
            _accum(b, gb)

    return _make(data, (a, b), _bw)


# -- reductions -----------------------------------------------------------


def tsum(a, axis=None, keepdims=False):
    data = a.data.sum(axis=axis, keepdims=keepdims)

    def _bw(g):
        if axis is None:
            _accum(a, np.broadcast_to(g, a.data.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g, a.data.shape).copy())

    return _make(data, (a,), _bw)


def tmean(a, axis=None, keepdims=False):
    count = a.data.size if axis is None else np.prod(
        [a.data.shape[ax] for ax in (axis if isinstance(axis, tuple) else (axis,))]
    )
    data = a.data.mean(axis=axis, keepdims=keepdims)

    def _bw(g):
        if axis is None:
            _accum(a, np.broadcast_to(g / count, a.data.shape).copy())
            return
        if not keepdims:
            g = np.expand_dims(g, axis)
        _accum(a, np.broadcast_to(g / count, a.data.shape).copy())

    return _make(data, (a,), _bw)


def tmax(a, axis, keepdims=False):
    """Max along one axis; ties route the gradient to the first maximum."""
    data = a.data.max(axis=axis, keepdims=keepdims)
    idx = a.data.argmax(axis=axis)

    def _bw(g):
        gx = np.zeros_like(a.data)
        gg = g if keepdims else np.expand_dims(g, axis)
        np.put_along_axis(gx, np.expand_dims(idx, axis), gg, axis)
        _accum(a, gx)

    return _make(data, (a,), _bw)


# -- structure ------------------------------------------------------------


def concat(tensors, axis=0):
    tensors = list(tensors)
    data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]

    def _bw(g):
        offset = 0
        for t, size in zip(tensors, sizes):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(offset, offset + size)
                _accum(t, g[tuple(sl)])
            offset += size

    return _make(data, tuple(tensors), _bw)


def stack(tensors):
    """Stack equal-shape tensors along a new leading axis."""
    tensors = list(tensors)
    data = np.stack([t.data for t in tensors], axis=0)

    def _bw(g):
        for i, t in enumerate(tensors):
            if t.requires_grad:
                _accum(t, g[i])

    return _make(data, tuple(tensors), _bw)


def embedding(table, ids):
    """Row lookup into a (vocab, d) table; duplicate ids accumulate grads."""
    ids = np.asarray(ids)
    data = table.data[ids]

    def _bw(g):
        gt = np.zeros_like(table.data)
        np.add.at(gt, ids, g)
        _accum(table, gt)

    return _make(data, (table,), _bw)


# -- masking and normalization --------------------------------------------


def masked_fill(a, keep_mask, fill_value):
    """Replace entries where ``keep_mask`` is False by ``fill_value``."""
    keep = np.broadcast_to(np.asarray(keep_mask, dtype=bool), a.data.shape)
    data = np.where(keep, a.data, a.data.dtype.type(fill_value))

    def _bw(g):
        _accum(a, g * keep)

    return _make(data, (a,), _bw)


def masked_softmax(a, mask, axis=-1):
    """Softmax over unmasked entries; masked entries get exactly zero.

    Raises NumericError when a row has no unmasked entry (never NaN).
    """
    mask = np.broadcast_to(np.asarray(mask, dtype=bool), a.data.shape)
    if not mask.any(axis=axis).all():
        raise NumericError("masked_softmax: a row has all entries masked")
    shifted = np.where(mask, a.data, -np.inf)
    shifted = shifted - shifted.max(axis=axis, keepdims=True)
    e = np.exp(shifted)  # exp(-inf) == 0 exactly on masked entries
    data = e / e.sum(axis=axis, keepdims=True)

    def _bw(g):
        dot = (g * data).sum(axis=axis, keepdims=True)
        _accum(a, data * (g - dot))

    return _make(data, (a,), _bw)


# -- convolution ----------------------------------------------------------


def conv2d(x, kernel, bias, stride=1, pad=0):
    """2-D convolution on an (H, W, Cin) map with an (kh, kw, Cin, Cout) kernel."""
    H, W, cin = x.data.shape
    kh, kw, kcin, cout = kernel.data.shape
    if kcin != cin:
        raise ShapeError(f"conv2d: kernel expects {kcin} input channels, image has {cin}")
    xp = np.pad(x.data, ((pad, pad), (pad, pad), (0, 0))) if pad else x.data
    ho = (H + 2 * pad - kh) // stride + 1
    wo = (W + 2 * pad - kw) // stride + 1
    win = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(0, 1))
    win = win[::stride, ::stride]  # (ho, wo, cin, kh, kw)
    col = win.transpose(0, 1, 3, 4, 2).reshape(ho * wo, kh * kw * cin)
    k2 = kernel.data.reshape(kh * kw * cin, cout)
    data = (col @ k2 + bias.data).reshape(ho, wo, cout)

    def _bw(g):
        g2 = g.reshape(ho * wo, cout)
        if bias.requires_grad:
            _accum(bias, g2.sum(axis=0))
        if kernel.requires_grad:
            _accum(kernel, (col.T @ g2).reshape(kh, kw, cin, cout))
        if x.requires_grad:
            gcol = (g2 @ k2.T).reshape(ho, wo, kh, kw, cin)
            gxp = np.zeros((H + 2 * pad, W + 2 * pad, cin), dtype=x.data.dtype)
            for i in range(kh):
                for j in range(kw):
                    gxp[i : i + ho * stride : stride, j : j + wo * stride : stride] += gcol[:, :, i, j, :]
            _accum(x, gxp[pad : pad + H, pad : pad + W] if pad else gxp)

    return _make(data, (x, kernel, bias), _bw)


def avg_pool2d(x, factor):
    """Non-overlapping (factor x factor) average pooling on (H, W, C)."""
    H, W, c = x.data.shape
    if H % factor or W % factor:
        raise ShapeError(f"avg_pool2d: {H}x{W} not divisible by {factor}")
    ho, wo = H // factor, W // factor
    data = x.data.reshape(ho, factor, wo, factor, c).mean(axis=(1, 3))

    def _bw(g):
        gx = np.repeat(np.repeat(g, factor, axis=0), factor, axis=1) / (factor * factor)
        _accum(x, gx)

    return _make(data, (x,), _bw)
