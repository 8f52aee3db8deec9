"""Reverse-mode differentiable tensor engine on top of numpy.

A ``Tensor`` wraps a numpy array together with an optional gradient buffer.
Operations build a DAG of closures on the output tensors; ``Tensor.backward``
topologically sorts that graph and runs each node's accumulation step exactly
once.  Only float32 and float64 are supported: float32 is the training dtype,
float64 exists for finite-difference gradient verification.

Everything here is deterministic given inputs, dtype, and the numpy Generator
passed to the stochastic ops (dropout).  numpy may parallelize matmuls through
BLAS; pinning the BLAS thread pool to 1 (see ``microseg.cli``) gives
bit-reproducible results.
"""

from __future__ import annotations

import math
from contextlib import contextmanager

import numpy as np
from scipy import special

__all__ = [
    "Tensor",
    "no_grad",
    "is_grad_enabled",
    "matmul",
    "conv2d",
    "conv_transpose2d",
    "avg_pool2d",
    "layer_norm",
    "softmax",
    "log_softmax",
    "gelu",
    "dropout",
    "cyclic_shift",
    "concat",
    "take",
    "backward",
    "finite_difference_gradient",
    "check_gradients",
]

_FLOAT_DTYPES = (np.float32, np.float64)

_grad_enabled = True


@contextmanager
def no_grad():
    """Disable graph construction inside the block (eval / inference mode)."""
    global _grad_enabled
    prev = _grad_enabled
    _grad_enabled = False
    try:
        yield
    finally:
        _grad_enabled = prev


def is_grad_enabled():
    return _grad_enabled


class Tensor:
    """Shape-typed numeric array with an optional gradient buffer.

    ``data`` is a row-major numpy array of dtype float32 or float64.
    ``grad`` is filled by ``backward`` and always matches ``data`` in shape
    and dtype.
    """

    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad=False, name=None):
        arr = np.asarray(data)
        if arr.dtype not in _FLOAT_DTYPES:
            arr = arr.astype(np.float32)
        self.data = arr
        self.grad = None
        self.requires_grad = bool(requires_grad)
        self._parents = ()
        self._backward = None
        self.name = name

    # -- construction helpers -------------------------------------------------

    @staticmethod
    def zeros(shape, dtype=np.float32, requires_grad=False):
        return Tensor(np.zeros(shape, dtype=dtype), requires_grad=requires_grad)

    @staticmethod
    def ones(shape, dtype=np.float32, requires_grad=False):
        return Tensor(np.ones(shape, dtype=dtype), requires_grad=requires_grad)

    # -- basic introspection ---------------------------------------------------

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    @property
    def size(self):
        return self.data.size

    def item(self):
        return float(self.data.reshape(()))

    def detach(self):
        return Tensor(self.data)

    def __repr__(self):
        grad_flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.data.shape}, dtype={self.data.dtype.name}{grad_flag})"

    # -- graph plumbing ---------------------------------------------------------

    def _accumulate(self, g):
        if self.grad is None:
            self.grad = np.zeros_like(self.data)
        self.grad += g

    def zero_grad(self):
        self.grad = None

    def backward(self):
        """Reverse-mode accumulation from this scalar into every reachable
        ``requires_grad`` tensor's ``.grad``."""
        if self.data.size != 1:
            raise ValueError(f"backward requires a scalar, got shape {self.data.shape}")
        order = []
        seen = set()
        stack = [(self, False)]
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
        self._accumulate(np.ones_like(self.data))
        for node in reversed(order):
            if node._backward is not None and node.grad is not None:
                node._backward(node.grad)

    # -- operator sugar ----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return add(self, mul(other, -1.0))

    def __rsub__(self, other):
        return add(mul(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(_as_tensor(other, self.dtype), self)

    def __neg__(self):
        return mul(self, -1.0)

    def __pow__(self, exponent):
        return power(self, exponent)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, key):
        return getitem(self, key)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes)

    def sum(self, axis=None, keepdims=False):
        return reduce_sum(self, axis, keepdims)

    def mean(self, axis=None, keepdims=False):
        return reduce_mean(self, axis, keepdims)


def _as_tensor(x, dtype=None):
    if isinstance(x, Tensor):
        return x
    arr = np.asarray(x, dtype=dtype if dtype is not None else np.float32)
    return Tensor(arr)


def _make(out_data, parents, backward_fn):
    """Wrap an op result; attach the closure only when a graph is wanted."""
    out = Tensor(out_data)
    if _grad_enabled and any(p.requires_grad for p in parents):
        out.requires_grad = True
        out._parents = tuple(parents)
        out._backward = backward_fn
    return out


def _unbroadcast(g, shape):
    """Sum ``g`` down to ``shape`` (the inverse of numpy broadcasting)."""
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for ax, n in enumerate(shape):
        if n == 1 and g.shape[ax] != 1:
            g = g.sum(axis=ax, keepdims=True)
    return g


# -- elementwise arithmetic ----------------------------------------------------


def add(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    out_data = a.data + b.data

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g, b.data.shape))

    return _make(out_data, (a, b), bwd)


def mul(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    out_data = a.data * b.data

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g * b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(g * a.data, b.data.shape))

    return _make(out_data, (a, b), bwd)


def div(a, b):
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    out_data = a.data / b.data

    def bwd(g):
        if a.requires_grad:
            a._accumulate(_unbroadcast(g / b.data, a.data.shape))
        if b.requires_grad:
            b._accumulate(_unbroadcast(-g * a.data / (b.data * b.data), b.data.shape))

    return _make(out_data, (a, b), bwd)


def power(a, exponent):
    a = _as_tensor(a)
    e = float(exponent)
    out_data = a.data**e

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g * e * a.data ** (e - 1.0))

    return _make(out_data, (a,), bwd)


def exp(a):
    a = _as_tensor(a)
    out_data = np.exp(a.data)

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g * out_data)

    return _make(out_data, (a,), bwd)


def log(a):
    a = _as_tensor(a)
    out_data = np.log(a.data)

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g / a.data)

    return _make(out_data, (a,), bwd)


def sqrt(a):
    a = _as_tensor(a)
    out_data = np.sqrt(a.data)

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g * 0.5 / out_data)

    return _make(out_data, (a,), bwd)


# -- shape ops -------------------------------------------------------------------


def reshape(a, shape):
    a = _as_tensor(a)
    out_data = a.data.reshape(shape)

    def bwd(g):
        if a.requires_grad:
            a._accumulate(g.reshape(a.data.shape))

    return _make(out_data, (a,), bwd)


def transpose(a, axes):
    a = _as_tensor(a)
    axes = tuple(axes)
    out_data = np.transpose(a.data, axes)
    inverse = tuple(np.argsort(axes))

    def bwd(g):
        if a.requires_grad:
            a._accumulate(np.transpose(g, inverse))

    return _make(out_data, (a,), bwd)


def getitem(a, key):
    """Basic indexing (ints / slices / ellipsis) with gradient scatter."""
    a = _as_tensor(a)
    out_data = a.data[key]

    def bwd(g):
        if a.requires_grad:
            buf = np.zeros_like(a.data)
            buf[key] += g
            a._accumulate(buf)

    return _make(out_data, (a,), bwd)


def take(a, index):
    """Integer-array lookup along the first axis (used for bias-table gathers).

    Repeated indices accumulate their gradients.
    """
    a = _as_tensor(a)
    index = np.asarray(index)
    out_data = a.data[index]

    def bwd(g):
        if a.requires_grad:
            buf = np.zeros_like(a.data)
            np.add.at(buf, index, g)
            a._accumulate(buf)

    return _make(out_data, (a,), bwd)


def concat(tensors, axis):
    tensors = [_as_tensor(t) for t in tensors]
    out_data = np.concatenate([t.data for t in tensors], axis=axis)
    sizes = [t.data.shape[axis] for t in tensors]
    offsets = np.cumsum([0] + sizes)

    def bwd(g):
        for t, lo, hi in zip(tensors, offsets[:-1], offsets[1:]):
            if t.requires_grad:
                sl = [slice(None)] * g.ndim
                sl[axis] = slice(lo, hi)
                t._accumulate(g[tuple(sl)])

    return _make(out_data, tuple(tensors), bwd)


def reduce_sum(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    out_data = a.data.sum(axis=axis, keepdims=keepdims)

    def bwd(g):
        if a.requires_grad:
            gg = g
            if not keepdims and axis is not None:
                gg = np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(gg, a.data.shape).copy())

    return _make(out_data, (a,), bwd)


def reduce_mean(a, axis=None, keepdims=False):
    a = _as_tensor(a)
    out_data = a.data.mean(axis=axis, keepdims=keepdims)
    count = a.data.size / max(out_data.size, 1)

    def bwd(g):
        if a.requires_grad:
            gg = g
            if not keepdims and axis is not None:
                gg = np.expand_dims(g, axis)
            a._accumulate(np.broadcast_to(gg, a.data.shape) / count)

    return _make(out_data, (a,), bwd)


# -- linear algebra -----------------------------------------------------------------


def matmul(a, b):
    """Batched matrix product with numpy broadcasting over leading axes."""
    a = _as_tensor(a)
    b = _as_tensor(b, a.dtype)
    if a.data.shape[-1] != b.data.shape[-2 if b.data.ndim > 1 else -1]:
        raise ValueError(
            f"matmul inner dimensions differ: {a.data.shape} @ {b.data.shape}"
        )
    out_data = a.data @ b.data

    def bwd(g):
        if a.requires_grad:
            ga = g @ np.swapaxes(b.data, -1, -2)
            a._accumulate(_unbroadcast(ga, a.data.shape))
        if b.requires_grad:
            gb = np.swapaxes(a.data, -1, -2) @ g
            b._accumulate(_unbroadcast(gb, b.data.shape))

    return _make(out_data, (a, b), bwd)


def linear(x, weight, bias=None):
    """x @ weight.T + bias with weight of shape (out_features, in_features)."""
    out = matmul(x, transpose(weight, (1, 0)))
    if bias is not None:
        out = add(out, bias)
    return out


# -- neural-net primitives ------------------------------------------------------------


def _im2col(xp, kh, kw, stride, out_h, out_w):
    # (B, C, out_h, out_w, kh, kw) strided view, then (B, out_h*out_w, C*kh*kw)
    view = np.lib.stride_tricks.sliding_window_view(xp, (kh, kw), axis=(2, 3))
    view = view[:, :, ::stride, ::stride][:, :, :out_h, :out_w]
    b, c = xp.shape[0], xp.shape[1]
    cols = view.transpose(0, 2, 3, 1, 4, 5).reshape(b, out_h * out_w, c * kh * kw)
    return np.ascontiguousarray(cols)


def conv2d(x, weight, bias=None, stride=1, padding=0):
    """2-d cross-correlation with zero padding.

    x: (B, Cin, H, W); weight: (Cout, Cin, kh, kw); bias: (Cout,).
    Output spatial size follows floor((H + 2*padding - kh)/stride) + 1.
    """
    x = _as_tensor(x)
    weight = _as_tensor(weight, x.dtype)
    if bias is not None:
        bias = _as_tensor(bias, x.dtype)
    if stride < 1:
        raise ValueError("stride must be >= 1")
    b, cin, h, w = x.data.shape
    cout, cin_w, kh, kw = weight.data.shape
    if cin != cin_w:
        raise ValueError(f"conv2d channel mismatch: input {cin}, weight {cin_w}")
    hp, wp = h + 2 * padding, w + 2 * padding
    if kh > hp or kw > wp:
        raise ValueError(
            f"kernel ({kh}x{kw}) larger than padded input ({hp}x{wp})"
        )
    out_h = (hp - kh) // stride + 1
    out_w = (wp - kw) // stride + 1

    xp = (
        np.pad(x.data, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
        if padding
        else x.data
    )
    cols = _im2col(xp, kh, kw, stride, out_h, out_w)  # (B, P, Cin*kh*kw)
    wmat = weight.data.reshape(cout, -1)
    out = cols @ wmat.T  # (B, P, Cout)
    if bias is not None:
        out = out + bias.data
    out_data = out.transpose(0, 2, 1).reshape(b, cout, out_h, out_w)

    def bwd(g):
        gmat = g.reshape(b, cout, out_h * out_w).transpose(0, 2, 1)  # (B, P, Cout)
        if bias is not None and bias.requires_grad:
            bias._accumulate(gmat.sum(axis=(0, 1)))
        if weight.requires_grad:
            gw = np.einsum("bpo,bpk->ok", gmat, cols, optimize=True)
            weight._accumulate(gw.reshape(weight.data.shape))
        if x.requires_grad:
            dcols = gmat @ wmat  # (B, P, Cin*kh*kw)
            dcols = dcols.reshape(b, out_h, out_w, cin, kh, kw).transpose(
                0, 3, 1, 2, 4, 5
            )
            dxp = np.zeros((b, cin, hp, wp), dtype=x.data.dtype)
            for ki in range(kh):
                for kj in range(kw):
                    dxp[
                        :,
                        :,
                        ki : ki + stride * out_h : stride,
                        kj : kj + stride * out_w : stride,
                    ] += dcols[:, :, :, :, ki, kj]
            if padding:
                dxp = dxp[:, :, padding:-padding, padding:-padding]
            x._accumulate(dxp)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out_data, parents, bwd)


def conv_transpose2d(x, weight, bias=None, stride=2):
    """Transposed convolution with kernel == stride (non-overlapping upsampling).

    x: (B, Cin, H, W); weight: (Cin, Cout, k, k); output (B, Cout, H*k, W*k).
    """
    x = _as_tensor(x)
    weight = _as_tensor(weight, x.dtype)
    if bias is not None:
        bias = _as_tensor(bias, x.dtype)
    b, cin, h, w = x.data.shape
    cin_w, cout, kh, kw = weight.data.shape
    if cin != cin_w:
        raise ValueError(f"conv_transpose2d channel mismatch: {cin} vs {cin_w}")
    if kh != stride or kw != stride:
        raise ValueError("conv_transpose2d supports kernel == stride only")
    t = np.einsum("bchw,cdkl->bdklhw", x.data, weight.data, optimize=True)
    out_data = np.zeros((b, cout, h * kh, w * kw), dtype=x.data.dtype)
    for ki in range(kh):
        for kj in range(kw):
            out_data[:, :, ki::kh, kj::kw] = t[:, :, ki, kj]
    if bias is not None:
        out_data += bias.data[None, :, None, None]

    def bwd(g):
        dt = np.empty((b, cout, kh, kw, h, w), dtype=g.dtype)
        for ki in range(kh):
            for kj in range(kw):
                dt[:, :, ki, kj] = g[:, :, ki::kh, kj::kw]
        if bias is not None and bias.requires_grad:
            bias._accumulate(g.sum(axis=(0, 2, 3)))
        if weight.requires_grad:
            gw = np.einsum("bchw,bdklhw->cdkl", x.data, dt, optimize=True)
            weight._accumulate(gw)
        if x.requires_grad:
            gx = np.einsum("bdklhw,cdkl->bchw", dt, weight.data, optimize=True)
            x._accumulate(gx)

    parents = (x, weight) if bias is None else (x, weight, bias)
    return _make(out_data, parents, bwd)


def avg_pool2d(x, k=2):
    """Non-overlapping k x k average pooling."""
    x = _as_tensor(x)
    b, c, h, w = x.data.shape
    if h % k or w % k:
        raise ValueError(f"avg_pool2d needs spatial dims divisible by {k}")
    view = x.data.reshape(b, c, h // k, k, w // k, k)
    out_data = view.mean(axis=(3, 5))

    def bwd(g):
        if x.requires_grad:
            gx = np.repeat(np.repeat(g, k, axis=2), k, axis=3) / (k * k)
            x._accumulate(gx)

    return _make(out_data, (x,), bwd)


def layer_norm(x, gamma, beta, eps=1e-5):
    """Normalize over the last axis with population variance, then affine."""
    x = _as_tensor(x)
    gamma = _as_tensor(gamma, x.dtype)
    beta = _as_tensor(beta, x.dtype)
    mu = x.data.mean(axis=-1, keepdims=True)
    xc = x.data - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    inv = 1.0 / np.sqrt(var + eps)
    xhat = xc * inv
    out_data = gamma.data * xhat + beta.data

    def bwd(g):
        if beta.requires_grad:
            beta._accumulate(
                g.reshape(-1, g.shape[-1]).sum(axis=0).astype(beta.data.dtype)
            )
        if gamma.requires_grad:
            gamma._accumulate((g * xhat).reshape(-1, g.shape[-1]).sum(axis=0))
        if x.requires_grad:
            dxhat = g * gamma.data
            m1 = dxhat.mean(axis=-1, keepdims=True)
            m2 = (dxhat * xhat).mean(axis=-1, keepdims=True)
            x._accumulate(inv * (dxhat - m1 - xhat * m2))

    return _make(out_data, (x, gamma, beta), bwd)


def softmax(x, axis=-1):
    """Max-shifted softmax along ``axis``; rows sum to one."""
    x = _as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    e = np.exp(shifted)
    out_data = e / e.sum(axis=axis, keepdims=True)

    def bwd(g):
        if x.requires_grad:
            dot = (g * out_data).sum(axis=axis, keepdims=True)
            x._accumulate(out_data * (g - dot))

    return _make(out_data, (x,), bwd)


def log_softmax(x, axis=-1):
    """log(softmax(x)) via a max-shifted log-sum-exp (overflow-safe)."""
    x = _as_tensor(x)
    shifted = x.data - x.data.max(axis=axis, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=axis, keepdims=True))
    out_data = shifted - lse
    probs = np.exp(out_data)

    def bwd(g):
        if x.requires_grad:
            x._accumulate(g - probs * g.sum(axis=axis, keepdims=True))

    return _make(out_data, (x,), bwd)


_INV_SQRT2 = 1.0 / math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def gelu(x):
    """Exact GELU: 0.5 * x * (1 + erf(x / sqrt(2)))."""
    x = _as_tensor(x)
    cdf = 0.5 * (1.0 + special.erf(x.data * _INV_SQRT2))
    out_data = x.data * cdf

    def bwd(g):
        if x.requires_grad:
            pdf = _INV_SQRT_2PI * np.exp(-0.5 * x.data * x.data)
            x._accumulate(g * (cdf + x.data * pdf))

    return _make(out_data, (x,), bwd)


def dropout(x, p, training, rng):
    """Inverted dropout: zero with probability ``p`` and scale survivors by
    1/(1-p) during training; identity in eval mode."""
    if not 0.0 <= p < 1.0:
        raise ValueError(f"dropout probability must be in [0, 1), got {p}")
    x = _as_tensor(x)
    if not training or p == 0.0:
        return x
    keep = (rng.random(x.data.shape) >= p).astype(x.data.dtype)
    scale = 1.0 / (1.0 - p)
    out_data = x.data * keep * scale

    def bwd(g):
        if x.requires_grad:
            x._accumulate(g * keep * scale)

    return _make(out_data, (x,), bwd)


def cyclic_shift(x, dh, dw):
    """Torus roll of the spatial axes of a (B, H, W, C) tensor."""
    x = _as_tensor(x)
    out_data = np.roll(x.data, (dh, dw), axis=(1, 2))

    def bwd(g):
        if x.requires_grad:
            x._accumulate(np.roll(g, (-dh, -dw), axis=(1, 2)))

    return _make(out_data, (x,), bwd)


# -- gradients ---------------------------------------------------------------------


def backward(loss, params=None):
    """Run reverse-mode accumulation from scalar ``loss``.

    With ``params`` (name -> Tensor), returns name -> gradient array, zeros for
    parameters the loss does not reach.
    """
    loss.backward()
    if params is None:
        return None
    out = {}
    for name, p in params.items():
        out[name] = p.grad if p.grad is not None else np.zeros_like(p.data)
    return out


def finite_difference_gradient(f, x, h=1e-4):
    """Central-difference gradient of scalar ``f`` at ``x`` (float64 array)."""
    x = np.asarray(x, dtype=np.float64)
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    gflat = grad.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + h
        fp = float(f(x))
        flat[i] = orig - h
        fm = float(f(x))
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * h)
    return grad


def check_gradients(f, inputs, h=1e-4, floor=1e-6):
    """Compare analytic and central-difference gradients of ``f``.

    ``f`` maps a tuple of Tensors to a scalar Tensor; ``inputs`` are float64
    Tensors with requires_grad.  Returns the max relative error over all input
    elements, with |a - b| / max(|a|, |b|, floor) as the per-element measure.
    """
    for t in inputs:
        t.zero_grad()
    loss = f(*inputs)
    loss.backward()
    worst = 0.0
    for idx, t in enumerate(inputs):
        if not t.requires_grad:
            continue
        analytic = t.grad if t.grad is not None else np.zeros_like(t.data)

        def scalar_f(arr, _idx=idx):
            args = [
                Tensor(arr) if j == _idx else Tensor(u.data.copy())
                for j, u in enumerate(inputs)
            ]
            with no_grad():
                return f(*args).item()

        numeric = finite_difference_gradient(scalar_f, t.data.copy(), h=h)
        denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
        worst = max(worst, float(np.max(np.abs(analytic - numeric) / denom)))
    return worst
