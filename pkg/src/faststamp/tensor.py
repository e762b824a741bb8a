"""Dense tensors with a small reverse-mode tape.

Only the operators the watermarking networks, losses and differentiable
transforms need are provided. Image tensors are (C, H, W) or batched
(N, C, H, W); every image op accepts both.

Recording happens only while a :class:`GradTape` is active::

    with GradTape() as tape:
        loss = mean(relu(x))
    grads = backward(tape, loss)
"""
import threading

import numpy as np

from . import kernels
from .errors import ShapeError


class Tensor:
    __slots__ = ("data", "requires_grad", "name", "__weakref__")

    def __init__(self, data, requires_grad=False, name=None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind not in "fc":
            arr = arr.astype(np.float64)
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.name = name

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def __repr__(self):
        tag = f", name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    def __len__(self):
        return len(self.data)

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

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, key):
        return index(self, key)


class GradTape:
    """Ordered record of executed ops; not shareable between threads."""

    def __init__(self):
        self.records = []

    def __enter__(self):
        _stack().append(self)
        return self

    def __exit__(self, *exc):
        _stack().pop()
        return False

    def __len__(self):
        return len(self.records)


_local = threading.local()


def _stack():
    s = getattr(_local, "stack", None)
    if s is None:
        s = _local.stack = []
    return s


def _active():
    s = _stack()
    return s[-1] if s else None


def as_tensor(x, like=None):
    if isinstance(x, Tensor):
        return x
    dtype = like.data.dtype if isinstance(like, Tensor) else None
    return Tensor(np.asarray(x, dtype=dtype))


def _make(data, inputs, backward_fn):
    tape = _active()
    needs = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    if needs:
        tape.records.append((out, inputs, backward_fn))
    return out


def backward(tape, loss, wrt=None):
    """Gradients of the scalar ``loss`` w.r.t. leaf tensors.

    Returns a dict keyed by tensor. With ``wrt`` given, exactly those
    tensors are returned and unreached ones get zeros.
    """
    if loss.data.size != 1:
        raise ShapeError(f"loss must be scalar, got shape {loss.shape}")
    grads = {id(loss): np.ones_like(loss.data)}
    produced = set()
    leaves = {}
    for out, inputs, fn in reversed(tape.records):
        produced.add(id(out))
        g = grads.pop(id(out), None)
        if g is None:
            continue
        for t, gi in zip(inputs, fn(g)):
            if gi is None or not t.requires_grad:
                continue
            key = id(t)
            if key in grads:
                grads[key] = grads[key] + gi
            else:
                grads[key] = gi
                leaves.setdefault(key, t)
    if wrt is None:
        return {t: grads[k] for k, t in leaves.items() if k in grads and k not in produced}
    return {t: grads.get(id(t), np.zeros_like(t.data)) for t in wrt}


# ------------------------------------------------------------ elementwise


def _unbroadcast(g, shape):
    if g.shape == shape:
        return g
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for i, n in enumerate(shape):
        if n == 1 and g.shape[i] != 1:
            g = g.sum(axis=i, keepdims=True)
    return g


def add(a, b):
    a, b = as_tensor(a, b), as_tensor(b, a)
    sa, sb = a.shape, b.shape
    return _make(a.data + b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(g, sb)))


def sub(a, b):
    a, b = as_tensor(a, b), as_tensor(b, a)
    sa, sb = a.shape, b.shape
    return _make(a.data - b.data, (a, b),
                 lambda g: (_unbroadcast(g, sa), _unbroadcast(-g, sb)))


def mul(a, b):
    a, b = as_tensor(a, b), as_tensor(b, a)
    ad, bd = a.data, b.data
    return _make(ad * bd, (a, b),
                 lambda g: (_unbroadcast(g * bd, ad.shape), _unbroadcast(g * ad, bd.shape)))


def div(a, b):
    a, b = as_tensor(a, b), as_tensor(b, a)
    ad, bd = a.data, b.data
    out = ad / bd
    return _make(out, (a, b),
                 lambda g: (_unbroadcast(g / bd, ad.shape), _unbroadcast(-g * out / bd, bd.shape)))


def abs_(x):
    xd = x.data
    return _make(np.abs(xd), (x,), lambda g: (g * np.sign(xd),))


def square(x):
    xd = x.data
    return _make(xd * xd, (x,), lambda g: (2 * g * xd,))


def relu(x):
    xd = x.data
    return _make(np.maximum(xd, 0), (x,), lambda g: (g * (xd > 0),))


def tanh_act(x):
    y = np.tanh(x.data)
    return _make(y, (x,), lambda g: (g * (1 - y * y),))


def sigmoid(x):
    y = 0.5 * (np.tanh(0.5 * x.data) + 1)
    return _make(y, (x,), lambda g: (g * y * (1 - y),))


def clamp(x, lo=0.0, hi=1.0):
    xd = x.data
    inside = (xd >= lo) & (xd <= hi)
    return _make(np.clip(xd, lo, hi), (x,), lambda g: (g * inside,))


def minimum(x, c):
    """Elementwise min with a constant; gradient flows where ``x < c``."""
    xd = x.data
    return _make(np.minimum(xd, c), (x,), lambda g: (g * (xd < c),))


def round_ste(x):
    """Round forward, identity backward."""
    return _make(np.round(x.data), (x,), lambda g: (g,))


# ------------------------------------------------------------ reductions


def sum_(x, axis=None, keepdims=False):
    shape = x.shape

    def bwd(g):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape).copy(),)

    return _make(x.data.sum(axis=axis, keepdims=keepdims), (x,), bwd)


def mean(x, axis=None, keepdims=False):
    if axis is None:
        n = x.data.size
    else:
        axes = (axis,) if np.isscalar(axis) else axis
        n = int(np.prod([x.shape[a] for a in axes]))
    return mul(sum_(x, axis=axis, keepdims=keepdims), 1.0 / n)


# ------------------------------------------------------------ shape ops


def reshape(x, shape):
    old = x.shape
    return _make(x.data.reshape(shape), (x,), lambda g: (g.reshape(old),))


def index(x, key):
    shape, dtype = x.shape, x.dtype

    def bwd(g):
        gx = np.zeros(shape, dtype=dtype)
        np.add.at(gx, key, g)
        return (gx,)

    return _make(x.data[key], (x,), bwd)


def concat(tensors, axis=0):
    tensors = [as_tensor(t) for t in tensors]
    sizes = [t.shape[axis] for t in tensors]
    cuts = np.cumsum(sizes)[:-1]
    return _make(np.concatenate([t.data for t in tensors], axis=axis), tuple(tensors),
                 lambda g: tuple(np.split(g, cuts, axis=axis)))


def concat_channels(a, b):
    if a.ndim != b.ndim or a.shape[-2:] != b.shape[-2:] or a.shape[:-3] != b.shape[:-3]:
        raise ShapeError(f"cannot concat {a.shape} and {b.shape} along channels")
    return concat([a, b], axis=a.ndim - 3)


def split_channels(x, ca):
    ax = x.ndim - 3
    n = x.shape[ax]
    if not 0 < ca < n:
        raise ShapeError(f"split point {ca} outside (0, {n})")
    sl_a = [slice(None)] * x.ndim
    sl_b = [slice(None)] * x.ndim
    sl_a[ax] = slice(0, ca)
    sl_b[ax] = slice(ca, n)
    return index(x, tuple(sl_a)), index(x, tuple(sl_b))


# ------------------------------------------------------------ image ops


def _as4d(x):
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.ndim != 4:
        raise ShapeError(f"expected (C,H,W) or (N,C,H,W), got {x.shape}")
    return x, False


def _restore(y, squeezed):
    return reshape(y, y.shape[1:]) if squeezed else y


def conv2d_depthwise(x, kernels_, stride=1, padding=None):
    """Per-channel 2-D correlation with same-padding; output side ceil(n/stride)."""
    x, sq = _as4d(as_tensor(x))
    k = as_tensor(kernels_, x)
    c, h, w = x.shape[1:]
    if k.ndim != 3 or k.shape[0] != c or k.shape[1] != k.shape[2]:
        raise ShapeError(f"kernels {k.shape} do not match {c} input channels")
    ks = k.shape[1]
    if ks % 2 == 0:
        raise ShapeError("kernel size must be odd")
    if stride not in (1, 2):
        raise ShapeError("stride must be 1 or 2")
    if padding is not None and padding != (ks - 1) // 2:
        raise ShapeError("only same padding (K-1)/2 is supported")
    xd, kd = x.data, k.data.astype(x.dtype, copy=False)

    def bwd(g):
        gx = kernels.dwconv_backward_input(g, kd, h, w, stride) if x.requires_grad else None
        gk = kernels.dwconv_backward_kernel(xd, g, ks, stride) if k.requires_grad else None
        return gx, gk

    y = _make(kernels.dwconv_forward(xd, kd, stride), (x, k), bwd)
    return _restore(y, sq)


def conv2d_pointwise(x, weights, bias=None):
    """1x1 convolution: channel mixing at every pixel."""
    x, sq = _as4d(as_tensor(x))
    w = as_tensor(weights, x)
    n, cin, h, wd = x.shape
    if w.ndim != 2 or w.shape[1] != cin:
        raise ShapeError(f"weights {w.shape} do not match {cin} input channels")
    cout = w.shape[0]
    xf = x.data.reshape(n, cin, h * wd)
    wdat = w.data.astype(x.dtype, copy=False)
    out = np.matmul(wdat, xf)
    inputs = [x, w]
    if bias is not None:
        b = as_tensor(bias, x)
        if b.shape != (cout,):
            raise ShapeError(f"bias {b.shape} does not match {cout} outputs")
        out = out + b.data.astype(x.dtype, copy=False)[None, :, None]
        inputs.append(b)

    def bwd(g):
        gf = g.reshape(n, cout, h * wd)
        gx = np.matmul(wdat.T, gf).reshape(n, cin, h, wd) if x.requires_grad else None
        gw = np.matmul(gf, xf.transpose(0, 2, 1)).sum(axis=0) if w.requires_grad else None
        res = [gx, gw]
        if bias is not None:
            res.append(gf.sum(axis=(0, 2)))
        return tuple(res)

    y = _make(out.reshape(n, cout, h, wd), tuple(inputs), bwd)
    return _restore(y, sq)


def linear(x, weights, bias=None):
    x = as_tensor(x)
    w = as_tensor(weights, x)
    if w.ndim != 2 or x.shape[-1] != w.shape[1] or x.ndim not in (1, 2):
        raise ShapeError(f"linear: input {x.shape} vs weights {w.shape}")
    xd, wdat = x.data, w.data.astype(x.dtype, copy=False)
    out = xd @ wdat.T
    inputs = [x, w]
    if bias is not None:
        b = as_tensor(bias, x)
        if b.shape != (w.shape[0],):
            raise ShapeError(f"bias {b.shape} does not match {w.shape[0]} outputs")
        out = out + b.data
        inputs.append(b)

    def bwd(g):
        g2 = g.reshape(-1, g.shape[-1])
        x2 = xd.reshape(-1, xd.shape[-1])
        res = [g @ wdat, g2.T @ x2]
        if bias is not None:
            res.append(g2.sum(axis=0))
        return tuple(res)

    return _make(out, tuple(inputs), bwd)


def batchnorm(x, scale, shift, mean_, var, eps=1e-5, mode="infer", momentum=0.1):
    """Per-channel normalisation.

    ``mean_`` and ``var`` are plain arrays holding running statistics. In
    ``train`` mode the batch statistics over (N, H, W) are used and the
    running statistics are updated in place.
    """
    x, sq = _as4d(as_tensor(x))
    gamma, beta = as_tensor(scale, x), as_tensor(shift, x)
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,) or np.shape(mean_) != (c,) or np.shape(var) != (c,):
        raise ShapeError("batchnorm parameter shapes do not match channels")
    if eps <= 0:
        raise ValueError("eps must be positive")
    xd = x.data
    gd = gamma.data.astype(xd.dtype, copy=False)[None, :, None, None]
    bd = beta.data.astype(xd.dtype, copy=False)[None, :, None, None]
    if mode == "train":
        mu = xd.mean(axis=(0, 2, 3))
        centered = xd - mu[None, :, None, None]
        v = (centered * centered).mean(axis=(0, 2, 3))
        m = xd.size // c
        unbiased = v * (m / (m - 1)) if m > 1 else v
        mean_ *= 1 - momentum
        mean_ += momentum * mu
        var *= 1 - momentum
        var += momentum * unbiased
        inv = 1.0 / np.sqrt(v + eps)
        xhat = centered * inv[None, :, None, None]

        def bwd(g):
            gsum = g.sum(axis=(0, 2, 3))
            gxhat_sum = (g * xhat).sum(axis=(0, 2, 3))
            dxhat = g * gd
            dsum = dxhat.sum(axis=(0, 2, 3))[None, :, None, None]
            dxs = (dxhat * xhat).sum(axis=(0, 2, 3))[None, :, None, None]
            gx = (inv[None, :, None, None] / m) * (m * dxhat - dsum - xhat * dxs)
            return gx, gxhat_sum, gsum
    elif mode == "infer":
        if np.any(np.asarray(var) < 0):
            raise ValueError("batchnorm variance must be non-negative")
        inv = (1.0 / np.sqrt(np.asarray(var) + eps)).astype(xd.dtype)
        xhat = (xd - np.asarray(mean_, dtype=xd.dtype)[None, :, None, None]) * inv[None, :, None, None]

        def bwd(g):
            return (g * gd * inv[None, :, None, None], (g * xhat).sum(axis=(0, 2, 3)),
                    g.sum(axis=(0, 2, 3)))
    else:
        raise ValueError(f"unknown batchnorm mode {mode!r}")
    y = _make(gd * xhat + bd, (x, gamma, beta), bwd)
    return _restore(y, sq)


def upsample_nn_2d(x, factor):
    if int(factor) != factor or factor < 1:
        raise ValueError("upsample factor must be an integer >= 1")
    f = int(factor)
    x, sq = _as4d(as_tensor(x))
    if f == 1:
        return _restore(x, sq)
    n, c, h, w = x.shape
    up = np.broadcast_to(x.data[:, :, :, None, :, None], (n, c, h, f, w, f)).reshape(n, c, h * f, w * f)

    def bwd(g):
        return (g.reshape(n, c, h, f, w, f).sum(axis=(3, 5)),)

    return _restore(_make(up, (x,), bwd), sq)


def avg_pool_2d(x, factor):
    f = int(factor)
    x, sq = _as4d(as_tensor(x))
    n, c, h, w = x.shape
    if f < 1 or h % f or w % f:
        raise ShapeError(f"pool factor {factor} does not divide {h}x{w}")
    out = x.data.reshape(n, c, h // f, f, w // f, f).mean(axis=(3, 5))

    def bwd(g):
        gg = np.broadcast_to(g[:, :, :, None, :, None] / (f * f), (n, c, h // f, f, w // f, f))
        return (gg.reshape(n, c, h, w),)

    return _restore(_make(out, (x,), bwd), sq)


# ------------------------------------------------------------ 8x8 block DCT


def dct_matrix(n=8):
    """Orthonormal DCT-II matrix (rows are basis functions)."""
    k = np.arange(n)[:, None]
    i = np.arange(n)[None, :]
    m = np.cos(np.pi * (2 * i + 1) * k / (2 * n)) * np.sqrt(2.0 / n)
    m[0] /= np.sqrt(2.0)
    return m


_DCT8 = dct_matrix(8)


def _blocks(a):
    n, c, h, w = a.shape
    return a.reshape(n, c, h // 8, 8, w // 8, 8).transpose(0, 1, 2, 4, 3, 5)


def _unblocks(b):
    n, c, bh, bw = b.shape[:4]
    return b.transpose(0, 1, 2, 4, 3, 5).reshape(n, c, bh * 8, bw * 8)


def _block_transform(a, m):
    return _unblocks(m @ _blocks(a) @ m.T)


def block_dct(x, inverse=False):
    """2-D DCT of every 8x8 block; (N,C,H,W) with H, W multiples of 8."""
    x, sq = _as4d(as_tensor(x))
    if x.shape[2] % 8 or x.shape[3] % 8:
        raise ShapeError("block DCT needs dimensions that are multiples of 8")
    m = _DCT8.astype(x.dtype)
    fwd, inv = (m.T, m) if inverse else (m, m.T)
    y = _make(_block_transform(x.data, fwd), (x,), lambda g: (_block_transform(g, inv),))
    return _restore(y, sq)
