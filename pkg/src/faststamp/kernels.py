"""Hot inner loops: depthwise correlation (float and integer) in two flavours.

Every kernel has a pure-numpy version (``*_np``) and a loop version (``*_nb``)
that numba compiles. The public names point at the numba versions unless
numba is disabled (see :mod:`faststamp._jit`). Arrays are (N, C, H, W) and
kernels (C, K, K); padding is always "same", i.e. (K - 1) // 2 zeros.
"""
import numpy as np

from ._jit import HAVE_NUMBA, njit


def out_size(n, stride):
    return (n - 1) // stride + 1


# ---------------------------------------------------------------- numpy path


def _taps(xp, i, j, stride, ho, wo):
    return xp[:, :, i:i + stride * (ho - 1) + 1:stride, j:j + stride * (wo - 1) + 1:stride]


def dwconv_forward_np(x, k, stride):
    n, c, h, w = x.shape
    ks = k.shape[-1]
    p = (ks - 1) // 2
    ho, wo = out_size(h, stride), out_size(w, stride)
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    out = np.zeros((n, c, ho, wo), dtype=np.result_type(x, k))
    for i in range(ks):
        for j in range(ks):
            out += _taps(xp, i, j, stride, ho, wo) * k[None, :, i, j, None, None]
    return out


def dwconv_backward_input_np(gout, k, h, w, stride):
    n, c, ho, wo = gout.shape
    ks = k.shape[-1]
    p = (ks - 1) // 2
    gxp = np.zeros((n, c, h + 2 * p, w + 2 * p), dtype=np.result_type(gout, k))
    for i in range(ks):
        for j in range(ks):
            _taps(gxp, i, j, stride, ho, wo)[...] += gout * k[None, :, i, j, None, None]
    return gxp[:, :, p:p + h, p:p + w]


def dwconv_backward_kernel_np(x, gout, ks, stride):
    n, c, h, w = x.shape
    ho, wo = gout.shape[2:]
    p = (ks - 1) // 2
    xp = np.pad(x, ((0, 0), (0, 0), (p, p), (p, p)))
    gk = np.zeros((c, ks, ks), dtype=np.result_type(x, gout))
    for i in range(ks):
        for j in range(ks):
            gk[:, i, j] = np.einsum("nchw,nchw->c", _taps(xp, i, j, stride, ho, wo), gout)
    return gk


# ---------------------------------------------------------------- loop path


def _dwconv_forward_loops(x, k, stride):
    n, c, h, w = x.shape
    ks = k.shape[2]
    p = (ks - 1) // 2
    ho = (h - 1) // stride + 1
    wo = (w - 1) // stride + 1
    xp = np.zeros((h + 2 * p, w + 2 * p), dtype=x.dtype)
    out = np.zeros((n, c, ho, wo), dtype=x.dtype)
    for b in range(n):
        for ch in range(c):
            xp[p:p + h, p:p + w] = x[b, ch]
            o = out[b, ch]
            for i in range(ks):
                for j in range(ks):
                    kv = k[ch, i, j]
                    for oy in range(ho):
                        row = xp[oy * stride + i]
                        for ox in range(wo):
                            o[oy, ox] += kv * row[ox * stride + j]
    return out


def _dwconv_backward_input_loops(gout, k, h, w, stride):
    n, c, ho, wo = gout.shape
    ks = k.shape[2]
    p = (ks - 1) // 2
    gxp = np.zeros((h + 2 * p, w + 2 * p), dtype=gout.dtype)
    gx = np.empty((n, c, h, w), dtype=gout.dtype)
    for b in range(n):
        for ch in range(c):
            gxp[:, :] = 0
            g = gout[b, ch]
            for i in range(ks):
                for j in range(ks):
                    kv = k[ch, i, j]
                    for oy in range(ho):
                        row = gxp[oy * stride + i]
                        for ox in range(wo):
                            row[ox * stride + j] += kv * g[oy, ox]
            gx[b, ch] = gxp[p:p + h, p:p + w]
    return gx


def _dwconv_backward_kernel_loops(x, gout, ks, stride):
    n, c, h, w = x.shape
    ho, wo = gout.shape[2], gout.shape[3]
    p = (ks - 1) // 2
    xp = np.zeros((h + 2 * p, w + 2 * p), dtype=x.dtype)
    gk = np.zeros((c, ks, ks), dtype=gout.dtype)
    for b in range(n):
        for ch in range(c):
            xp[p:p + h, p:p + w] = x[b, ch]
            g = gout[b, ch]
            for i in range(ks):
                for j in range(ks):
                    acc = 0.0
                    for oy in range(ho):
                        row = xp[oy * stride + i]
                        for ox in range(wo):
                            acc += row[ox * stride + j] * g[oy, ox]
                    gk[ch, i, j] += acc
    return gk


def _dwconv_int_loops(x, k, stride):
    # int64 accumulation; caller guarantees no overflow
    n, c, h, w = x.shape
    ks = k.shape[2]
    p = (ks - 1) // 2
    ho = (h - 1) // stride + 1
    wo = (w - 1) // stride + 1
    out = np.zeros((n, c, ho, wo), dtype=np.int64)
    for b in range(n):
        for ch in range(c):
            for oy in range(ho):
                for ox in range(wo):
                    acc = 0
                    for i in range(ks):
                        iy = oy * stride + i - p
                        if iy < 0 or iy >= h:
                            continue
                        for j in range(ks):
                            ix = ox * stride + j - p
                            if ix < 0 or ix >= w:
                                continue
                            acc += x[b, ch, iy, ix] * k[ch, i, j]
                    out[b, ch, oy, ox] = acc
    return out


def _requantize_loops(acc, shift, lo, hi):
    # round-half-away-from-zero right shift, then saturate
    flat = acc.ravel()
    out = np.empty(flat.size, dtype=np.int64)
    half = (1 << (shift - 1)) if shift > 0 else 0
    for i in range(flat.size):
        a = flat[i]
        if shift > 0:
            if a >= 0:
                q = (a + half) >> shift
            else:
                q = -((-a + half) >> shift)
        else:
            q = a
        if q < lo:
            q = lo
        elif q > hi:
            q = hi
        out[i] = q
    return out.reshape(acc.shape)


def requantize_np(acc, shift, lo, hi):
    acc = np.asarray(acc)
    if shift > 0:
        half = 1 << (shift - 1)
        mag = (np.abs(acc) + half) >> shift
        q = np.where(acc < 0, -mag, mag)
    else:
        q = acc
    return np.clip(q, lo, hi).astype(acc.dtype)


dwconv_forward_nb = njit(cache=True, fastmath=True)(_dwconv_forward_loops)
dwconv_backward_input_nb = njit(cache=True, fastmath=True)(_dwconv_backward_input_loops)
dwconv_backward_kernel_nb = njit(cache=True, fastmath=True)(_dwconv_backward_kernel_loops)
dwconv_int_nb = njit(cache=True)(_dwconv_int_loops)
requantize_nb = njit(cache=True)(_requantize_loops)


def _contig(a):
    return np.ascontiguousarray(a)


if HAVE_NUMBA:

    def dwconv_forward(x, k, stride):
        k = k.astype(x.dtype, copy=False)
        return dwconv_forward_nb(_contig(x), _contig(k), stride)

    def dwconv_backward_input(gout, k, h, w, stride):
        k = k.astype(gout.dtype, copy=False)
        return dwconv_backward_input_nb(_contig(gout), _contig(k), h, w, stride)

    def dwconv_backward_kernel(x, gout, ks, stride):
        x = x.astype(gout.dtype, copy=False)
        return dwconv_backward_kernel_nb(_contig(x), _contig(gout), ks, stride)

else:
    dwconv_forward = dwconv_forward_np
    dwconv_backward_input = dwconv_backward_input_np
    dwconv_backward_kernel = dwconv_backward_kernel_np


def dwconv_int(x, k, stride):
    """Exact integer depthwise correlation (wide accumulator, no rounding).

    ``object`` arrays (arbitrary-precision ints) always take the numpy path.
    """
    if HAVE_NUMBA and x.dtype == np.int64 and k.dtype == np.int64:
        return dwconv_int_nb(_contig(x), _contig(k), stride)
    return dwconv_forward_np(x, k, stride)


def requantize(acc, shift, lo, hi):
    if HAVE_NUMBA and acc.dtype == np.int64:
        return requantize_nb(_contig(acc), shift, lo, hi)
    return requantize_np(acc, shift, lo, hi)
