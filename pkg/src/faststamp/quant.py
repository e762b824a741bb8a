"""Signed Q-format fixed-point arithmetic and the integer encoder forward path.

A ``Qm.n`` number has m integer bits (sign included) and n fractional bits;
its raw two's-complement integer r stands for r / 2**n. Products and sums
are formed exactly in a wide accumulator (int64 when that provably cannot
overflow, Python ints otherwise) and brought back to the format once by a
round-half-away-from-zero shift followed by saturation.

The functions in the "layer" section operate on raw integer arrays and are
shared by :func:`fixed_encoder_forward` and the streaming simulator in
:mod:`faststamp.dataflow`, which is why both produce identical bytes.
"""
import json
import math
import re
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache

import numpy as np

from . import checkpoint, metrics
from .errors import ConfigError, ShapeError, ShapeMismatchError
from .kernels import dwconv_int, requantize, requantize_np
from .model import ModelConfig, _bits, _shapes

_QNAME = re.compile(r"^Q(\d+)\.(\d+)$")


@dataclass(frozen=True)
class FixedSpec:
    """Q-format with rounding/overflow policy and tanh LUT geometry."""
    int_bits: int = 6
    frac_bits: int = 10
    rounding: str = "half_away"   # or "floor"
    overflow: str = "saturate"    # or "wrap"
    lut_size: int = 1024
    lut_range: int = 4

    def __post_init__(self):
        if self.int_bits < 1 or self.frac_bits < 0:
            raise ConfigError("need int_bits >= 1 (sign bit) and frac_bits >= 0")
        if not 8 <= self.total_bits <= 32:
            raise ConfigError(f"total bits {self.total_bits} outside [8, 32]")
        if self.rounding not in ("half_away", "floor"):
            raise ConfigError(f"unknown rounding mode {self.rounding!r}")
        if self.overflow not in ("saturate", "wrap"):
            raise ConfigError(f"unknown overflow mode {self.overflow!r}")
        if self.lut_size < 2 or self.lut_size % 2 or self.lut_range <= 0:
            raise ConfigError("LUT needs an even size >= 2 and a positive range")

    @classmethod
    def parse(cls, text, **kw):
        m = _QNAME.match(text.strip())
        if not m:
            raise ConfigError(f"bad Q-format {text!r}; expected e.g. 'Q6.10'")
        return cls(int(m.group(1)), int(m.group(2)), **kw)

    @property
    def total_bits(self):
        return self.int_bits + self.frac_bits

    @property
    def name(self):
        return f"Q{self.int_bits}.{self.frac_bits}"

    @property
    def lo(self):
        return -(1 << (self.total_bits - 1))

    @property
    def hi(self):
        return (1 << (self.total_bits - 1)) - 1

    @property
    def scale(self):
        return 1 << self.frac_bits

    def __str__(self):
        return self.name


Q6_10 = FixedSpec(6, 10)


def acc_dtype(spec, n_terms):
    """int64 if a sum of ``n_terms`` products plus a bias cannot overflow it."""
    need = 2 * spec.total_bits + math.ceil(math.log2(max(n_terms, 1) + 1)) + 1
    return np.int64 if need <= 63 else object


def _overflow(q, spec):
    if spec.overflow == "saturate":
        return np.clip(q, spec.lo, spec.hi)
    span = 1 << spec.total_bits
    return (q - spec.lo) % span + spec.lo


def requant(acc, shift, spec):
    """Shift right by ``shift`` with the spec's rounding, then apply its overflow policy."""
    acc = np.asarray(acc)
    if spec.rounding == "half_away" and spec.overflow == "saturate":
        if acc.dtype == np.int64:
            return requantize(acc, shift, spec.lo, spec.hi)
        return requantize_np(acc, shift, spec.lo, spec.hi)
    q = acc >> shift if spec.rounding == "floor" else requantize_np(acc, shift, -(1 << 200), 1 << 200)
    return _overflow(q, spec).astype(acc.dtype)


class FixedTensor:
    """Raw integers plus the :class:`FixedSpec` they encode."""

    __slots__ = ("raw", "spec")

    def __init__(self, raw, spec):
        raw = np.asarray(raw)
        if raw.dtype != object:
            raw = raw.astype(np.int64)
        if raw.size and (raw.min() < spec.lo or raw.max() > spec.hi):
            raise ValueError(f"raw values outside the {spec.name} range")
        self.raw = raw
        self.spec = spec

    @property
    def shape(self):
        return self.raw.shape

    def dequantize(self):
        return dequantize(self)

    def __repr__(self):
        return f"FixedTensor({self.spec.name}, shape={self.shape})"


def _round_half_away(v):
    return np.sign(v) * np.floor(np.abs(v) + 0.5)


def quantize(v, spec=Q6_10):
    """Real -> fixed: clamp(round(v * 2**frac)) with half-away rounding."""
    v = np.asarray(v, dtype=np.float64)
    r = np.floor(v * spec.scale) if spec.rounding == "floor" else _round_half_away(v * spec.scale)
    r = _overflow(r, spec)  # still float here, so huge inputs cannot wrap in the cast
    return FixedTensor(r.astype(np.int64), spec)


def dequantize(f):
    return np.asarray(f.raw, dtype=np.float64) / f.spec.scale


def _same_spec(a, b):
    if a.spec != b.spec:
        raise ConfigError(f"format mismatch: {a.spec.name} vs {b.spec.name}")
    return a.spec


def fixed_mul(a, b, spec=None):
    spec = spec or _same_spec(a, b)
    dt = acc_dtype(spec, 1)
    prod = np.asarray(a.raw).astype(dt) * np.asarray(b.raw).astype(dt)
    return FixedTensor(requant(prod, spec.frac_bits, spec), spec)


def fixed_add(a, b, spec=None):
    spec = spec or _same_spec(a, b)
    s = np.asarray(a.raw).astype(np.int64) + np.asarray(b.raw).astype(np.int64)
    return FixedTensor(requant(s, 0, spec), spec)


def tree_reduce_mac(inputs, weights, spec=None, chunk=4, bias=None):
    """Dot product: per-chunk MACs, a binary tree over the partial sums, one requantize.

    Every intermediate is an exact integer, so the result does not depend
    on ``chunk`` or on the tree shape.
    """
    spec = spec or _same_spec(inputs, weights)
    a, w = np.asarray(inputs.raw).ravel(), np.asarray(weights.raw).ravel()
    if a.shape != w.shape:
        raise ShapeError(f"tree_reduce_mac: lengths {a.size} and {w.size} differ")
    if chunk < 1:
        raise ValueError("chunk must be >= 1")
    dt = acc_dtype(spec, a.size)
    prods = a.astype(dt) * w.astype(dt)
    partials = [prods[i:i + chunk].sum(dtype=dt) for i in range(0, a.size, chunk)] or [dt(0) if dt is np.int64 else 0]
    while len(partials) > 1:
        nxt = [partials[i] + partials[i + 1] for i in range(0, len(partials) - 1, 2)]
        if len(partials) % 2:
            nxt.append(partials[-1])
        partials = nxt
    acc = partials[0]
    if bias is not None:
        acc = acc + (int(np.asarray(bias.raw).item()) << spec.frac_bits)
    return FixedTensor(requant(np.array(acc, dtype=dt), spec.frac_bits, spec), spec)


# ------------------------------------------------------------ tanh LUT


@lru_cache(maxsize=None)
def _lut_geometry(spec):
    # raw inputs per table step as an exact fraction P/Q
    step = Fraction(2 * spec.lut_range, spec.lut_size) * spec.scale
    return step.numerator, step.denominator


def _lut_index(raw, spec):
    """sign(r) * ceil(|r|/step - 1/2): nearest entry, ties toward zero (keeps the table odd)."""
    p, q = _lut_geometry(spec)
    r = np.asarray(raw).astype(np.int64)
    mag = np.abs(r)
    k = -((p - 2 * mag * q) // (2 * p))
    return np.where(r < 0, -k, k)


@lru_cache(maxsize=None)
def tanh_table(spec=Q6_10):
    """(table, kmin): entry ``table[k - kmin]`` serves LUT index k.

    Entry k holds the quantized midrange of tanh over the representable
    inputs that round to k, which bounds the error by half the bin's tanh
    span plus half an output LSB. Index 0 is exactly 0, the table is odd,
    and the last negative slot mirrors the last positive one.
    """
    half = spec.lut_size // 2
    p, q = _lut_geometry(spec)
    pos = np.zeros(half, dtype=np.int64)
    for k in range(1, half):
        # raws r > 0 with k - 1/2 < r*q/p <= k + 1/2
        lo = math.floor(Fraction((2 * k - 1) * p, 2 * q)) + 1
        hi = math.floor(Fraction((2 * k + 1) * p, 2 * q))
        lo, hi = max(lo, 1), min(hi, spec.hi)
        if lo <= hi:
            v = 0.5 * (math.tanh(lo / spec.scale) + math.tanh(hi / spec.scale))
        else:
            v = math.tanh(float(Fraction(k * p, q)) / spec.scale)
        pos[k] = quantize(v, spec).raw
    table = np.concatenate([[-pos[half - 1]], -pos[:0:-1], pos])
    return table, -half


def tanh_lut(x, spec=None):
    """Table tanh of a :class:`FixedTensor` or raw int array (raw in, raw out)."""
    if isinstance(x, FixedTensor):
        return FixedTensor(tanh_lut(x.raw, x.spec), x.spec)
    spec = spec or Q6_10
    table, kmin = tanh_table(spec)
    k = _lut_index(x, spec).astype(np.int64)
    k = np.clip(k, kmin, kmin + len(table) - 1)
    return table[k - kmin]


# ------------------------------------------------------------ quantized parameters


@dataclass
class QuantParams:
    """Raw integer weights in a single Q-format.

    Batch-norm layers are stored as their inference affine form
    ``a = scale / sqrt(var + eps)``, ``b = shift - mean * a`` under the
    names ``<layer>.bn.a`` / ``<layer>.bn.b``.
    """
    spec: FixedSpec
    config: ModelConfig
    tensors: dict = field(default_factory=dict)

    def names(self):
        return list(self.tensors)


def _qnames(config):
    out = []
    for name, shape, kind, _ in _shapes(config):
        if not name.startswith("enc."):
            continue
        if name.endswith(".bn.scale"):
            out.append((name[: -len("scale")] + "a", shape))
        elif name.endswith(".bn.shift"):
            out.append((name[: -len("shift")] + "b", shape))
        elif kind == "param":
            out.append((name, shape))
    return out


def quantize_params(params, spec=Q6_10):
    """Direct rounding of the float encoder weights (no calibration)."""
    cfg = params.config
    q = {}
    for name, _ in _qnames(cfg):
        if name.endswith(".bn.a") or name.endswith(".bn.b"):
            base = name[:-2]
            scale = params.tensors[base + ".scale"].data.astype(np.float64)
            shift = params.tensors[base + ".shift"].data.astype(np.float64)
            mu = params.buffers[base + ".mean"].astype(np.float64)
            var = params.buffers[base + ".var"].astype(np.float64)
            a = scale / np.sqrt(var + cfg.bn_eps)
            q[name] = quantize(a if name.endswith(".a") else shift - mu * a, spec).raw
        else:
            q[name] = quantize(params.tensors[name].data, spec).raw
    return QuantParams(spec, cfg, q)


def save_qcheckpoint(qparams, path):
    records = [(n, "param", qparams.tensors[n]) for n, _ in _qnames(qparams.config)]
    meta = {"kind": "fixed", "qformat": qparams.spec.name, "model": qparams.config.to_dict(),
            "rounding": qparams.spec.rounding, "overflow": qparams.spec.overflow,
            "lut_size": qparams.spec.lut_size, "lut_range": qparams.spec.lut_range}
    checkpoint.write(path, records, meta, dtype="int32")


def load_qcheckpoint(path):
    meta, dtype, records = checkpoint.read(path)
    if dtype != "int32" or meta.get("kind") != "fixed":
        raise ShapeMismatchError("not a quantized checkpoint")
    try:
        spec = FixedSpec.parse(meta["qformat"], rounding=meta.get("rounding", "half_away"),
                               overflow=meta.get("overflow", "saturate"),
                               lut_size=meta.get("lut_size", 1024), lut_range=meta.get("lut_range", 4))
        cfg = ModelConfig.from_dict(meta["model"])
    except KeyError as e:
        raise checkpoint.ManifestError(f"quantized manifest lacks {e}") from e
    expected = dict(_qnames(cfg))
    got = {n: a for n, _, a in records}
    if expected.keys() != got.keys():
        raise ShapeMismatchError("quantized checkpoint tensors do not match the model configuration")
    for n, shape in expected.items():
        if got[n].shape != tuple(shape):
            raise ShapeMismatchError(f"{n}: shape {got[n].shape} vs {tuple(shape)}")
        if got[n].size and (got[n].min() < spec.lo or got[n].max() > spec.hi):
            raise ShapeMismatchError(f"{n}: raw values exceed {spec.name}")
    return QuantParams(spec, cfg, got)


# ------------------------------------------------------------ layers on raw ints


def input_from_u8(u8, spec):
    """8-bit pixel -> raw: round_half_away(u8 / 255 * 2**frac) computed exactly."""
    u = np.asarray(u8).astype(np.int64)
    return (u * (2 * spec.scale) + 255) // 510


def output_to_u8(y, spec):
    """Raw y in [-1, 1] -> round(255 * (y + 1) / 2) as uint8, half up, clipped."""
    y = np.asarray(y).astype(object if spec.frac_bits > 40 else np.int64)
    v = (510 * (y + spec.scale) + 2 * spec.scale) // (4 * spec.scale)
    return np.clip(v, 0, 255).astype(np.uint8)


def bits_to_raw(bits, spec):
    return np.asarray(bits).astype(np.int64) << spec.frac_bits


def linear_q(v, w, b, spec):
    """v: (..., n) raw; w: (m, n); b: (m,)."""
    dt = acc_dtype(spec, w.shape[1])
    acc = np.asarray(v).astype(dt) @ w.T.astype(dt) + (b.astype(dt) << spec.frac_bits)
    return requant(acc, spec.frac_bits, spec)


def pointwise_q(x, w, b, spec):
    """1x1 conv on (N, C, H, W) or a single pixel vector (C,)."""
    if x.ndim == 1:
        return linear_q(x, w, b, spec)
    return np.moveaxis(linear_q(np.moveaxis(x, 1, -1), w, b, spec), -1, 1)


def depthwise_q(x, k, stride, spec):
    dt = acc_dtype(spec, k.shape[1] * k.shape[2])
    acc = dwconv_int(np.ascontiguousarray(x.astype(dt)), np.ascontiguousarray(k.astype(dt)), stride)
    return requant(acc, spec.frac_bits, spec)


def depthwise_window_q(window, k, spec):
    """One output pixel from a (C, K, K) zero-padded input window."""
    dt = acc_dtype(spec, k.shape[1] * k.shape[2])
    acc = (window.astype(dt) * k.astype(dt)).sum(axis=(1, 2))
    return requant(acc, spec.frac_bits, spec)


def bn_q(x, a, b, spec):
    """Separate affine stage: requant(a * x + (b << frac))."""
    dt = acc_dtype(spec, 2)
    shape = (-1,) if x.ndim == 1 else (1, -1, 1, 1)
    acc = x.astype(dt) * a.astype(dt).reshape(shape) + (b.astype(dt).reshape(shape) << spec.frac_bits)
    return requant(acc, spec.frac_bits, spec)


def relu_q(x):
    return np.maximum(x, 0)


def upsample_q(x, factor):
    return x.repeat(factor, axis=-2).repeat(factor, axis=-1)


def secret_plane_q(q, bits):
    """(N, L) bits -> (N, 1, h, w) raw message plane."""
    cfg, spec = q.config, q.spec
    proj = linear_q(bits_to_raw(bits, spec), q.tensors["enc.msg.w"], q.tensors["enc.msg.b"], spec)
    grid = proj.reshape((-1, 1) + tuple(cfg.grid))
    return upsample_q(grid, cfg.upsample_factor)


def block_q(q, prefix, x, stride):
    spec = q.spec
    t = q.tensors
    y = depthwise_q(x, t[prefix + ".dw"], stride, spec)
    y = pointwise_q(y, t[prefix + ".pw"], t[prefix + ".pb"], spec)
    return relu_q(bn_q(y, t[prefix + ".bn.a"], t[prefix + ".bn.b"], spec))


def fixed_encoder_forward(x_u8, s, qparams):
    """Integer-only encoder: uint8 (N,3,h,w) or (3,h,w) + bits -> uint8 watermarked image(s)."""
    cfg, spec, t = qparams.config, qparams.spec, qparams.tensors
    x = np.asarray(x_u8)
    if x.dtype != np.uint8:
        raise ShapeError("fixed_encoder_forward expects uint8 pixels")
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4 or x.shape[1] != 3 or tuple(x.shape[2:]) != tuple(cfg.image_size):
        raise ShapeError(f"expected (N, 3, {cfg.image_size[0]}, {cfg.image_size[1]}), got {x.shape}")
    bits = np.atleast_2d(_bits(s))
    if bits.shape != (x.shape[0], cfg.message_length):
        raise ShapeError(f"need {x.shape[0]} messages of {cfg.message_length} bits, got {bits.shape}")
    h = np.concatenate([input_from_u8(x, spec), secret_plane_q(qparams, bits)], axis=1)
    skips = [h]
    for i, st in enumerate(cfg.enc_strides):
        h = block_q(qparams, f"enc.down{i}", h, st)
        skips.append(h)
    skips.pop()
    for j in range(len(cfg.enc_up)):
        h = upsample_q(h, cfg.enc_strides[len(cfg.enc_strides) - 1 - j])
        h = block_q(qparams, f"enc.up{j}", np.concatenate([h, skips.pop()], axis=1), 1)
    y = depthwise_q(h, t["enc.out.dw"], 1, spec)
    y = pointwise_q(y, t["enc.out.pw"], t["enc.out.pb"], spec)
    out = output_to_u8(tanh_lut(y, spec), spec)
    return out[0] if single else out


# ------------------------------------------------------------ bit-width sweep


DEFAULT_SWEEP = ("Q6.2", "Q6.4", "Q6.6", "Q6.8", "Q6.10", "Q6.12", "Q2.6")


def bitwidth_sweep(params, images_u8, messages, specs=DEFAULT_SWEEP, batch_size=16):
    """One row per spec: fixed encoder + float decoder on the eval set.

    Also returns a ``float`` reference row computed with the float encoder
    on the same 8-bit inputs.
    """
    from .model import decode, encode

    images_u8 = np.asarray(images_u8)
    if len(images_u8) == 0:
        raise ValueError("empty evaluation set")
    messages = np.asarray(messages)
    cover = images_u8.astype(np.float64) / 255.0

    def score(label, wm_u8):
        wm = wm_u8.astype(np.float64) / 255.0
        soft = np.concatenate([decode(wm[i:i + batch_size], params)
                               for i in range(0, len(wm), batch_size)])
        return {"spec": label,
                "bra": metrics.bra(messages, soft),
                "psnr": float(np.mean([min(metrics.psnr(a, b), metrics.PSNR_CAP) for a, b in zip(cover, wm)])),
                "ssim": float(np.mean([metrics.ssim(a, b) for a, b in zip(cover, wm)]))}

    from .transforms import to_uint8
    ref = np.concatenate([to_uint8(encode(cover[i:i + batch_size], messages[i:i + batch_size], params))
                          for i in range(0, len(cover), batch_size)])
    rows = [score("float", ref)]
    for sp in specs:
        spec = sp if isinstance(sp, FixedSpec) else FixedSpec.parse(sp)
        q = quantize_params(params, spec)
        wm = np.concatenate([fixed_encoder_forward(images_u8[i:i + batch_size], messages[i:i + batch_size], q)
                             for i in range(0, len(images_u8), batch_size)])
        row = score(spec.name, wm)
        row["total_bits"] = spec.total_bits
        rows.append(row)
    return rows


def sweep_records(rows):
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows)


def sweep_table(rows):
    lines = [f"{'format':>8} {'BRA %':>8} {'PSNR dB':>8} {'SSIM':>7}"]
    for r in rows:
        lines.append(f"{r['spec']:>8} {r['bra']:8.2f} {r['psnr']:8.2f} {r['ssim']:7.4f}")
    return "\n".join(lines)
