"""Benign and malicious image transforms.

The differentiable ones are built from tensor ops so gradients reach the
encoder during training; :func:`jpeg_roundtrip` is the real codec (Pillow's
libjpeg) used for evaluation only. Images are (3, H, W) or (N, 3, H, W) in
[0, 1].
"""
import io
import math
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .errors import ConfigError, ShapeError
from .tensor import (
    Tensor, add, as_tensor, block_dct, clamp, conv2d_depthwise, conv2d_pointwise, div, mean,
    mul, reshape, round_ste,
)

# ITU-T T.81 Annex K tables
LUMA_QTABLE = np.array([
    16, 11, 10, 16, 24, 40, 51, 61,
    12, 12, 14, 19, 26, 58, 60, 55,
    14, 13, 16, 24, 40, 57, 69, 56,
    14, 17, 22, 29, 51, 87, 80, 62,
    18, 22, 37, 56, 68, 109, 103, 77,
    24, 35, 55, 64, 81, 104, 113, 92,
    49, 64, 78, 87, 103, 121, 120, 101,
    72, 92, 95, 98, 112, 100, 103, 99]).reshape(8, 8)
CHROMA_QTABLE = np.array([
    17, 18, 24, 47, 99, 99, 99, 99,
    18, 21, 26, 66, 99, 99, 99, 99,
    24, 26, 56, 99, 99, 99, 99, 99,
    47, 66, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99,
    99, 99, 99, 99, 99, 99, 99, 99]).reshape(8, 8)

RGB_TO_YCC = np.array([[0.299, 0.587, 0.114],
                       [-0.168736, -0.331264, 0.5],
                       [0.5, -0.418688, -0.081312]])
YCC_TO_RGB = np.linalg.inv(RGB_TO_YCC)
LUMA = RGB_TO_YCC[0]


def _check_quality(quality):
    if not 1 <= quality <= 100:
        raise ValueError(f"JPEG quality {quality} outside [1, 100]")


def quality_tables(quality):
    """libjpeg quality scaling of the standard tables."""
    _check_quality(quality)
    q = int(quality)
    scale = 5000 // q if q < 50 else 200 - 2 * q
    out = []
    for base in (LUMA_QTABLE, CHROMA_QTABLE):
        out.append(np.clip((base * scale + 50) // 100, 1, 255))
    return out


def _batched(x):
    x = as_tensor(x)
    if x.ndim == 3:
        return reshape(x, (1,) + x.shape), True
    if x.ndim != 4 or x.shape[1] != 3:
        raise ShapeError(f"expected an RGB image tensor, got {x.shape}")
    return x, False


def _unbatch(y, single):
    return reshape(y, y.shape[1:]) if single else y


def jpeg_approx_diff(x, quality, rounding="ste"):
    """Differentiable JPEG (4:4:4): YCbCr, 8x8 DCT, quantise, round, back.

    ``rounding="ste"`` rounds forward with identity gradient; ``"none"`` drops
    the rounding (the surrogate whose gradient the straight-through path uses).
    """
    x, single = _batched(x)
    if x.shape[2] % 8 or x.shape[3] % 8:
        raise ShapeError("JPEG needs height and width that are multiples of 8")
    dt = x.dtype
    lq, cq = quality_tables(quality)
    h, w = x.shape[2:]
    qmap = np.stack([np.tile(lq, (h // 8, w // 8))] + [np.tile(cq, (h // 8, w // 8))] * 2).astype(dt)
    ycc = conv2d_pointwise(mul(x, 255.0), (RGB_TO_YCC).astype(dt), np.array([-128.0, 0, 0], dtype=dt))
    z = div(block_dct(ycc), qmap)
    if rounding == "ste":
        z = round_ste(z)
    elif rounding != "none":
        raise ValueError(f"unknown rounding {rounding!r}")
    ycc2 = block_dct(mul(z, qmap), inverse=True)
    rgb = conv2d_pointwise(ycc2, YCC_TO_RGB.astype(dt), (YCC_TO_RGB @ np.array([128.0, 0, 0])).astype(dt))
    return _unbatch(clamp(mul(rgb, 1.0 / 255.0), 0.0, 1.0), single)


def to_uint8(x):
    return np.clip(np.round(np.asarray(x, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def jpeg_roundtrip(x, quality, subsampling="4:4:4"):
    """Real baseline JPEG encode/decode of a float image array (not differentiable)."""
    _check_quality(quality)
    a = np.asarray(x.data if isinstance(x, Tensor) else x)
    single = a.ndim == 3
    if single:
        a = a[None]
    if a.ndim != 4 or a.shape[1] != 3:
        raise ShapeError(f"expected an RGB image, got {a.shape}")
    if a.shape[2] % 8 or a.shape[3] % 8:
        raise ShapeError("JPEG needs height and width that are multiples of 8")
    sub_code = {"4:4:4": 0, "4:2:2": 1, "4:2:0": 2}[subsampling]
    out = np.empty(a.shape, dtype=np.float64)
    for i, img in enumerate(a):
        buf = io.BytesIO()
        Image.fromarray(to_uint8(img).transpose(1, 2, 0), "RGB").save(
            buf, format="JPEG", quality=int(quality), subsampling=sub_code)
        buf.seek(0)
        out[i] = np.asarray(Image.open(buf).convert("RGB"), dtype=np.float64).transpose(2, 0, 1) / 255.0
    out = out.astype(a.dtype if a.dtype.kind == "f" else np.float64)
    return out[0] if single else out


def gaussian_kernel(sigma, ksize):
    if ksize < 1 or ksize % 2 == 0:
        raise ValueError("ksize must be a positive odd integer")
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    r = np.arange(ksize) - (ksize - 1) / 2
    if sigma == 0:
        g = (r == 0).astype(np.float64)
    else:
        g = np.exp(-(r * r) / (2.0 * sigma * sigma))
    g /= g.sum()
    return np.outer(g, g)


def gaussian_blur(x, sigma, ksize=5):
    """Gaussian blur; borders renormalised so constants are preserved."""
    x, single = _batched(x)
    k2 = gaussian_kernel(sigma, ksize)
    if k2[(ksize - 1) // 2, (ksize - 1) // 2] == 1.0:
        return _unbatch(x, single)
    dt = x.dtype
    kern = np.broadcast_to(k2, (3, ksize, ksize)).astype(dt)
    ones = np.ones((1, 3) + x.shape[2:], dtype=dt)
    norm = conv2d_depthwise(Tensor(ones), kern).data
    return _unbatch(div(conv2d_depthwise(x, kern), norm), single)


def color_matrix(saturation=1.0, hue=0.0):
    """3x3 RGB mix: saturation about luma, then hue rotation (degrees)."""
    sat = saturation * np.eye(3) + (1 - saturation) * np.outer(np.ones(3), LUMA)
    if hue == 0:
        return sat
    a, b = math.cos(math.radians(hue)), math.sin(math.radians(hue))
    rot = np.array([
        [0.213 + a * 0.787 - b * 0.213, 0.715 - a * 0.715 - b * 0.715, 0.072 - a * 0.072 + b * 0.928],
        [0.213 - a * 0.213 + b * 0.143, 0.715 + a * 0.285 + b * 0.140, 0.072 - a * 0.072 - b * 0.283],
        [0.213 - a * 0.213 - b * 0.787, 0.715 - a * 0.715 + b * 0.715, 0.072 + a * 0.928 + b * 0.072]])
    return rot @ sat


COLOR_LIMITS = {"brightness": (-0.5, 0.5), "contrast": (0.0, 3.0),
                "saturation": (0.0, 3.0), "hue": (-180.0, 180.0)}


def color_contrast(x, brightness=0.0, contrast=1.0, saturation=1.0, hue=0.0):
    """Contrast about mid-grey, brightness offset, saturation and hue, then clamp."""
    for name, v in (("brightness", brightness), ("contrast", contrast),
                    ("saturation", saturation), ("hue", hue)):
        lo, hi = COLOR_LIMITS[name]
        if not lo <= v <= hi:
            raise ValueError(f"{name}={v} outside [{lo}, {hi}]")
    x, single = _batched(x)
    if brightness == 0 and contrast == 1 and saturation == 1 and hue == 0:
        return _unbatch(x, single)
    dt = x.dtype
    m = (contrast * color_matrix(saturation, hue)).astype(dt)
    bias = np.full(3, 0.5 - 0.5 * contrast + brightness, dtype=dt)
    return _unbatch(clamp(conv2d_pointwise(x, m, bias), 0.0, 1.0), single)


FILTER_PRESETS = {
    "warm": [("color", dict(brightness=0.03, contrast=1.05, saturation=1.15, hue=-6.0))],
    "high_contrast": [("color", dict(brightness=-0.02, contrast=1.3, saturation=1.1))],
    "desaturate": [("color", dict(brightness=0.02, contrast=0.92, saturation=0.35)),
                   ("blur", dict(sigma=0.5, ksize=3))],
}


def filter_preset(x, name):
    """Named stand-ins for social-media photo filters."""
    try:
        steps = FILTER_PRESETS[name]
    except KeyError:
        raise ValueError(f"unknown filter preset {name!r}; choose from {sorted(FILTER_PRESETS)}") from None
    for op, kw in steps:
        x = color_contrast(x, **kw) if op == "color" else gaussian_blur(x, **kw)
    return x


def sample_rectangle(h, w, area_fraction, rng, tries=50):
    """(top, left, height, width) of a random rectangle covering ~area_fraction."""
    if not 0 < area_fraction <= 1:
        raise ValueError("area fraction must lie in (0, 1]")
    target = int(round(area_fraction * h * w))
    if target == 0:
        return 0, 0, 0, 0
    tol = max(1, int(0.05 * target))
    ratios = [math.exp(rng.uniform(math.log(0.5), math.log(2.0))) for _ in range(tries)] + [1.0]
    for r in ratios:
        rh = min(h, max(1, int(round(math.sqrt(target * r)))))
        rw = min(w, max(1, int(round(target / rh))))
        if abs(rh * rw - target) <= tol:
            top = int(rng.integers(0, h - rh + 1))
            left = int(rng.integers(0, w - rw + 1))
            return top, left, rh, rw
    raise ValueError(f"cannot place a rectangle of area {target} in {h}x{w}")


def local_tamper(x, area_fraction, fill="mean", rng=None, other=None):
    """Replace a random rectangle per image; returns (tensor, mask (N,1,H,W)).

    ``fill`` is ``"mean"`` (per-image mean colour), ``"blur"`` (heavily
    blurred content) or ``"other"`` (same region of ``other``; defaults to
    the batch rolled by one).
    """
    rng = rng if rng is not None else np.random.default_rng()
    x, single = _batched(x)
    n, _, h, w = x.shape
    mask = np.zeros((n, 1, h, w), dtype=x.dtype)
    for i in range(n):
        top, left, rh, rw = sample_rectangle(h, w, area_fraction, rng)
        mask[i, 0, top:top + rh, left:left + rw] = 1
    if fill == "mean":
        src = mean(x, axis=(2, 3), keepdims=True)
    elif fill == "blur":
        src = gaussian_blur(x, sigma=4.0, ksize=15)
    elif fill == "other":
        if other is None:
            src = Tensor(np.roll(x.data, 1, axis=0))
        else:
            src, _ = _batched(other)
            if src.shape != x.shape:
                raise ShapeError("tamper source must match the image shape")
    else:
        raise ValueError(f"unknown fill mode {fill!r}")
    out = add(mul(x, 1.0 - mask), mul(src, mask))
    return _unbatch(out, single), (mask[0] if single else mask)


# ------------------------------------------------------------ distributions

KINDS = ("identity", "jpeg_approx", "jpeg_roundtrip", "gaussian_blur", "color_contrast",
         "filter_preset", "local_tamper")


@dataclass(frozen=True)
class Transform:
    """A concrete transform with all parameters fixed."""
    kind: str
    params: dict = field(default_factory=dict)

    def __call__(self, x, rng=None, other=None):
        """Apply to a Tensor (differentiable) or an ndarray (returns an ndarray)."""
        out = self._apply(x, rng, other)
        if not isinstance(x, Tensor) and isinstance(out, Tensor):
            return out.data
        return out

    def _apply(self, x, rng, other):
        p = self.params
        if self.kind == "identity":
            return x
        if self.kind == "jpeg_approx":
            return jpeg_approx_diff(x, p.get("quality", 75))
        if self.kind == "jpeg_roundtrip":
            out = jpeg_roundtrip(x, p.get("quality", 75), p.get("subsampling", "4:4:4"))
            return Tensor(out) if isinstance(x, Tensor) else out
        if self.kind == "gaussian_blur":
            return gaussian_blur(x, p.get("sigma", 1.0), p.get("ksize", 5))
        if self.kind == "color_contrast":
            return color_contrast(x, **p)
        if self.kind == "filter_preset":
            return filter_preset(x, p["name"])
        if self.kind == "local_tamper":
            return local_tamper(x, p.get("area", 0.25), p.get("fill", "mean"), rng, other)[0]
        raise ConfigError(f"unknown transform kind {self.kind!r}")

    def describe(self):
        inner = ",".join(f"{k}={v}" for k, v in sorted(self.params.items()))
        return f"{self.kind}({inner})"


@dataclass(frozen=True)
class TransformSpec:
    """One entry of a transform distribution.

    Parameter values are fixed scalars/strings or ``[lo, hi]`` ranges drawn
    uniformly (integers when both ends are ints).
    """
    kind: str
    weight: float = 1.0
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown transform kind {self.kind!r}")
        if not self.weight > 0:
            raise ConfigError("transform weights must be positive")
        q = self.params.get("quality")
        if q is not None:
            for v in (q if isinstance(q, (list, tuple)) else [q]):
                if not 1 <= v <= 100:
                    raise ConfigError("quality must lie in [1, 100]")
        a = self.params.get("area")
        if a is not None:
            for v in (a if isinstance(a, (list, tuple)) else [a]):
                if not 0 < v <= 1:
                    raise ConfigError("tamper area fraction must lie in (0, 1]")

    @classmethod
    def from_dict(cls, d):
        extra = set(d) - {"kind", "weight", "params"}
        if extra:
            raise ConfigError(f"unknown transform keys: {sorted(extra)}")
        return cls(d["kind"], float(d.get("weight", 1.0)), dict(d.get("params", {})))

    def to_dict(self):
        return {"kind": self.kind, "weight": self.weight, "params": dict(self.params)}


def _draw(value, rng):
    if isinstance(value, (list, tuple)) and len(value) == 2 and all(
            isinstance(v, (int, float)) and not isinstance(v, bool) for v in value):
        lo, hi = value
        if isinstance(lo, int) and isinstance(hi, int):
            return int(rng.integers(lo, hi + 1))
        return float(rng.uniform(lo, hi))
    return value


def sample_transform(dist, rng):
    """Draw a concrete :class:`Transform` from a list of :class:`TransformSpec`."""
    if not dist:
        raise ConfigError("empty transform distribution")
    w = np.array([s.weight for s in dist], dtype=np.float64)
    spec = dist[int(rng.choice(len(dist), p=w / w.sum()))]
    params = {k: _draw(v, rng) for k, v in sorted(spec.params.items())}
    if spec.kind == "gaussian_blur" and "ksize" in params and params["ksize"] % 2 == 0:
        params["ksize"] += 1
    return Transform(spec.kind, params)


def default_benign():
    """Training-time benign bank (strength ranges are our choice)."""
    return [
        TransformSpec("identity", 1.0),
        TransformSpec("jpeg_approx", 2.0, {"quality": [50, 95]}),
        TransformSpec("gaussian_blur", 1.0, {"sigma": [0.3, 1.0], "ksize": 5}),
        TransformSpec("color_contrast", 1.0, {"brightness": [-0.1, 0.1], "contrast": [0.8, 1.2],
                                              "saturation": [0.7, 1.3], "hue": [-10.0, 10.0]}),
    ]


def default_malicious():
    return [TransformSpec("local_tamper", 1.0, {"area": [0.05, 0.25], "fill": "other"})]
