"""Image quality and watermark success metrics, plus analytic MAC counts."""
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import ShapeError

PSNR_CAP = 99.0
LUMA = np.array([0.299, 0.587, 0.114])


def psnr(x, y, peak=1.0):
    """PSNR in dB; ``inf`` for identical images (see :data:`PSNR_CAP` for reports)."""
    x, y = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if x.shape != y.shape:
        raise ShapeError(f"psnr: shapes {x.shape} and {y.shape} differ")
    mse = np.mean((x - y) ** 2)
    if mse == 0:
        return math.inf
    return 10.0 * math.log10(peak * peak / mse)


def _gauss_window(size=11, sigma=1.5):
    r = np.arange(size) - (size - 1) / 2
    g = np.exp(-(r * r) / (2 * sigma * sigma))
    return g / g.sum()


def _filter_valid(img, g):
    # separable 'valid' correlation along both spatial axes
    n = len(g)
    h, w = img.shape
    rows = sum(g[i] * img[i:h - n + 1 + i, :] for i in range(n))
    return sum(g[j] * rows[:, j:w - n + 1 + j] for j in range(n))


def to_luma(x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 2:
        return x
    if x.ndim == 3 and x.shape[0] == 3:
        return np.tensordot(LUMA, x, axes=(0, 0))
    if x.ndim == 3 and x.shape[0] == 1:
        return x[0]
    raise ShapeError(f"expected (3,H,W), (1,H,W) or (H,W), got {x.shape}")


def ssim(x, y, data_range=1.0, win_size=11, sigma=1.5, k1=0.01, k2=0.03):
    """Mean SSIM over all fully-contained Gaussian windows of the luma planes."""
    a, b = to_luma(x), to_luma(y)
    if a.shape != b.shape:
        raise ShapeError(f"ssim: shapes {a.shape} and {b.shape} differ")
    if min(a.shape) < win_size:
        raise ShapeError(f"image {a.shape} smaller than the {win_size}x{win_size} window")
    g = _gauss_window(win_size, sigma)
    mu_a, mu_b = _filter_valid(a, g), _filter_valid(b, g)
    saa = _filter_valid(a * a, g) - mu_a * mu_a
    sbb = _filter_valid(b * b, g) - mu_b * mu_b
    sab = _filter_valid(a * b, g) - mu_a * mu_b
    c1, c2 = (k1 * data_range) ** 2, (k2 * data_range) ** 2
    s = ((2 * mu_a * mu_b + c1) * (2 * sab + c2)) / ((mu_a ** 2 + mu_b ** 2 + c1) * (saa + sbb + c2))
    return float(s.mean())


def hard_bits(soft):
    return (np.asarray(soft) >= 0.5).astype(np.uint8)


def bra(s, s_hat):
    """Bit recovery accuracy in percent; ``s_hat`` may be soft bits."""
    s = np.asarray(getattr(s, "bits", s))
    s_hat = np.asarray(getattr(s_hat, "bits", s_hat))
    if s.shape != s_hat.shape:
        raise ShapeError(f"bra: lengths {s.shape} and {s_hat.shape} differ")
    if s.size == 0:
        raise ShapeError("bra: empty bit strings")
    return 100.0 * float(np.mean(hard_bits(s) == hard_bits(s_hat)))


def bpp(L, H, W, C):
    if min(L, H, W, C) <= 0:
        raise ValueError("bpp arguments must be positive")
    return L / (H * W * C)


@dataclass
class MetricsReport:
    psnr: float
    ssim: float
    bra: float
    bpp: float
    macs: dict = field(default_factory=dict)
    label: str = ""

    def __post_init__(self):
        if not -1.0 <= self.ssim <= 1.0:
            raise ValueError("ssim outside [-1, 1]")
        if not 0.0 <= self.bra <= 100.0:
            raise ValueError("bra outside [0, 100]")
        if self.bpp <= 0:
            raise ValueError("bpp must be positive")

    def to_record(self):
        d = asdict(self)
        d["psnr"] = min(self.psnr, PSNR_CAP)
        return d

    @classmethod
    def from_record(cls, rec):
        return cls(**{k: rec[k] for k in ("psnr", "ssim", "bra", "bpp", "macs", "label") if k in rec})


# ------------------------------------------------------------ MAC counts


def sepconv_macs(cin, cout, h_out, w_out, k):
    """(depthwise, pointwise) MACs of one separable conv."""
    return cin * k * k * h_out * w_out, cin * cout * h_out * w_out


def full_conv_macs(cin, cout, h_out, w_out, k):
    return cin * cout * k * k * h_out * w_out


def mac_count(config, part="encoder"):
    """Per-layer {name: {"depthwise", "pointwise", "full_equivalent"}} and the total."""
    k = config.kernel_size
    if part == "encoder":
        cin, down, strides, up, tag, out_c = 4, config.enc_down, config.enc_strides, config.enc_up, "enc", 3
    else:
        cin, down, strides, up, tag, out_c = 3, config.dec_down, config.dec_strides, config.dec_up, "dec", 1
    sizes = config.stage_sizes(part)
    layers = {}

    def add(name, ci, co, hw, extra=None):
        dw, pw = sepconv_macs(ci, co, hw[0], hw[1], k)
        layers[name] = {"depthwise": dw, "pointwise": pw,
                        "full_equivalent": full_conv_macs(ci, co, hw[0], hw[1], k)}
        if extra:
            layers[name].update(extra)

    if part == "encoder":
        gh, gw = config.grid
        n = gh * gw * config.message_length
        layers["enc.msg"] = {"linear": n}
    chans = [cin] + list(down)
    for i, c in enumerate(down):
        add(f"{tag}.down{i}", chans[i], c, sizes[i + 1])
    prev = down[-1]
    for j, c in enumerate(up):
        lvl = len(down) - 1 - j
        add(f"{tag}.up{j}", prev + chans[lvl], c, sizes[lvl])
        prev = c
    add(f"{tag}.{'out' if part == 'encoder' else 'head'}", prev, out_c, sizes[0])
    if part == "decoder":
        gh, gw = config.grid
        layers["dec.msg"] = {"linear": gh * gw * config.message_length}
    total = sum(v.get("depthwise", 0) + v.get("pointwise", 0) + v.get("linear", 0) for v in layers.values())
    return layers, total
