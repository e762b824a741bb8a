"""Encoder/decoder networks built from separable-convolution U-Nets.

Encoder: the message goes through a small linear projection onto a coarse
grid, is nearest-neighbour upsampled to image size and attached as a fourth
channel. The 4-channel tensor runs through strided separable-conv blocks
(conv, batch-norm, ReLU) and mirrored upsampling blocks with skip
connections; a final separable conv, tanh and an affine rescale give an RGB
image in [0, 1].

Decoder: a deeper U-Net with a single-channel head, average-pooled back to
the coarse grid and mapped to L soft bits by a linear layer and a sigmoid.
"""
from dataclasses import asdict, dataclass, fields

import numpy as np

from . import checkpoint
from .errors import ConfigError, ShapeError, ShapeMismatchError
from .tensor import (
    Tensor, avg_pool_2d, batchnorm, concat_channels, conv2d_depthwise, conv2d_pointwise,
    linear, mul, add, relu, reshape, sigmoid, tanh_act, upsample_nn_2d,
)


@dataclass(frozen=True)
class ModelConfig:
    image_size: tuple = (128, 128)
    message_length: int = 128
    grid: tuple = (16, 16)
    kernel_size: int = 3
    enc_down: tuple = (8, 16, 32, 64, 64)
    enc_strides: tuple = (2, 2, 2, 2, 2)
    enc_up: tuple = (32, 16, 8, 8, 8)
    dec_down: tuple = (8, 16, 32, 64, 64, 64, 64, 64)
    dec_strides: tuple = (2, 2, 2, 2, 2, 1, 1, 1)
    dec_up: tuple = (64, 64, 64, 32, 16, 8, 8, 8)
    bn_eps: float = 1e-5
    bn_momentum: float = 0.1

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if isinstance(v, list):
                object.__setattr__(self, f.name, tuple(v))
        self.validate()

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown model config keys: {sorted(extra)}")
        return cls(**d)

    def to_dict(self):
        return {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self).items()}

    @property
    def upsample_factor(self):
        return self.image_size[0] // self.grid[0]

    def validate(self):
        h, w = self.image_size
        gh, gw = self.grid
        if h % gh or w % gw:
            raise ConfigError("image size must be an integer multiple of the projection grid")
        if h // gh != w // gw:
            raise ConfigError("upsample factor must be the same along both axes")
        if self.message_length < 1:
            raise ConfigError("message length must be positive")
        if self.kernel_size % 2 == 0:
            raise ConfigError("kernel size must be odd")
        for down, strides, up, tag in ((self.enc_down, self.enc_strides, self.enc_up, "encoder"),
                                       (self.dec_down, self.dec_strides, self.dec_up, "decoder")):
            if not down or len(down) != len(strides) or len(down) != len(up):
                raise ConfigError(f"{tag}: down, strides and up schedules must have equal length")
            if any(s not in (1, 2) for s in strides):
                raise ConfigError(f"{tag}: strides must be 1 or 2")
            for a, b in zip(down, down[1:]):
                if b != min(2 * a, max(down)):
                    raise ConfigError(f"{tag}: channel schedule must double until its maximum")
            sizes = _spatial_sizes(self.image_size, strides)
            for (sh, sw), s, nxt in zip(sizes, strides, sizes[1:]):
                if s == 2 and (sh % 2 or sw % 2):
                    raise ConfigError(f"{tag}: {sh}x{sw} cannot be halved and mirrored exactly")

    def stage_sizes(self, part="encoder"):
        strides = self.enc_strides if part == "encoder" else self.dec_strides
        return _spatial_sizes(self.image_size, strides)


def _spatial_sizes(size, strides):
    out = [tuple(size)]
    for s in strides:
        h, w = out[-1]
        out.append(((h - 1) // s + 1, (w - 1) // s + 1))
    return out


TOY_CONFIG = ModelConfig(image_size=(64, 64), message_length=16, grid=(16, 16))


class BitMessage:
    """A fixed-length bit string; hex form is big-endian, ceil(L/4) digits."""

    def __init__(self, bits):
        b = np.asarray(bits)
        if b.ndim != 1 or not np.all((b == 0) | (b == 1)):
            raise ValueError("message bits must be a 1-D array of 0/1")
        self.bits = b.astype(np.uint8)

    def __len__(self):
        return len(self.bits)

    def __eq__(self, other):
        return isinstance(other, BitMessage) and np.array_equal(self.bits, other.bits)

    def __repr__(self):
        return f"BitMessage({self.to_hex()}, L={len(self)})"

    @classmethod
    def random(cls, length, rng):
        return cls(rng.integers(0, 2, size=length))

    @classmethod
    def from_hex(cls, text, length):
        digits = (length + 3) // 4
        t = text.strip().lower()
        if t.startswith("0x"):
            t = t[2:]
        if len(t) != digits or any(ch not in "0123456789abcdef" for ch in t):
            raise ValueError(f"message must be exactly {digits} hex digits")
        value = int(t, 16)
        if value >> length:
            raise ValueError(f"message does not fit in {length} bits")
        return cls([(value >> (length - 1 - i)) & 1 for i in range(length)])

    def to_hex(self):
        value = 0
        for b in self.bits:
            value = (value << 1) | int(b)
        return format(value, "0{}x".format((len(self.bits) + 3) // 4))


def _bits(s):
    return s.bits if isinstance(s, BitMessage) else np.asarray(s)


class ModelParams:
    """Named learnable tensors plus batch-norm running statistics."""

    def __init__(self, config, tensors, buffers):
        self.config = config
        self.tensors = tensors
        self.buffers = buffers

    def __getitem__(self, name):
        return self.tensors[name]

    def names(self, part=None):
        prefix = {"encoder": "enc.", "decoder": "dec.", None: ""}[part]
        return [n for n in self.tensors if n.startswith(prefix)]

    def subset(self, part):
        return {n: self.tensors[n] for n in self.names(part)}

    @property
    def dtype(self):
        return next(iter(self.tensors.values())).dtype

    def copy(self):
        return ModelParams(self.config,
                           {n: Tensor(t.data.copy(), requires_grad=t.requires_grad, name=n)
                            for n, t in self.tensors.items()},
                           {n: b.copy() for n, b in self.buffers.items()})

    def astype(self, dtype):
        p = self.copy()
        for t in p.tensors.values():
            t.data = t.data.astype(dtype)
        for n in p.buffers:
            p.buffers[n] = p.buffers[n].astype(dtype)
        return p


def _shapes(config):
    """Ordered (name, shape, kind, fan_in) of every tensor."""
    k = config.kernel_size
    gh, gw = config.grid
    L = config.message_length
    out = []

    def sep(prefix, cin, cout, bn=True):
        out.append((f"{prefix}.dw", (cin, k, k), "param", k * k))
        out.append((f"{prefix}.pw", (cout, cin), "param", cin))
        out.append((f"{prefix}.pb", (cout,), "param", cin))
        if bn:
            out.append((f"{prefix}.bn.scale", (cout,), "param", None))
            out.append((f"{prefix}.bn.shift", (cout,), "param", None))
            out.append((f"{prefix}.bn.mean", (cout,), "buffer", None))
            out.append((f"{prefix}.bn.var", (cout,), "buffer", None))

    def unet(tag, cin, down, up):
        chans = [cin] + list(down)
        for i, c in enumerate(down):
            sep(f"{tag}.down{i}", chans[i], c)
        prev = down[-1]
        for j, c in enumerate(up):
            skip = chans[len(down) - 1 - j]
            sep(f"{tag}.up{j}", prev + skip, c)
            prev = c
        return prev

    out.append(("enc.msg.w", (gh * gw, L), "param", L))
    out.append(("enc.msg.b", (gh * gw,), "param", L))
    last = unet("enc", 4, config.enc_down, config.enc_up)
    sep("enc.out", last, 3, bn=False)
    last = unet("dec", 3, config.dec_down, config.dec_up)
    sep("dec.head", last, 1, bn=False)
    out.append(("dec.msg.w", (L, gh * gw), "param", gh * gw))
    out.append(("dec.msg.b", (L,), "param", gh * gw))
    return out


def init_params(seed, config=None, dtype=np.float32):
    """Deterministic init: U(-1/sqrt(fan_in), 1/sqrt(fan_in)) weights, BN scale 1 shift 0."""
    config = config or ModelConfig()
    rng = np.random.default_rng(seed)
    tensors, buffers = {}, {}
    for name, shape, kind, fan_in in _shapes(config):
        if name.endswith(".bn.scale") or name.endswith(".bn.var"):
            arr = np.ones(shape)
        elif name.endswith(".bn.shift") or name.endswith(".bn.mean"):
            arr = np.zeros(shape)
        else:
            bound = 1.0 / np.sqrt(fan_in)
            arr = rng.uniform(-bound, bound, size=shape)
        arr = arr.astype(dtype)
        if kind == "param":
            tensors[name] = Tensor(arr, requires_grad=True, name=name)
        else:
            buffers[name] = arr
    return ModelParams(config, tensors, buffers)


def param_count(params, part=None):
    """Per-tensor and total learnable parameter counts (running stats excluded)."""
    per = {n: int(params.tensors[n].data.size) for n in params.names(part)}
    return per, sum(per.values())


# ------------------------------------------------------------ forward passes


def _sepconv(p, prefix, x, stride=1):
    y = conv2d_depthwise(x, p.tensors[prefix + ".dw"], stride)
    return conv2d_pointwise(y, p.tensors[prefix + ".pw"], p.tensors[prefix + ".pb"])


def _block(p, prefix, x, stride, mode):
    y = _sepconv(p, prefix, x, stride)
    cfg = p.config
    y = batchnorm(y, p.tensors[prefix + ".bn.scale"], p.tensors[prefix + ".bn.shift"],
                  p.buffers[prefix + ".bn.mean"], p.buffers[prefix + ".bn.var"],
                  eps=cfg.bn_eps, mode=mode, momentum=cfg.bn_momentum)
    return relu(y)


def _unet(p, tag, x, strides, n_up, mode, trace=None):
    sizes = _spatial_sizes(x.shape[-2:], strides)
    skips = [x]
    h = x
    for i, s in enumerate(strides):
        h = _block(p, f"{tag}.down{i}", h, s, mode)
        if h.shape[-2:] != sizes[i + 1]:
            raise ShapeError(f"{tag}.down{i}: got {h.shape[-2:]}, expected {sizes[i + 1]}")
        skips.append(h)
        if trace is not None:
            trace.append((f"{tag}.down{i}", h.shape))
    skips.pop()
    for j in range(n_up):
        s = strides[len(strides) - 1 - j]
        h = upsample_nn_2d(h, s)
        skip = skips.pop()
        if h.shape[-2:] != skip.shape[-2:]:
            raise ShapeError(f"{tag}.up{j}: skip {skip.shape[-2:]} vs {h.shape[-2:]}")
        h = _block(p, f"{tag}.up{j}", concat_channels(h, skip), 1, mode)
        if trace is not None:
            trace.append((f"{tag}.up{j}", h.shape))
    return h


def secret_plane(params, s):
    """Tensor path of the message upsampler: (N, L) -> (N, 1, h, w)."""
    cfg = params.config
    s = s if isinstance(s, Tensor) else Tensor(np.asarray(s, dtype=params.dtype))
    if s.shape[-1] != cfg.message_length:
        raise ShapeError(f"message length {s.shape[-1]} != {cfg.message_length}")
    batched = s.ndim == 2
    proj = linear(s, params.tensors["enc.msg.w"], params.tensors["enc.msg.b"])
    n = s.shape[0] if batched else 1
    grid = reshape(proj, (n, 1) + tuple(cfg.grid))
    return upsample_nn_2d(grid, cfg.upsample_factor)


def encoder_forward(params, x, s, mode="infer", trace=None):
    """x: (N, 3, h, w) tensor in [0, 1]; s: (N, L) tensor of bits."""
    cfg = params.config
    if x.ndim != 4 or x.shape[1] != 3 or tuple(x.shape[2:]) != tuple(cfg.image_size):
        raise ShapeError(f"expected (N, 3, {cfg.image_size[0]}, {cfg.image_size[1]}), got {x.shape}")
    x0 = concat_channels(x, secret_plane(params, s))
    h = _unet(params, "enc", x0, cfg.enc_strides, len(cfg.enc_up), mode, trace)
    y = tanh_act(_sepconv(params, "enc.out", h))
    return mul(add(y, 1.0), 0.5)


def decoder_forward(params, y, mode="infer", trace=None):
    """y: (N, 3, h, w) image tensor -> (N, L) soft bits in [0, 1]."""
    cfg = params.config
    if y.ndim != 4 or y.shape[1] != 3 or tuple(y.shape[2:]) != tuple(cfg.image_size):
        raise ShapeError(f"expected (N, 3, {cfg.image_size[0]}, {cfg.image_size[1]}), got {y.shape}")
    h = _unet(params, "dec", y, cfg.dec_strides, len(cfg.dec_up), mode, trace)
    head = _sepconv(params, "dec.head", h)
    pooled = avg_pool_2d(head, cfg.upsample_factor)
    flat = reshape(pooled, (y.shape[0], cfg.grid[0] * cfg.grid[1]))
    return sigmoid(linear(flat, params.tensors["dec.msg.w"], params.tensors["dec.msg.b"]))


# ------------------------------------------------------------ numpy API


def _image_batch(x, params, what):
    a = np.asarray(x.data if isinstance(x, Tensor) else x)
    single = a.ndim == 3
    if single:
        a = a[None]
    if a.ndim != 4 or a.shape[1] != 3:
        raise ShapeError(f"{what} must be (3,h,w) or (N,3,h,w), got {a.shape}")
    if a.size and (a.min() < 0 or a.max() > 1):
        raise ValueError(f"{what} pixel values must lie in [0, 1]")
    return Tensor(a.astype(params.dtype, copy=False)), single


def secret_upsample(s, params):
    """Message -> (1, h, w) plane (single message) or (N, 1, h, w)."""
    bits = np.asarray(_bits(s))
    single = bits.ndim == 1
    if bits.shape[-1] != params.config.message_length:
        raise ShapeError(f"message length {bits.shape[-1]} != {params.config.message_length}")
    out = secret_plane(params, Tensor(np.atleast_2d(bits).astype(params.dtype))).data
    return out[0] if single else out


def encode(x, s, params):
    """Watermark image(s) ``x`` with message(s) ``s`` in inference mode."""
    xt, single = _image_batch(x, params, "image")
    bits = np.atleast_2d(_bits(s)).astype(params.dtype)
    if bits.shape[0] != xt.shape[0]:
        raise ShapeError("need one message per image")
    out = encoder_forward(params, xt, Tensor(bits)).data
    return out[0] if single else out


def decode(y, params):
    """Soft bits in [0, 1]; threshold at 0.5 for hard bits."""
    yt, single = _image_batch(y, params, "image")
    out = decoder_forward(params, yt).data
    return out[0] if single else out


# ------------------------------------------------------------ checkpoints


def save_checkpoint(params, path):
    records = []
    for name, shape, kind, _ in _shapes(params.config):
        arr = params.tensors[name].data if kind == "param" else params.buffers[name]
        records.append((name, kind, arr))
    checkpoint.write(path, records, {"kind": "float", "model": params.config.to_dict()})


def load_checkpoint(path, config=None):
    meta, dtype, records = checkpoint.read(path)
    try:
        stored = ModelConfig.from_dict(meta["model"])
    except (KeyError, TypeError) as e:
        raise checkpoint.ManifestError("manifest has no model config") from e
    if dtype != "float32":
        raise ShapeMismatchError(f"expected a float checkpoint, found {dtype}")
    config = config or stored
    expected = {n: (tuple(s), k) for n, s, k, _ in _shapes(config)}
    got = {n: (a.shape, k) for n, k, a in records}
    if expected.keys() != got.keys():
        raise ShapeMismatchError("checkpoint tensors do not match the model configuration")
    for n, (shape, kind) in expected.items():
        if got[n][0] != shape:
            raise ShapeMismatchError(f"{n}: checkpoint shape {got[n][0]} vs config {shape}")
    tensors, buffers = {}, {}
    for name, kind, arr in records:
        if kind == "param":
            tensors[name] = Tensor(arr.copy(), requires_grad=True, name=name)
        else:
            buffers[name] = arr.copy()
    order = [n for n, *_ in _shapes(config)]
    tensors = {n: tensors[n] for n in order if n in tensors}
    buffers = {n: buffers[n] for n in order if n in buffers}
    return ModelParams(config, tensors, buffers)
