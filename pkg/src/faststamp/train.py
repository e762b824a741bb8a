"""Losses and the end-to-end training loop (robust and semi-fragile modes).

Metrics log schema (one JSON object per line, keys sorted, no timestamps so
that equal seeds give byte-identical logs):

* ``{"kind": "train", "iteration", "loss", "l1_img", "l2_img", "l_m",
  "bra_b", "bra_m", "img_weight", "transform_b", "transform_m"}``
  (``bra_m``/``transform_m`` are null in robust mode)
* ``{"kind": "eval", "iteration", "psnr", "ssim", "bra": {name: percent},
  "benign_bra", "best"}``

The coefficients c_M = 2, the 10% image-loss ramp and the transform
strength ranges are this package's defaults, not published values.
"""
import json
import math
import os
from dataclasses import asdict, dataclass, field, fields
from typing import Optional

import numpy as np

from . import metrics
from .data import load_dataset, toy_images
from .errors import ConfigError, ShapeError, TrainingDivergedError
from .model import ModelConfig, decoder_forward, encoder_forward, init_params, save_checkpoint
from .optim import AdamState, adam_step
from .tensor import (
    GradTape, Tensor, abs_, add, as_tensor, backward, concat, conv2d_depthwise, conv2d_pointwise, div,
    index, mean, minimum, mul, square, sub,
)
from .transforms import (
    Transform, TransformSpec, default_benign, default_malicious, sample_transform, to_uint8,
)

# ------------------------------------------------------------ losses

_PERCEPTUAL = {"fn": None}


def register_perceptual(fn):
    """Install ``fn(x, x_w) -> scalar Tensor`` as the perceptual term (None to clear)."""
    _PERCEPTUAL["fn"] = fn


@dataclass
class LossWeights:
    c_p: float = 0.0
    c_M: float = 2.0
    img_start: float = 0.0
    img_end: float = 1.0
    ramp_fraction: float = 0.1
    ramp_iters: Optional[int] = None  # overrides ramp_fraction when set
    m_clamp: float = 0.5
    fragile_warmup: float = 0.0  # leading fraction of iterations trained with the robust objective
    perceptual: Optional[str] = None  # "ssim" for the built-in term, None for the registered hook

    def __post_init__(self):
        if not 0 <= self.fragile_warmup < 1:
            raise ConfigError("fragile_warmup must lie in [0, 1)")
        if self.perceptual not in (None, "ssim"):
            raise ConfigError(f"perceptual must be null or 'ssim', got {self.perceptual!r}")
        for name in ("c_p", "c_M", "img_start", "img_end", "ramp_fraction", "m_clamp"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be non-negative")
        if self.img_end < self.img_start:
            raise ConfigError("image-loss ramp must not decrease")
        if self.ramp_iters is not None and self.ramp_iters < 0:
            raise ConfigError("ramp_iters must be non-negative")

    def image_weight(self, iteration, total):
        n = self.ramp_iters if self.ramp_iters is not None else int(self.ramp_fraction * total)
        if n <= 0 or iteration >= n:
            return self.img_end
        return self.img_start + (self.img_end - self.img_start) * iteration / n

    def fragile_active(self, iteration, total):
        return iteration >= int(self.fragile_warmup * total)


def _pair(a, b, what):
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"{what}: shapes {a.shape} and {b.shape} differ")
    return a, b


def l1(a, b):
    return mean(abs_(sub(a, b)))


def l2(a, b):
    return mean(square(sub(a, b)))


def ssim_loss(x, x_w, win_size=11, sigma=1.5, k1=0.01, k2=0.03):
    """1 - SSIM of the luma planes, averaged over the batch; differentiable.

    Same windows and constants as :func:`faststamp.metrics.ssim`, so for a
    single image ``1 - ssim_loss`` equals that metric.
    """
    x, x_w = _pair(x, x_w, "ssim_loss")
    luma = metrics.LUMA[None, :].astype(x.dtype)
    a, b = conv2d_pointwise(x, luma), conv2d_pointwise(x_w, luma)
    if min(a.shape[-2:]) < win_size:
        raise ShapeError(f"image {a.shape[-2:]} smaller than the {win_size}x{win_size} window")
    g = metrics._gauss_window(win_size, sigma)
    kernel = np.outer(g, g)[None].astype(x.dtype)
    r = (win_size - 1) // 2
    valid = (Ellipsis, slice(r, a.shape[-2] - r), slice(r, a.shape[-1] - r))

    def blur(t):
        return index(conv2d_depthwise(t, kernel), valid)

    mu_a, mu_b = blur(a), blur(b)
    mu_aa, mu_bb, mu_ab = mul(mu_a, mu_a), mul(mu_b, mu_b), mul(mu_a, mu_b)
    s_aa = sub(blur(mul(a, a)), mu_aa)
    s_bb = sub(blur(mul(b, b)), mu_bb)
    s_ab = sub(blur(mul(a, b)), mu_ab)
    c1, c2 = k1 ** 2, k2 ** 2
    num = mul(add(mul(mu_ab, 2.0), c1), add(mul(s_ab, 2.0), c2))
    den = mul(add(add(mu_aa, mu_bb), c1), add(add(s_aa, s_bb), c2))
    return sub(1.0, mean(div(num, den)))


def loss_image(x, x_w, weights=None):
    """L1 + L2 (+ c_p times the perceptual term: built-in SSIM loss or the registered hook)."""
    weights = weights or LossWeights()
    x, x_w = _pair(x, x_w, "loss_image")
    total = add(l1(x, x_w), l2(x, x_w))
    fn = ssim_loss if weights.perceptual == "ssim" else _PERCEPTUAL["fn"]
    if weights.c_p and fn is not None:
        total = add(total, mul(fn(x, x_w), weights.c_p))
    return total


def loss_message_robust(s, s_b):
    s, s_b = _pair(s, s_b, "loss_message_robust")
    return l1(s, s_b)


def loss_message_semifragile(s, s_b, s_m, m_clamp=0.5):
    """L1(s, s_b) - min(L1(s, s_m), m_clamp)."""
    s, s_b = _pair(s, s_b, "loss_message_semifragile")
    _, s_m = _pair(s, s_m, "loss_message_semifragile")
    return sub(l1(s, s_b), minimum(l1(s, s_m), m_clamp))


@dataclass
class Diagnostics:
    loss: float
    l1_img: float
    l2_img: float
    l_m: float
    bra_b: float
    bra_m: Optional[float]
    img_weight: float
    transform_b: str
    transform_m: Optional[str]


def total_loss(x, s, params, benign, weights=None, rng=None, malicious=None,
               iteration=0, total_iterations=1, mode="train"):
    """Encode, transform, decode and combine; returns (loss Tensor, Diagnostics).

    ``benign``/``malicious`` are lists of :class:`TransformSpec` (sampled
    once per batch) or concrete :class:`Transform` objects. Passing
    ``malicious`` switches to the semi-fragile objective; the benign and
    tampered batches go through the decoder together so they share
    batch-norm statistics.
    """
    weights = weights or LossWeights()
    rng = rng if rng is not None else np.random.default_rng(0)
    x = as_tensor(x)
    s = as_tensor(np.asarray(s.data if isinstance(s, Tensor) else s, dtype=x.dtype))
    if s.ndim != 2 or s.shape[0] != x.shape[0]:
        raise ShapeError(f"need an (N, L) message batch for N={x.shape[0]} images, got {s.shape}")
    x_w = encoder_forward(params, x, s, mode=mode)
    g_b = benign if isinstance(benign, Transform) else sample_transform(benign, rng)
    x_b = g_b(x_w, rng)
    n = x.shape[0]
    if malicious is not None and not weights.fragile_active(iteration, total_iterations):
        malicious = None
    if malicious is None:
        soft_b = decoder_forward(params, x_b, mode=mode)
        soft_m, g_m = None, None
        l_m = loss_message_robust(s, soft_b)
    else:
        g_m = malicious if isinstance(malicious, Transform) else sample_transform(malicious, rng)
        other = np.roll(x.data, 1, axis=0)
        x_m = g_m(x_w, rng, other)
        soft = decoder_forward(params, concat([x_b, x_m], axis=0), mode=mode)
        soft_b = index(soft, slice(0, n))
        soft_m = index(soft, slice(n, 2 * n))
        l_m = loss_message_semifragile(s, soft_b, soft_m, weights.m_clamp)
    l_img = loss_image(x, x_w, weights)
    w_img = weights.image_weight(iteration, total_iterations)
    loss = add(mul(l_img, w_img), mul(l_m, weights.c_M))
    diag = Diagnostics(
        loss=float(loss.data),
        l1_img=float(np.mean(np.abs(x.data - x_w.data))),
        l2_img=float(np.mean((x.data - x_w.data) ** 2)),
        l_m=float(l_m.data),
        bra_b=metrics.bra(s.data, soft_b.data),
        bra_m=None if soft_m is None else metrics.bra(s.data, soft_m.data),
        img_weight=float(w_img),
        transform_b=g_b.describe(),
        transform_m=None if g_m is None else g_m.describe(),
    )
    return loss, diag


# ------------------------------------------------------------ evaluation


def eval_transforms(mode, jpeg_quality=75, tamper_area=0.25):
    """Named evaluation transforms; the tamper entry is used only in semi-fragile mode."""
    out = {"none": Transform("identity"),
           f"jpeg{jpeg_quality}": Transform("jpeg_roundtrip", {"quality": jpeg_quality})}
    if mode == "semi_fragile":
        out["tamper"] = Transform("local_tamper", {"area": tamper_area, "fill": "other"})
    return out


def evaluate(params, images, messages, transforms, seed=0, batch_size=16):
    """PSNR/SSIM of the 8-bit watermarked images and BRA under each transform.

    Watermarked images are rounded to 8 bits (as if saved to PNG) before
    any transform, and the tamper source for image i is cover i+1.
    """
    from .model import decode, encode

    images = np.asarray(images, dtype=np.float64)
    rng = np.random.default_rng(seed)
    wm = np.concatenate([encode(images[i:i + batch_size], messages[i:i + batch_size], params)
                         for i in range(0, len(images), batch_size)])
    wm = to_uint8(wm).astype(np.float64) / 255.0
    psnrs = [min(metrics.psnr(a, b), metrics.PSNR_CAP) for a, b in zip(images, wm)]
    ssims = [metrics.ssim(a, b) for a, b in zip(images, wm)]
    other = np.roll(images, 1, axis=0)
    result = {"psnr": float(np.mean(psnrs)), "ssim": float(np.mean(ssims)), "bra": {}}
    for name, t in transforms.items():
        attacked = np.stack([t(wm[i], rng, other[i]) for i in range(len(wm))])
        soft = np.concatenate([decode(attacked[i:i + batch_size], params)
                               for i in range(0, len(attacked), batch_size)])
        result["bra"][name] = metrics.bra(messages, soft)
    return result


# ------------------------------------------------------------ training loop


@dataclass
class TrainConfig:
    mode: str = "robust"
    batch_size: int = 8
    iterations: int = 20000
    lr: float = 1.5e-4
    seed: int = 0
    dataset: str = "toy"          # image folder, or "toy" for the built-in corpus
    val_dataset: Optional[str] = None
    toy_train: int = 64
    toy_val: int = 32
    eval_every: int = 1000
    log_every: int = 50
    out_dir: Optional[str] = None
    model: dict = field(default_factory=lambda: {"image_size": [64, 64], "message_length": 16})
    weights: dict = field(default_factory=dict)
    benign: Optional[list] = None     # list of TransformSpec dicts; None -> defaults
    malicious: Optional[list] = None
    eval_tamper_area: float = 0.25
    eval_jpeg_quality: int = 75
    select_resolution: float = 1.0  # BRA bucket (percentage points) for checkpoint selection
    # semi-fragile only: tamper BRA window (percent) an evaluation must fall in to be kept as best;
    # far below 50% the decoder is inverting bits, which still leaks the message
    tamper_band: Optional[tuple] = (40.0, 65.0)

    def __post_init__(self):
        if self.mode not in ("robust", "semi_fragile"):
            raise ConfigError(f"mode must be 'robust' or 'semi_fragile', got {self.mode!r}")
        if self.iterations <= 0:
            raise ConfigError("iterations must be positive")
        if not self.lr > 0:
            raise ConfigError("lr must be positive")
        if self.batch_size <= 0 or self.eval_every <= 0 or self.log_every <= 0:
            raise ConfigError("batch_size, eval_every and log_every must be positive")
        if self.tamper_band is not None:
            if len(self.tamper_band) != 2 or not 0 <= self.tamper_band[0] < self.tamper_band[1] <= 100:
                raise ConfigError(f"tamper_band must be (lo, hi) with 0 <= lo < hi <= 100, got {self.tamper_band}")
            self.tamper_band = tuple(float(v) for v in self.tamper_band)

    @classmethod
    def from_dict(cls, d):
        known = {f.name for f in fields(cls)}
        extra = set(d) - known
        if extra:
            raise ConfigError(f"unknown train config keys: {sorted(extra)}")
        return cls(**d)

    def to_dict(self):
        return asdict(self)

    def model_config(self):
        return ModelConfig.from_dict(self.model)

    def loss_weights(self):
        return LossWeights(**self.weights)

    def transform_banks(self):
        benign = ([TransformSpec.from_dict(d) for d in self.benign]
                  if self.benign is not None else default_benign())
        malicious = None
        if self.mode == "semi_fragile":
            malicious = ([TransformSpec.from_dict(d) for d in self.malicious]
                         if self.malicious is not None else default_malicious())
        return benign, malicious


def load_training_data(cfg, model_cfg):
    size = tuple(model_cfg.image_size)
    if cfg.dataset == "toy":
        train = toy_images(cfg.toy_train, size, cfg.seed, "train").astype(np.float32) / 255
        val = toy_images(cfg.toy_val, size, cfg.seed, "test").astype(np.float32) / 255
    else:
        train = load_dataset(cfg.dataset, size).astype(np.float32)
        if cfg.val_dataset:
            val = load_dataset(cfg.val_dataset, size).astype(np.float32)
        else:
            val = train[: max(1, min(len(train), cfg.toy_val))]
    if len(train) == 0:
        raise ConfigError("training dataset is empty")
    if len(train) < cfg.batch_size:
        raise ConfigError(f"dataset has {len(train)} images, fewer than batch size {cfg.batch_size}")
    return train, val


def _batches(n, batch_size, rng):
    while True:
        perm = rng.permutation(n)
        for i in range(0, n - batch_size + 1, batch_size):
            yield perm[i:i + batch_size]


def _record(log, rec):
    if log is not None:
        log.write(json.dumps(rec, sort_keys=True) + "\n")
        log.flush()


@dataclass
class TrainResult:
    params: object
    best_params: object
    best_eval: Optional[dict]
    log: list


def train_loop(cfg, params=None, data=None, log_path=None, progress=None):
    """Run ``cfg.iterations`` Adam steps; returns a :class:`TrainResult`.

    ``data`` may be a (train, val) pair of float arrays to bypass dataset
    loading. The best model by validation benign BRA, rounded to
    ``select_resolution`` points so that sub-bit jitter does not mask PSNR
    gains, with ties broken by PSNR, is kept in memory and, when ``cfg.out_dir`` is set, saved to
    ``out_dir/best``; the final model goes to ``out_dir/final``. In
    semi-fragile mode only evaluations after the robust warm-up whose tamper
    BRA lies inside ``cfg.tamper_band`` compete.
    """
    model_cfg = cfg.model_config()
    weights = cfg.loss_weights()
    benign, malicious = cfg.transform_banks()
    train, val = data if data is not None else load_training_data(cfg, model_cfg)
    if len(train) == 0:
        raise ConfigError("training dataset is empty")
    if cfg.mode == "semi_fragile" and cfg.batch_size < 2:
        raise ConfigError("semi-fragile training needs batch_size >= 2")
    seeds = np.random.SeedSequence(cfg.seed).spawn(4)
    params = params if params is not None else init_params(seeds[0], model_cfg)
    batch_rng = np.random.default_rng(seeds[1])
    msg_rng = np.random.default_rng(seeds[2])
    tf_rng = np.random.default_rng(seeds[3])
    val_msgs = np.random.default_rng([cfg.seed, 99]).integers(0, 2, (len(val), model_cfg.message_length))
    ev_tf = eval_transforms(cfg.mode, cfg.eval_jpeg_quality, cfg.eval_tamper_area)
    benign_names = [k for k in ev_tf if k != "tamper"]

    if cfg.out_dir:
        os.makedirs(cfg.out_dir, exist_ok=True)
        log_path = log_path or os.path.join(cfg.out_dir, "metrics.jsonl")
    log = open(log_path, "w") if log_path else None
    state = AdamState(lr=cfg.lr)
    learn = params.tensors
    records, best, best_key, best_params = [], None, None, None
    batches = _batches(len(train), cfg.batch_size, batch_rng)
    try:
        for it in range(cfg.iterations):
            idx = next(batches)
            x = train[idx]
            s = msg_rng.integers(0, 2, (len(idx), model_cfg.message_length)).astype(np.float32)
            with GradTape() as tape:
                loss, diag = total_loss(Tensor(x), s, params, benign, weights, tf_rng, malicious,
                                        it, cfg.iterations, mode="train")
            if not math.isfinite(diag.loss):
                raise TrainingDivergedError(
                    f"non-finite loss at iteration {it} (batch images {idx.tolist()})", it, it)
            grads = backward(tape, loss, wrt=list(learn.values()))
            named = {n: grads[t] for n, t in learn.items()}
            if not all(np.all(np.isfinite(g)) for g in named.values()):
                raise TrainingDivergedError(f"non-finite gradient at iteration {it}", it, it)
            adam_step(learn, named, state)

            if it % cfg.log_every == 0 or it == cfg.iterations - 1:
                rec = {"kind": "train", "iteration": it, **asdict(diag)}
                records.append(rec)
                _record(log, rec)
                if progress:
                    progress(rec)
            if (it + 1) % cfg.eval_every == 0 or it == cfg.iterations - 1:
                ev = evaluate(params, val, val_msgs, ev_tf, seed=cfg.seed)
                benign_bra = float(np.mean([ev["bra"][k] for k in benign_names]))
                key = (round(benign_bra / cfg.select_resolution), ev["psnr"])
                eligible = malicious is None or (
                    weights.fragile_active(it, cfg.iterations)
                    and (cfg.tamper_band is None
                         or cfg.tamper_band[0] <= ev["bra"]["tamper"] <= cfg.tamper_band[1]))
                improved = eligible and (best_key is None or key > best_key)
                if improved:
                    best_key, best = key, dict(ev, iteration=it + 1, benign_bra=benign_bra)
                    best_params = params.copy()
                    if cfg.out_dir:
                        save_checkpoint(params, os.path.join(cfg.out_dir, "best"))
                rec = {"kind": "eval", "iteration": it + 1, "benign_bra": benign_bra,
                       "best": improved, **ev}
                records.append(rec)
                _record(log, rec)
                if progress:
                    progress(rec)
    finally:
        if log is not None:
            log.close()
    if cfg.out_dir:
        save_checkpoint(params, os.path.join(cfg.out_dir, "final"))
    return TrainResult(params, best_params or params.copy(), best, records)
