"""Image datasets: directory loading and a small reproducible toy corpus.

The toy corpus cuts square crops out of the sample photographs bundled with
scikit-image (portraits, animals, objects, microscopy). Each source photo is
split spatially: crops for the training set come from its left 70% and
held-out crops from the remaining strip, so no test pixel is ever seen in
training. If scikit-image is not installed, smooth procedural scenes with
random shapes and noise texture are used instead.
"""
import math
import os

import numpy as np
from PIL import Image

from .imageio import load_image_dir, write_png

SKIMAGE_SOURCES = ("astronaut", "chelsea", "coffee", "rocket", "immunohistochemistry",
                   "retina", "hubble_deep_field", "coins", "camera")
TRAIN_FRACTION = 0.7


def _skimage_photos():
    try:
        from skimage import data as skdata
    except ImportError:
        return []
    photos = []
    for name in SKIMAGE_SOURCES:
        try:
            img = getattr(skdata, name)()
        except Exception:  # optional downloads may be missing offline
            continue
        img = np.asarray(img)
        if img.ndim == 2:
            img = np.repeat(img[..., None], 3, axis=2)
        photos.append(np.ascontiguousarray(img[..., :3].astype(np.uint8)))
    return photos


def _resize(img, short_side):
    h, w = img.shape[:2]
    scale = short_side / min(h, w)
    size = (max(1, round(w * scale)), max(1, round(h * scale)))
    return np.asarray(Image.fromarray(img).resize(size, Image.BICUBIC))


def _crop(photo, size, rng, region):
    """Random (size x size) crop at a random scale inside a vertical band.

    The scale is drawn so the band is at least ``size`` pixels wide, which
    keeps every crop strictly inside its band.
    """
    h0, w0 = photo.shape[:2]
    band = region[1] - region[0]
    fit = math.ceil(size * min(h0, w0) / (band * w0)) + 1
    lo = max(int(1.5 * size), fit)
    short = int(rng.integers(lo, max(lo, 4 * size) + 1))
    img = _resize(photo, short)
    h, w = img.shape[:2]
    x0, x1 = math.ceil(region[0] * w), int(region[1] * w)
    top = int(rng.integers(0, h - size + 1))
    left = int(rng.integers(x0, x1 - size + 1))
    return img[top:top + size, left:left + size].transpose(2, 0, 1)


def procedural_image(size, rng):
    """A smooth colour field with a few random ellipses and fine noise, uint8 (3, H, W)."""
    h, w = size
    yy, xx = np.mgrid[0:h, 0:w] / max(h, w)
    img = np.zeros((3, h, w))
    for c in range(3):
        a, b, p = rng.uniform(-3, 3, size=3)
        img[c] = 0.5 + 0.3 * np.sin(a * xx + b * yy + p)
    for _ in range(int(rng.integers(2, 6))):
        cy, cx = rng.uniform(0, 1, 2)
        ry, rx = rng.uniform(0.05, 0.3, 2)
        inside = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 < 1
        img[:, inside] = rng.uniform(0, 1, size=(3, 1))
    img += rng.normal(0, 0.03, size=img.shape)
    return np.clip(np.round(img * 255), 0, 255).astype(np.uint8)


def toy_images(n, size=(64, 64), seed=0, split="train"):
    """``n`` uint8 (3, H, W) crops, deterministic in (n, size, seed, split)."""
    if split not in ("train", "test"):
        raise ValueError("split must be 'train' or 'test'")
    rng = np.random.default_rng([seed, 0 if split == "train" else 1])
    photos = _skimage_photos()
    if not photos or size[0] != size[1]:
        return np.stack([procedural_image(size, rng) for _ in range(n)])
    region = (0.0, TRAIN_FRACTION) if split == "train" else (TRAIN_FRACTION, 1.0)
    out = [_crop(photos[i % len(photos)], size[0], rng, region) for i in range(n)]
    return np.stack(out)


def make_toy_dataset(out_dir, n_train=64, n_test=32, size=(64, 64), seed=0):
    """Write ``train/`` and ``test/`` PNG folders; returns their paths."""
    paths = {}
    for split, n in (("train", n_train), ("test", n_test)):
        d = os.path.join(out_dir, split)
        os.makedirs(d, exist_ok=True)
        for i, img in enumerate(toy_images(n, size, seed, split)):
            write_png(os.path.join(d, f"{i:05d}.png"), img)
        paths[split] = d
    return paths


def load_dataset(path, size=None):
    """(N, 3, H, W) float images from a folder of PNG/PPM files."""
    return load_image_dir(path, size)
