"""8-bit RGB image files: PNG (non-interlaced) and binary PPM (P6).

Pixels come back as float64 (3, H, W) arrays scaled by 1/255 and go out as
round(255 * x).
"""
import os
import struct

import numpy as np
from PIL import Image

from .errors import ImageFormatError, TruncatedFileError

PNG_MAGIC = b"\x89PNG\r\n\x1a\n"


def _to_u8(x):
    a = np.asarray(x)
    if a.dtype == np.uint8:
        return a
    if a.size and (np.nanmin(a) < 0 or np.nanmax(a) > 1):
        raise ValueError("float images must lie in [0, 1]")
    return np.clip(np.round(a.astype(np.float64) * 255.0), 0, 255).astype(np.uint8)


def _hwc(x):
    a = _to_u8(x)
    if a.ndim != 3 or a.shape[0] != 3:
        raise ImageFormatError(f"expected a (3, H, W) RGB image, got {a.shape}")
    return np.ascontiguousarray(a.transpose(1, 2, 0))


def _png_header(data):
    if len(data) < 33:
        raise TruncatedFileError("PNG shorter than its header")
    if data[12:16] != b"IHDR":
        raise ImageFormatError("PNG does not start with IHDR")
    w, h, depth, ctype, _, _, interlace = struct.unpack(">IIBBBBB", data[16:29])
    return w, h, depth, ctype, interlace


def read_png(path):
    with open(path, "rb") as f:
        data = f.read()
    if not data.startswith(PNG_MAGIC):
        raise ImageFormatError(f"{path}: not a PNG file")
    w, h, depth, ctype, interlace = _png_header(data)
    if depth != 8 or ctype != 2:
        raise ImageFormatError(f"{path}: only 8-bit RGB PNG is supported (depth={depth}, colour type={ctype})")
    if interlace:
        raise ImageFormatError(f"{path}: interlaced PNG is not supported")
    try:
        with Image.open(path) as im:
            im.load()
            arr = np.asarray(im)
    except (OSError, SyntaxError) as e:
        raise TruncatedFileError(f"{path}: {e}") from e
    if arr.shape != (h, w, 3):
        raise ImageFormatError(f"{path}: decoded shape {arr.shape} disagrees with header")
    return arr.transpose(2, 0, 1)


def write_png(path, x):
    Image.fromarray(_hwc(x), "RGB").save(path, format="PNG")


def _ppm_tokens(data, count):
    tokens, i, n = [], 2, len(data)
    while len(tokens) < count:
        while i < n and data[i:i + 1].isspace():
            i += 1
        if i < n and data[i:i + 1] == b"#":
            while i < n and data[i:i + 1] not in (b"\n", b"\r"):
                i += 1
            continue
        start = i
        while i < n and not data[i:i + 1].isspace() and data[i:i + 1] != b"#":
            i += 1
        if start == i:
            raise TruncatedFileError("PPM header ends early")
        tokens.append(data[start:i])
    if i >= n:
        raise TruncatedFileError("PPM header ends early")
    return tokens, i + 1


def read_ppm(path):
    with open(path, "rb") as f:
        data = f.read()
    if data[:2] != b"P6":
        raise ImageFormatError(f"{path}: not a binary PPM (P6) file")
    tokens, start = _ppm_tokens(data, 3)
    try:
        w, h, maxval = (int(t) for t in tokens)
    except ValueError as e:
        raise ImageFormatError(f"{path}: bad PPM header") from e
    if maxval != 255:
        raise ImageFormatError(f"{path}: only maxval 255 is supported, got {maxval}")
    need = w * h * 3
    body = data[start:start + need]
    if len(body) < need:
        raise TruncatedFileError(f"{path}: expected {need} pixel bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, 3).transpose(2, 0, 1)


def write_ppm(path, x):
    a = _hwc(x)
    h, w, _ = a.shape
    with open(path, "wb") as f:
        f.write(b"P6\n%d %d\n255\n" % (w, h))
        f.write(a.tobytes())


def _kind(path):
    ext = os.path.splitext(path)[1].lower()
    if ext == ".png":
        return "png"
    if ext in (".ppm", ".pnm"):
        return "ppm"
    raise ImageFormatError(f"{path}: unsupported extension {ext!r} (use .png or .ppm)")


def read_image_u8(path):
    """(3, H, W) uint8 array."""
    return read_png(path) if _kind(path) == "png" else read_ppm(path)


def read_image(path):
    """(3, H, W) float64 array in [0, 1]."""
    return read_image_u8(path).astype(np.float64) / 255.0


def write_image(path, x):
    """Write a (3, H, W) float array in [0, 1] or uint8 array."""
    if _kind(path) == "png":
        write_png(path, x)
    else:
        write_ppm(path, x)


def list_images(directory):
    names = sorted(n for n in os.listdir(directory)
                   if os.path.splitext(n)[1].lower() in (".png", ".ppm", ".pnm"))
    return [os.path.join(directory, n) for n in names]


def load_image_dir(directory, size=None):
    """Stack every PNG/PPM of a directory into an (N, 3, H, W) float array."""
    paths = list_images(directory)
    if not paths:
        raise FileNotFoundError(f"no .png/.ppm images in {directory}")
    imgs = [read_image(p) for p in paths]
    shapes = {im.shape for im in imgs}
    if len(shapes) != 1:
        raise ImageFormatError(f"images in {directory} have mixed sizes: {sorted(shapes)}")
    arr = np.stack(imgs)
    if size is not None and tuple(arr.shape[2:]) != tuple(size):
        raise ImageFormatError(f"images are {arr.shape[2:]}, model expects {tuple(size)}")
    return arr
