"""Manifest + blob checkpoint container.

A checkpoint is a directory holding ``manifest.json`` and ``weights.bin``.
The manifest lists the schema version, free-form metadata (model config,
fixed-point format, ...), the tensor records in blob order and the CRC-32 of
the blob. The blob is little-endian: IEEE-754 float32 for float checkpoints,
int32 two's complement for quantized ones.
"""
import json
import os
import zlib

import numpy as np

from .errors import IntegrityError, ManifestError, TruncatedBlobError

SCHEMA_VERSION = 1
MANIFEST = "manifest.json"
BLOB = "weights.bin"
_DTYPES = {"float32": np.dtype("<f4"), "int32": np.dtype("<i4")}


def write(path, records, meta, dtype="float32"):
    """``records`` is an ordered list of (name, kind, array)."""
    dt = _DTYPES[dtype]
    os.makedirs(path, exist_ok=True)
    chunks, entries, offset = [], [], 0
    for name, kind, arr in records:
        a = np.asarray(arr)
        if dtype == "int32":
            a = a.astype(np.int64)
            if a.size and (a.min() < -(2**31) or a.max() >= 2**31):
                raise ValueError(f"{name}: raw values exceed int32")
        flat = np.ascontiguousarray(a, dtype=dt).ravel()
        entries.append({"name": name, "kind": kind, "shape": list(a.shape),
                        "offset": offset, "count": int(flat.size)})
        offset += flat.size
        chunks.append(flat.tobytes())
    blob = b"".join(chunks)
    manifest = {
        "format": "faststamp-checkpoint",
        "schema_version": SCHEMA_VERSION,
        "dtype": dtype,
        "meta": meta,
        "tensors": entries,
        "blob": BLOB,
        "blob_bytes": len(blob),
        "crc32": zlib.crc32(blob),
    }
    with open(os.path.join(path, BLOB), "wb") as f:
        f.write(blob)
    with open(os.path.join(path, MANIFEST), "w") as f:
        json.dump(manifest, f, indent=1, sort_keys=True)
        f.write("\n")


def read(path):
    """Returns (meta, dtype, list of (name, kind, array))."""
    try:
        with open(os.path.join(path, MANIFEST)) as f:
            manifest = json.load(f)
    except FileNotFoundError as e:
        raise ManifestError(f"no manifest in {path}") from e
    except (json.JSONDecodeError, UnicodeDecodeError) as e:
        raise ManifestError(f"corrupt manifest: {e}") from e
    try:
        if manifest["format"] != "faststamp-checkpoint":
            raise ManifestError("not a faststamp checkpoint")
        if manifest["schema_version"] != SCHEMA_VERSION:
            raise ManifestError(f"unsupported schema version {manifest['schema_version']}")
        dtype = manifest["dtype"]
        dt = _DTYPES[dtype]
        entries = manifest["tensors"]
        expected = int(manifest["blob_bytes"])
        crc = int(manifest["crc32"])
        meta = manifest["meta"]
        blob_name = manifest["blob"]
    except (KeyError, TypeError, ValueError) as e:
        if isinstance(e, ManifestError):
            raise
        raise ManifestError(f"manifest missing or invalid field: {e}") from e
    try:
        with open(os.path.join(path, blob_name), "rb") as f:
            blob = f.read()
    except FileNotFoundError as e:
        raise TruncatedBlobError(f"blob {blob_name} missing") from e
    if len(blob) < expected:
        raise TruncatedBlobError(f"blob has {len(blob)} bytes, manifest says {expected}")
    if len(blob) > expected:
        raise IntegrityError(f"blob has {len(blob) - expected} trailing bytes")
    if zlib.crc32(blob) != crc:
        raise IntegrityError("blob CRC-32 does not match manifest")
    flat = np.frombuffer(blob, dtype=dt)
    out = []
    for e in entries:
        try:
            start, count, shape = int(e["offset"]), int(e["count"]), tuple(e["shape"])
        except (KeyError, TypeError, ValueError) as err:
            raise ManifestError(f"bad tensor record {e!r}") from err
        if int(np.prod(shape)) != count or start + count > flat.size:
            raise ManifestError(f"tensor record {e.get('name')} inconsistent with blob")
        arr = flat[start:start + count].reshape(shape)
        arr = arr.astype(np.int64) if dtype == "int32" else arr.astype(np.float32)
        out.append((e["name"], e.get("kind", "param"), arr))
    return meta, dtype, out
