"""Versioned binary checkpoint container.

Layout (little-endian)::

    b"M3CK"  u32 version
    u32 config_len  config_len bytes of UTF-8 JSON
    u32 n_entries
    repeated: u16 name_len, name bytes, u8 ndim, ndim * u32 dims,
              prod(dims) * f32 row-major payload
"""
import json
import struct

import numpy as np

MAGIC = b"M3CK"
VERSION = 1


class CheckpointError(ValueError):
    pass


def save(path, params, config=None):
    """Write ``params`` (iterable of (name, array-like)) with a config echo."""
    cfg = json.dumps(config or {}, sort_keys=True).encode("utf-8")
    entries = list(params)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(cfg)))
        fh.write(cfg)
        fh.write(struct.pack("<I", len(entries)))
        for name, arr in entries:
            arr = np.asarray(getattr(arr, "data", arr), dtype="<f4")
            nb = name.encode("utf-8")
            fh.write(struct.pack("<H", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr).tobytes())


def load(path):
    """Return ``(config, {name: float32 array})``."""
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, clen = struct.unpack_from("<II", blob, 4)
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    off = 12
    config = json.loads(blob[off : off + clen].decode("utf-8"))
    off += clen
    (n,) = struct.unpack_from("<I", blob, off)
    off += 4
    out = {}
    for _ in range(n):
        (nl,) = struct.unpack_from("<H", blob, off)
        off += 2
        name = blob[off : off + nl].decode("utf-8")
        off += nl
        (nd,) = struct.unpack_from("<B", blob, off)
        off += 1
        dims = struct.unpack_from(f"<{nd}I", blob, off)
        off += 4 * nd
        size = int(np.prod(dims)) if nd else 1
        arr = np.frombuffer(blob, dtype="<f4", count=size, offset=off).reshape(dims).astype(np.float32)
        off += 4 * size
        out[name] = arr
    if off != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - off} trailing bytes")
    return config, out


def assign(module, arrays, strict=True):
    """Copy loaded arrays into ``module``'s parameters by name."""
    named = dict(module.named_parameters())
    if strict:
        missing = sorted(set(named) - set(arrays))
        extra = sorted(set(arrays) - set(named))
        if missing or extra:
            raise CheckpointError(f"parameter mismatch: missing={missing[:5]} unexpected={extra[:5]}")
    for name, p in named.items():
        if name in arrays:
            if arrays[name].shape != p.data.shape:
                raise CheckpointError(f"{name}: shape {arrays[name].shape} != {p.data.shape}")
            p.data[...] = arrays[name]
