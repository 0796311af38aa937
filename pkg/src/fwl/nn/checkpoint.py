"""Checkpoint format: ``FWLM`` | u32 version | u32 config length | JSON config |
u32 parameter count | per parameter: u16 name length, name, u8 ndim, u32 dims, f32 values.
All integers little-endian."""
from __future__ import annotations

import json
import struct

import numpy as np

from ..io import FormatError
from .autograd import Tensor
from .model import MaeConfig

MAGIC = b"FWLM"
VERSION = 1


def checkpoint_to_bytes(params: dict, cfg: MaeConfig, extra: dict | None = None) -> bytes:
    meta = json.dumps({"model": cfg.to_dict(), "extra": extra or {}}, sort_keys=True).encode()
    out = [MAGIC, struct.pack("<II", VERSION, len(meta)), meta, struct.pack("<I", len(params))]
    for name, t in params.items():
        arr = np.asarray(t.data if isinstance(t, Tensor) else t, dtype="<f4")
        nb = name.encode()
        out.append(struct.pack("<HB", len(nb), arr.ndim) + nb)
        out.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        out.append(arr.tobytes(order="C"))
    return b"".join(out)


def checkpoint_from_bytes(buf: bytes, path="<bytes>"):
    """Returns ``(params, MaeConfig, extra)``; parameters come back as float64 tensors."""
    try:
        if buf[:4] != MAGIC:
            raise FormatError(f"{path}: not a model checkpoint (magic {buf[:4]!r})")
        version, n_meta = struct.unpack_from("<II", buf, 4)
        if version != VERSION:
            raise FormatError(f"{path}: unsupported checkpoint version {version}")
        off = 12
        meta = json.loads(buf[off:off + n_meta].decode())
        off += n_meta
        (count,) = struct.unpack_from("<I", buf, off)
        off += 4
        params = {}
        for _ in range(count):
            n_name, ndim = struct.unpack_from("<HB", buf, off)
            off += 3
            name = buf[off:off + n_name].decode()
            off += n_name
            shape = struct.unpack_from(f"<{ndim}I", buf, off)
            off += 4 * ndim
            size = int(np.prod(shape)) if ndim else 1
            arr = np.frombuffer(buf, dtype="<f4", count=size, offset=off).reshape(shape)
            off += 4 * size
            params[name] = Tensor(arr.astype(np.float64), True, name)
    except (struct.error, ValueError, UnicodeDecodeError) as e:
        if isinstance(e, FormatError):
            raise
        raise FormatError(f"{path}: truncated or corrupt checkpoint ({e})") from e
    if off != len(buf):
        raise FormatError(f"{path}: {len(buf) - off} trailing bytes")
    m = meta["model"]
    return params, MaeConfig(**m), meta.get("extra", {})


def save_checkpoint(path, params: dict, cfg: MaeConfig, extra: dict | None = None) -> None:
    with open(path, "wb") as f:
        f.write(checkpoint_to_bytes(params, cfg, extra))


def load_checkpoint(path):
    with open(path, "rb") as f:
        return checkpoint_from_bytes(f.read(), path)
