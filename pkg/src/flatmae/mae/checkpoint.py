"""FMCKPT1 checkpoint format.

Layout (little-endian)::

    b"FMCKPT1\\0"
    u32 len, JSON config echo (UTF-8)
    u32 n_tensors
    repeat: u32 name_len, name, u32 rank, u32 dims[rank], f32 data
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from ..errors import FormatError

MAGIC = b"FMCKPT1\0"

__all__ = ["write_checkpoint", "read_checkpoint", "MAGIC"]


def write_checkpoint(path, config: dict, tensors: dict[str, np.ndarray]) -> None:
    meta = json.dumps(config, sort_keys=True).encode()
    parts = [MAGIC, struct.pack("<I", len(meta)), meta, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        raw = name.encode()
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack(f"<I{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    buf = Path(path).read_bytes()
    if not buf.startswith(MAGIC):
        raise FormatError(f"{path}: bad magic, expected FMCKPT1")
    try:
        off = len(MAGIC)
        (n,) = struct.unpack_from("<I", buf, off)
        off += 4
        config = json.loads(buf[off : off + n].decode())
        off += n
        (count,) = struct.unpack_from("<I", buf, off)
        off += 4
        tensors = {}
        for _ in range(count):
            (n,) = struct.unpack_from("<I", buf, off)
            off += 4
            name = buf[off : off + n].decode()
            off += n
            (rank,) = struct.unpack_from("<I", buf, off)
            off += 4
            dims = struct.unpack_from(f"<{rank}I", buf, off)
            off += 4 * rank
            size = int(np.prod(dims, dtype=np.int64))
            if off + 4 * size > len(buf):
                raise FormatError(f"{path}: tensor {name!r} truncated")
            tensors[name] = np.frombuffer(buf, "<f4", size, off).reshape(dims).copy()
            off += 4 * size
    except (struct.error, UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: corrupt FMCKPT1 file") from exc
    if off != len(buf):
        raise FormatError(f"{path}: {len(buf) - off} trailing bytes")
    return config, tensors
