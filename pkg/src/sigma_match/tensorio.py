"""Binary tensor container.

Layout (little-endian)::

    magic      4 bytes  b"SGMT"
    version    uint32
    meta_len   uint32   followed by meta_len bytes of UTF-8 JSON
    count      uint32   number of tensors
    per tensor:
        name_len uint16, name (UTF-8)
        ndim     uint32, dims as ndim x uint64
        payload  prod(dims) x float64, row-major

The JSON block holds anything that is not a float array (step counters, RNG
states, config text).
"""

import json
import struct
from pathlib import Path

import numpy as np

MAGIC = b"SGMT"
VERSION = 1


def write_container(path, tensors, meta=None):
    meta_bytes = json.dumps(meta or {}, sort_keys=True).encode("utf-8")
    parts = [MAGIC, struct.pack("<II", VERSION, len(meta_bytes)), meta_bytes]
    parts.append(struct.pack("<I", len(tensors)))
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")  # ascontiguousarray would promote 0-d to 1-d
        nb = name.encode("utf-8")
        parts.append(struct.pack("<H", len(nb)) + nb)
        parts.append(struct.pack("<I", arr.ndim) + struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(arr.tobytes(order="C"))
    Path(path).write_bytes(b"".join(parts))


def read_container(path):
    """Return ``(tensors, meta)``."""
    buf = Path(path).read_bytes()
    if buf[:4] != MAGIC:
        raise ValueError(f"{path}: not a tensor container")
    version, meta_len = struct.unpack_from("<II", buf, 4)
    if version != VERSION:
        raise ValueError(f"{path}: unsupported container version {version}")
    off = 12
    meta = json.loads(buf[off : off + meta_len].decode("utf-8"))
    off += meta_len
    (count,) = struct.unpack_from("<I", buf, off)
    off += 4
    tensors = {}
    for _ in range(count):
        (nlen,) = struct.unpack_from("<H", buf, off)
        off += 2
        name = buf[off : off + nlen].decode("utf-8")
        off += nlen
        (ndim,) = struct.unpack_from("<I", buf, off)
        off += 4
        dims = struct.unpack_from(f"<{ndim}Q", buf, off)
        off += 8 * ndim
        n = int(np.prod(dims)) if ndim else 1
        tensors[name] = np.frombuffer(buf, dtype="<f8", count=n, offset=off).reshape(dims).copy()
        off += 8 * n
    return tensors, meta
