"""Named-tensor checkpoint files.

Layout (little-endian)::

    b"HOIF" | version u32 | repeated { name_len u32 | name utf-8 | rank u32 |
                                      dims u64[rank] | payload f64[prod(dims)] }
"""
from __future__ import annotations

import struct
from pathlib import Path

import numpy as np

MAGIC = b"HOIF"
VERSION = 1


class FormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (byte offset {offset})")
        self.offset = offset


def dumps(tensors: dict[str, np.ndarray]) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION)]
    for name, arr in tensors.items():
        arr = np.asarray(arr, dtype="<f8")
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<I", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr).tobytes())
    return b"".join(parts)


def loads(buf: bytes) -> dict[str, np.ndarray]:
    if buf[:4] != MAGIC:
        raise FormatError("bad magic", 0)
    if len(buf) < 8:
        raise FormatError("truncated header", len(buf))
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != VERSION:
        raise FormatError(f"unsupported version {version}", 4)
    pos = 8
    out: dict[str, np.ndarray] = {}

    def need(n: int, what: str) -> None:
        if pos + n > len(buf):
            raise FormatError(f"truncated {what}", pos)

    while pos < len(buf):
        need(4, "name length")
        (n,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        need(n, "name")
        name = buf[pos:pos + n].decode("utf-8")
        pos += n
        need(4, "rank")
        (rank,) = struct.unpack_from("<I", buf, pos)
        pos += 4
        need(8 * rank, "dims")
        dims = struct.unpack_from(f"<{rank}Q", buf, pos)
        pos += 8 * rank
        count = int(np.prod(dims)) if rank else 1
        need(8 * count, f"payload of '{name}'")
        out[name] = np.frombuffer(buf, dtype="<f8", count=count, offset=pos).reshape(dims).astype(np.float64)
        pos += 8 * count
    return out


def save(path, tensors: dict[str, np.ndarray]) -> None:
    Path(path).write_bytes(dumps(tensors))


def load(path) -> dict[str, np.ndarray]:
    return loads(Path(path).read_bytes())
