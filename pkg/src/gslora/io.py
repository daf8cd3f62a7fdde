"""Binary checkpoint format and atomic file writes.

Checkpoint layout (all integers little-endian)::

    b"GSLF"                magic
    u32                    format version (1)
    u64                    entry count
    per entry, sorted by name:
        u16                name length in bytes
        bytes              UTF-8 name
        u8                 rank
        u64 * rank         dims
        f32 * prod(dims)   values, row-major
"""

from __future__ import annotations

import os
import struct
import tempfile

import numpy as np

MAGIC = b"GSLF"
VERSION = 1


class CheckpointFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        super().__init__(f"{message} (at byte offset {offset})")
        self.offset = offset


def atomic_write_bytes(path, payload: bytes) -> None:
    path = os.fspath(path)
    directory = os.path.dirname(os.path.abspath(path))
    os.makedirs(directory, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(payload)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def encode_checkpoint(tensors: dict) -> bytes:
    parts = [MAGIC, struct.pack("<I", VERSION), struct.pack("<Q", len(tensors))]
    for name in sorted(tensors):
        arr = np.asarray(tensors[name])
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise ValueError(f"tensor name too long: {name[:40]}...")
        if arr.ndim > 0xFF:
            raise ValueError(f"tensor {name} has too many dims")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}Q", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def decode_checkpoint(payload: bytes) -> dict:
    view = memoryview(payload)
    pos = 0

    def take(n: int, what: str) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise CheckpointFormatError(f"truncated while reading {what}", pos)
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4, "magic")) != MAGIC:
        raise CheckpointFormatError("bad magic", 0)
    (version,) = struct.unpack("<I", take(4, "version"))
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported version {version}", 4)
    (count,) = struct.unpack("<Q", take(8, "entry count"))
    out = {}
    for _ in range(count):
        start = pos
        (nlen,) = struct.unpack("<H", take(2, "name length"))
        try:
            name = bytes(take(nlen, "name")).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointFormatError("name is not UTF-8", start + 2) from exc
        if name in out:
            raise CheckpointFormatError(f"duplicate entry {name!r}", start)
        (rank,) = struct.unpack("<B", take(1, "rank"))
        dims = struct.unpack(f"<{rank}Q", take(8 * rank, "dims"))
        n = int(np.prod(dims, dtype=np.int64)) if rank else 1
        values = np.frombuffer(take(4 * n, f"values of {name!r}"), dtype="<f4")
        out[name] = values.reshape(dims).astype(np.float32)
    if pos != len(view):
        raise CheckpointFormatError("trailing bytes after last entry", pos)
    return out


def save_checkpoint(path, tensors: dict) -> None:
    """Quantise to float32 and write atomically."""
    atomic_write_bytes(path, encode_checkpoint(tensors))


def load_checkpoint(path) -> dict:
    with open(path, "rb") as fh:
        return decode_checkpoint(fh.read())
