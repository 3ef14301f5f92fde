"""Binary checkpoint format.

Layout (little-endian): magic ``CKP1``, u32 version, u32 tensor count, then per
tensor: u16 name length, UTF-8 name, u8 rank, rank x u32 dims, f32 payload.
"""

from __future__ import annotations

import hashlib
import io
import struct
from pathlib import Path

import numpy as np

from ..errors import FormatError, MissingCheckpoint

MAGIC = b"CKP1"
VERSION = 1


def dumps_checkpoint(tensors: dict[str, np.ndarray], version: int = VERSION) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<II", version, len(tensors)))
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


def loads_checkpoint(blob: bytes) -> tuple[dict[str, np.ndarray], int]:
    view = memoryview(blob)
    if bytes(view[:4]) != MAGIC:
        raise FormatError("not a CKP1 checkpoint")
    version, count = struct.unpack_from("<II", view, 4)
    pos = 12
    tensors: dict[str, np.ndarray] = {}
    try:
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", view, pos)
            pos += 2
            name = bytes(view[pos : pos + nlen]).decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<B", view, pos)
            pos += 1
            shape = struct.unpack_from(f"<{rank}I", view, pos)
            pos += 4 * rank
            size = int(np.prod(shape, dtype=np.int64))
            tensors[name] = np.frombuffer(view, dtype="<f4", count=size, offset=pos).reshape(shape).copy()
            pos += 4 * size
    except (struct.error, ValueError) as exc:
        raise FormatError(f"truncated checkpoint: {exc}") from exc
    if pos != len(blob):
        raise FormatError("trailing bytes after last tensor")
    return tensors, version


def save_checkpoint(path: str | Path, tensors: dict[str, np.ndarray], version: int = VERSION) -> str:
    """Write the checkpoint and return its sha256 hex digest."""
    blob = dumps_checkpoint(tensors, version)
    Path(path).write_bytes(blob)
    return hashlib.sha256(blob).hexdigest()


def load_checkpoint(path: str | Path) -> tuple[dict[str, np.ndarray], int]:
    path = Path(path)
    if not path.exists():
        raise MissingCheckpoint(str(path))
    return loads_checkpoint(path.read_bytes())


def checksum(tensors: dict[str, np.ndarray]) -> str:
    return hashlib.sha256(dumps_checkpoint(tensors)).hexdigest()
