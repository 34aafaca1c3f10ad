"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"DFUSE1"
    u16 len, kind (UTF-8)
    u32 len, config (UTF-8 JSON, sorted keys)
    u32 tensor count
    per tensor: u16 len, name (UTF-8); u8 ndim; ndim x u32 extent; float32 data

Tensors are written in graph order.  Float32 arrays round-trip bit-exactly.
"""

from __future__ import annotations

import io
import json
import struct
from pathlib import Path
from typing import Iterable

import numpy as np

from ..errors import FormatError

MAGIC = b"DFUSE1"


def dumps(kind: str, config: dict, tensors: Iterable[tuple[str, np.ndarray]]) -> bytes:
    buf = io.BytesIO()
    buf.write(MAGIC)
    kind_b = kind.encode("utf-8")
    buf.write(struct.pack("<H", len(kind_b)) + kind_b)
    cfg_b = json.dumps(config, sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf.write(struct.pack("<I", len(cfg_b)) + cfg_b)
    tensors = list(tensors)
    buf.write(struct.pack("<I", len(tensors)))
    for name, arr in tensors:
        name_b = name.encode("utf-8")
        arr = np.asarray(arr)
        buf.write(struct.pack("<H", len(name_b)) + name_b)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return buf.getvalue()


def loads(data: bytes) -> tuple[str, dict, dict[str, np.ndarray]]:
    view = memoryview(data)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise FormatError(f"checkpoint truncated at byte {pos} (needed {n} more)")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(len(MAGIC))) != MAGIC:
        raise FormatError("not a docfuse checkpoint (bad magic)")
    (n,) = struct.unpack("<H", take(2))
    kind = bytes(take(n)).decode("utf-8")
    (n,) = struct.unpack("<I", take(4))
    try:
        config = json.loads(bytes(take(n)).decode("utf-8"))
    except ValueError as exc:
        raise FormatError(f"checkpoint config is not valid JSON: {exc}") from None
    (count,) = struct.unpack("<I", take(4))
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (n,) = struct.unpack("<H", take(2))
        name = bytes(take(n)).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        size = int(np.prod(shape, dtype=np.int64))
        arr = np.frombuffer(bytes(take(4 * size)), dtype="<f4").reshape(shape)
        tensors[name] = arr.astype(np.float32)
    if pos != len(view):
        raise FormatError(f"{len(view) - pos} trailing bytes after last tensor")
    return kind, config, tensors


def save(path, kind: str, config: dict, tensors) -> None:
    Path(path).write_bytes(dumps(kind, config, tensors))


def load(path) -> tuple[str, dict, dict[str, np.ndarray]]:
    return loads(Path(path).read_bytes())
