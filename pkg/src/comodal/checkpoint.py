"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"CMKT" | u32 version | u32 entry count
    per entry: u16 name length | UTF-8 name | u8 rank | u32 dim * rank | f64 payload (row-major)

Entries keep the order of the mapping they were saved from.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .errors import CheckpointFormatError
from .nn import Module

__all__ = ["MAGIC", "VERSION", "encode", "decode", "save", "load", "save_module", "load_module"]

MAGIC = b"CMKT"
VERSION = 1
_HEADER = struct.Struct("<4sII")


def encode(state: Mapping[str, np.ndarray]) -> bytes:
    parts = [_HEADER.pack(MAGIC, VERSION, len(state))]
    for name, value in state.items():
        arr = np.asarray(value, dtype="<f8")
        raw = name.encode("utf-8")
        if len(raw) > 0xFFFF:
            raise CheckpointFormatError(f"parameter name too long ({len(raw)} bytes): {name[:40]}...")
        if arr.ndim > 0xFF:
            raise CheckpointFormatError(f"{name}: rank {arr.ndim} exceeds 255")
        parts.append(struct.pack("<H", len(raw)))
        parts.append(raw)
        parts.append(struct.pack(f"<B{arr.ndim}I", arr.ndim, *arr.shape))
        parts.append(arr.tobytes(order="C"))
    return b"".join(parts)


class _Reader:
    def __init__(self, buf: bytes) -> None:
        self.buf = buf
        self.pos = 0

    def take(self, n: int, what: str) -> bytes:
        end = self.pos + n
        if end > len(self.buf):
            raise CheckpointFormatError(
                f"truncated checkpoint at byte offset {self.pos}: need {n} bytes for {what}, "
                f"{len(self.buf) - self.pos} left")
        chunk = self.buf[self.pos:end]
        self.pos = end
        return chunk

    def unpack(self, fmt: str, what: str) -> tuple:
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def decode(buf: bytes) -> dict[str, np.ndarray]:
    r = _Reader(buf)
    magic, version, count = r.unpack(_HEADER.format, "header")
    if magic != MAGIC:
        raise CheckpointFormatError(f"bad magic {magic!r} at byte offset 0 (expected {MAGIC!r})")
    if version != VERSION:
        raise CheckpointFormatError(f"unsupported checkpoint version {version} (expected {VERSION})")
    state: dict[str, np.ndarray] = {}
    for i in range(count):
        (n,) = r.unpack("<H", f"name length of entry {i}")
        start = r.pos
        try:
            name = r.take(n, f"name of entry {i}").decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointFormatError(f"entry {i} name at byte offset {start} is not UTF-8") from exc
        (rank,) = r.unpack("<B", f"rank of {name}")
        dims = r.unpack(f"<{rank}I", f"dims of {name}")
        size = int(np.prod(dims, dtype=np.int64))
        payload = r.take(8 * size, f"payload of {name}")
        if name in state:
            raise CheckpointFormatError(f"duplicate entry {name!r} at byte offset {start}")
        state[name] = np.frombuffer(payload, dtype="<f8").reshape(dims).astype(np.float64)
    if r.pos != len(buf):
        raise CheckpointFormatError(f"{len(buf) - r.pos} trailing bytes after byte offset {r.pos}")
    return state


def save(state: Mapping[str, np.ndarray], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(encode(state))
    return path


def load(path: str | Path) -> dict[str, np.ndarray]:
    return decode(Path(path).read_bytes())


def save_module(module: Module, path: str | Path) -> Path:
    return save(module.state_dict(), path)


def load_module(module: Module, path: str | Path, strict: bool = True) -> Module:
    module.load_state_dict(load(path), strict=strict)
    return module
