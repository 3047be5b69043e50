"""Little-endian header + float32 matrix helpers shared by the binary formats."""
from __future__ import annotations

import struct

import numpy as np

F32 = np.dtype("<f4")


class FormatError(ValueError):
    pass


def write_header(fh, magic: bytes, fields) -> None:
    fh.write(magic)
    fh.write(struct.pack(f"<{len(fields)}I", *fields))


def read_header(fh, magic: bytes, count: int) -> tuple[int, ...]:
    got = fh.read(len(magic))
    if got != magic:
        raise FormatError(f"bad magic {got!r}, expected {magic!r}")
    raw = fh.read(4 * count)
    if len(raw) != 4 * count:
        raise FormatError("truncated header")
    return struct.unpack(f"<{count}I", raw)


def write_matrix(fh, a) -> None:
    fh.write(np.ascontiguousarray(a, dtype=F32).tobytes(order="C"))


def read_matrix(fh, shape) -> np.ndarray:
    n = int(np.prod(shape))
    raw = fh.read(4 * n)
    if len(raw) != 4 * n:
        raise FormatError(f"truncated matrix, expected {n} floats")
    return np.frombuffer(raw, dtype=F32).reshape(shape).astype(np.float32)
