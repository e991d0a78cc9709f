"""Unsigned LEB128 varints and zigzag mapping for signed deltas."""
from __future__ import annotations

import numpy as np

from .errors import IntegrityError


def zigzag(n: int) -> int:
    return (n << 1) if n >= 0 else ((-n) << 1) - 1


def unzigzag(z: int) -> int:
    return (z >> 1) if not z & 1 else -((z + 1) >> 1)


def put_uvarint(out: bytearray, value: int) -> None:
    if value < 0:
        raise ValueError(f"uvarint cannot encode negative value {value}")
    while value > 0x7F:
        out.append((value & 0x7F) | 0x80)
        value >>= 7
    out.append(value)


def put_svarint(out: bytearray, value: int) -> None:
    put_uvarint(out, zigzag(value))


def uvarint(value: int) -> bytes:
    out = bytearray()
    put_uvarint(out, value)
    return bytes(out)


def get_uvarint(buf, pos: int) -> tuple[int, int]:
    """Decode one varint at ``pos``; return ``(value, next_pos)``."""
    result = 0
    shift = 0
    n = len(buf)
    while True:
        if pos >= n:
            raise IntegrityError("truncated varint")
        b = buf[pos]
        pos += 1
        result |= (b & 0x7F) << shift
        if b < 0x80:
            return result, pos
        shift += 7
        if shift > 70:
            raise IntegrityError("varint too long")


def get_svarint(buf, pos: int) -> tuple[int, int]:
    z, pos = get_uvarint(buf, pos)
    return unzigzag(z), pos


def decode_uvarints(buf) -> np.ndarray:
    """Decode a buffer holding only back-to-back varints (each < 2**63)."""
    arr = np.frombuffer(bytes(buf), dtype=np.uint8)
    if arr.size == 0:
        return np.zeros(0, dtype=np.uint64)
    if arr[-1] >= 0x80:
        raise IntegrityError("truncated varint sequence")
    ends = np.flatnonzero(arr < 0x80)
    starts = np.empty_like(ends)
    starts[0] = 0
    starts[1:] = ends[:-1] + 1
    if int((ends - starts).max()) > 8:
        raise IntegrityError("varint too long for 64-bit decode")
    group = np.repeat(np.arange(ends.size), ends - starts + 1)
    shift = (np.arange(arr.size) - starts[group]).astype(np.uint64) * np.uint64(7)
    parts = (arr & 0x7F).astype(np.uint64) << shift
    return np.bitwise_or.reduceat(parts, starts)
