"""Dictionary compressors, identified by a one-byte id stored with the data."""
from __future__ import annotations

import zlib

from .errors import IntegrityError

STORED = 0
DEFLATE = 1

NAMES = {STORED: "stored", DEFLATE: "deflate"}

# Raw deflate stream, 32 KiB window, fixed level: identical input gives identical output.
_LEVEL = 6
_WBITS = -15


def compress(data: bytes, method: int = DEFLATE) -> bytes:
    if method == STORED:
        return bytes(data)
    if method == DEFLATE:
        c = zlib.compressobj(_LEVEL, zlib.DEFLATED, _WBITS)
        return c.compress(data) + c.flush()
    raise ValueError(f"unknown compressor id {method}")


def decompress(data: bytes, method: int, expected_len: int | None = None) -> bytes:
    if method == STORED:
        out = bytes(data)
    elif method == DEFLATE:
        try:
            out = zlib.decompress(data, _WBITS)
        except zlib.error as exc:
            raise IntegrityError(f"deflate stream corrupt: {exc}") from None
    else:
        raise IntegrityError(f"unknown compressor id {method}")
    if expected_len is not None and len(out) != expected_len:
        raise IntegrityError(f"decompressed {len(out)} bytes, expected {expected_len}")
    return out


def compress_best(data: bytes, method: int = DEFLATE) -> tuple[int, bytes]:
    """Compress with ``method`` unless that expands the data; then store it."""
    if method != STORED and data:
        packed = compress(data, method)
        if len(packed) < len(data):
            return method, packed
    return STORED, bytes(data)
