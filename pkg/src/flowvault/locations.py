"""Addresses of stored data in the two tiers."""
from __future__ import annotations

from typing import NamedTuple

_OFFSET_BITS = 40
_OFFSET_MASK = (1 << _OFFSET_BITS) - 1
MAX_SEGMENT_ID = (1 << (64 - _OFFSET_BITS)) - 1


class ChunkLocation(NamedTuple):
    segment_id: int
    offset: int  # bytes after the segment file header

    def pack(self) -> bytes:
        return self.to_int().to_bytes(8, "little")

    def to_int(self) -> int:
        if not (0 <= self.segment_id <= MAX_SEGMENT_ID and 0 <= self.offset <= _OFFSET_MASK):
            raise ValueError(f"chunk location out of range: {self}")
        return (self.segment_id << _OFFSET_BITS) | self.offset

    @classmethod
    def from_int(cls, v: int) -> "ChunkLocation":
        return cls(v >> _OFFSET_BITS, v & _OFFSET_MASK)

    @classmethod
    def unpack(cls, buf, pos: int = 0) -> "ChunkLocation":
        return cls.from_int(int.from_bytes(buf[pos:pos + 8], "little"))

    def __str__(self):
        return f"seg{self.segment_id}+{self.offset}"


class ChunkRef(NamedTuple):
    location: ChunkLocation
    raw_len: int
