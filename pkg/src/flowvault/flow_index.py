"""Per-epoch bucket-hashed flow indexes with delta-coded posting lists.

Serialized epoch index (little-endian)::

    4   magic b"FVIX"
    u8  format version (1)
    u8  field (1 = IP address, 2 = port)
    u8  hash id (1 = FNV-1a 64)
    u64 epoch id
    u64 location base (postings are stored relative to it)
    8192 presence bitmap, bit b set when bucket b is non-empty (LSB first)
    per non-empty bucket in ascending order:
        uv  entry count
        uv  first location, then gaps to each following location
"""
from __future__ import annotations

import enum
import struct
from collections import defaultdict
from typing import Iterable

import numpy as np

from .errors import IntegrityError, UsageError
from .varint import decode_uvarints, put_uvarint

BUCKETS = 65536
HASH_FNV1A64 = 1
INDEX_MAGIC = b"FVIX"
INDEX_VERSION = 1
_HEADER = struct.Struct("<4sBBBQQ")
_BITMAP_BYTES = BUCKETS // 8

FNV64_OFFSET = 0xCBF29CE484222325
FNV64_PRIME = 0x100000001B3


class IndexField(enum.IntEnum):
    IP_ADDR = 1
    PORT = 2

    @property
    def tag(self) -> str:
        return "ip" if self is IndexField.IP_ADDR else "port"


def fnv1a64(data: bytes) -> int:
    h = FNV64_OFFSET
    for b in data:
        h = ((h ^ b) * FNV64_PRIME) & 0xFFFFFFFFFFFFFFFF
    return h


def value_bytes(field: IndexField, value: int) -> bytes:
    return value.to_bytes(4 if field is IndexField.IP_ADDR else 2, "big")


def bucket_of(field: IndexField, value: int) -> int:
    return fnv1a64(value_bytes(field, value)) % BUCKETS


class EpochIndexBuilder:
    """Collects flow locations per bucket for one epoch and one field."""

    def __init__(self, epoch_id: int, field: IndexField, base: int = 0):
        self.epoch_id = epoch_id
        self.field = IndexField(field)
        self.base = base
        self._buckets = defaultdict(list)
        self._bucket_cache = {}
        self.sealed = False

    def insert(self, value: int, location: int) -> None:
        if self.sealed:
            raise UsageError(f"epoch {self.epoch_id} {self.field.tag} index is sealed")
        rel = location - self.base
        if rel < 0:
            raise ValueError(f"location {location} precedes epoch base {self.base}")
        b = self._bucket_cache.get(value)
        if b is None:
            b = self._bucket_cache[value] = bucket_of(self.field, value)
        self._buckets[b].append(rel)

    def insert_flow(self, key, location: int) -> None:
        if self.field is IndexField.IP_ADDR:
            a, b = key.src_ip, key.dst_ip
        else:
            a, b = key.src_port, key.dst_port
        self.insert(a, location)
        if b != a:
            self.insert(b, location)

    def seal(self) -> "EpochIndex":
        if self.sealed:
            raise UsageError(f"epoch {self.epoch_id} {self.field.tag} index is sealed")
        self.sealed = True
        bitmap = bytearray(_BITMAP_BYTES)
        body = bytearray()
        for b in sorted(self._buckets):
            locs = sorted(set(self._buckets[b]))
            bitmap[b >> 3] |= 1 << (b & 7)
            put_uvarint(body, len(locs))
            prev = 0
            for loc in locs:
                put_uvarint(body, loc - prev)
                prev = loc
        self._buckets = None
        self._bucket_cache = None
        head = _HEADER.pack(INDEX_MAGIC, INDEX_VERSION, self.field, HASH_FNV1A64, self.epoch_id, self.base)
        return EpochIndex.from_bytes(head + bytes(bitmap) + bytes(body))


class EpochIndex:
    """Sealed, immutable index; lookups decode a single bucket."""

    def __init__(self, epoch_id, field, base, raw, buckets, starts, counts, values):
        self.epoch_id = epoch_id
        self.field = field
        self.base = base
        self._raw = raw
        self._buckets = buckets   # sorted non-empty bucket ids
        self._starts = starts     # index of the first gap in ``values``
        self._counts = counts
        self._values = values
        self._slot = dict(zip(buckets.tolist(), range(len(buckets))))

    @classmethod
    def from_bytes(cls, raw: bytes) -> "EpochIndex":
        if len(raw) < _HEADER.size + _BITMAP_BYTES:
            raise IntegrityError("epoch index truncated")
        magic, version, field, hash_id, epoch_id, base = _HEADER.unpack_from(raw)
        if magic != INDEX_MAGIC or version != INDEX_VERSION:
            raise IntegrityError("bad epoch index header")
        if hash_id != HASH_FNV1A64:
            raise IntegrityError(f"epoch index built with unknown hash id {hash_id}")
        bitmap = np.frombuffer(raw, dtype=np.uint8, count=_BITMAP_BYTES, offset=_HEADER.size)
        buckets = np.flatnonzero(np.unpackbits(bitmap, bitorder="little"))
        values = decode_uvarints(raw[_HEADER.size + _BITMAP_BYTES:])
        starts = np.empty(buckets.size, dtype=np.int64)
        counts = np.empty(buckets.size, dtype=np.int64)
        pos = 0
        vals = values.tolist() if buckets.size else []
        for i in range(buckets.size):
            if pos >= len(vals):
                raise IntegrityError("epoch index bucket list truncated")
            c = vals[pos]
            starts[i] = pos + 1
            counts[i] = c
            pos += 1 + c
        if pos != len(vals):
            raise IntegrityError("epoch index has trailing or missing postings")
        return cls(epoch_id, IndexField(field), base, bytes(raw), buckets, starts, counts, values)

    def to_bytes(self) -> bytes:
        return self._raw

    @property
    def nbytes(self) -> int:
        return len(self._raw)

    @property
    def entry_count(self) -> int:
        return int(self._counts.sum())

    def lookup_bucket(self, bucket: int) -> list:
        i = self._slot.get(bucket)
        if i is None:
            return []
        s = self._starts[i]
        gaps = self._values[s:s + self._counts[i]]
        return (np.cumsum(gaps, dtype=np.uint64) + np.uint64(self.base)).tolist()

    def lookup(self, value: int) -> list:
        """Candidate locations for ``value``: no false negatives, maybe false positives."""
        return self.lookup_bucket(bucket_of(self.field, value))

    def all_locations(self) -> list:
        """Every location stored in any bucket, ascending and unique."""
        if not self._buckets.size:
            return []
        counts = self._counts
        total = int(counts.sum())
        first = np.cumsum(counts) - counts
        idx = np.repeat(self._starts - first, counts) + np.arange(total)
        gaps = self._values[idx]
        cs = np.cumsum(gaps, dtype=np.uint64)
        seg_base = np.repeat(cs[first] - gaps[first], counts)
        return np.unique(cs - seg_base + np.uint64(self.base)).tolist()


def index_insert(builder: EpochIndexBuilder, value: int, flow_location: int) -> None:
    builder.insert(value, flow_location)


def seal_epoch(builder: EpochIndexBuilder) -> EpochIndex:
    return builder.seal()


def index_lookup(index: EpochIndex, value: int) -> list:
    return index.lookup(value)


def intersect(lists: Iterable) -> list:
    """Sorted intersection of ascending location lists."""
    lists = [l for l in lists]
    if not lists:
        return []
    lists.sort(key=len)
    acc = set(lists[0])
    for l in lists[1:]:
        if not acc:
            break
        acc.intersection_update(l)
    return sorted(acc)
