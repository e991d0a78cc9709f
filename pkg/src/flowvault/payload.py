"""Flow payload streams, chunk deduplication and per-chunk compression.

Bulk-tier chunk record::

    u8  magic 0xC5
    uv  raw length
    uv  stored length
    u8  compressor id (0 stored, 1 deflate)
    ..  stored bytes

The chunk index backend is anything with ``get(digest)``,
``put(digest, location, now)`` and ``expire(now)``; ``ChunkIndex`` is the
in-memory default. Times are trace-time microseconds.
"""
from __future__ import annotations

import hashlib
import heapq
import threading
from dataclasses import dataclass
from typing import NamedTuple, Optional

from . import compression
from .chunking import ChunkingConfig, chunk_stream
from .errors import DataUnavailableError, IntegrityError
from .locations import ChunkLocation, ChunkRef
from .varint import get_uvarint, put_uvarint

CHUNK_MAGIC = 0xC5
DIGEST_SIZE = 20


def assemble_payload_stream(flow) -> tuple[bytes, list]:
    """Concatenate the flow's payloads; return the stream and per-packet lengths."""
    parts = []
    lengths = []
    for fp in flow.packets:
        piece = fp.packet.data[fp.header.payload_offset:]
        parts.append(piece)
        lengths.append(len(piece))
    return b"".join(parts), lengths


def split_payloads(stream: bytes, lengths) -> list:
    out = []
    pos = 0
    for n in lengths:
        out.append(stream[pos:pos + n])
        pos += n
    if pos != len(stream):
        raise IntegrityError(f"payload lengths cover {pos} bytes of a {len(stream)}-byte stream")
    return out


def chunk_digest(raw: bytes) -> bytes:
    return hashlib.sha1(raw).digest()


def encode_chunk_record(raw: bytes, method: int = compression.DEFLATE) -> bytes:
    codec, stored = compression.compress_best(raw, method)
    out = bytearray((CHUNK_MAGIC,))
    put_uvarint(out, len(raw))
    put_uvarint(out, len(stored))
    out.append(codec)
    out += stored
    return bytes(out)


def parse_chunk_record_header(buf, pos: int = 0) -> tuple[int, int, int, int]:
    """Return ``(raw_len, stored_len, codec, data_pos)`` of the record at ``pos``."""
    if pos >= len(buf) or buf[pos] != CHUNK_MAGIC:
        raise IntegrityError("bad chunk record magic")
    raw_len, pos = get_uvarint(buf, pos + 1)
    stored_len, pos = get_uvarint(buf, pos)
    if pos >= len(buf):
        raise IntegrityError("chunk record header truncated")
    return raw_len, stored_len, buf[pos], pos + 1


def decode_chunk_record(buf, pos: int = 0) -> tuple[bytes, int]:
    raw_len, stored_len, codec, data_pos = parse_chunk_record_header(buf, pos)
    end = data_pos + stored_len
    if end > len(buf):
        raise IntegrityError("chunk record truncated")
    return compression.decompress(bytes(buf[data_pos:end]), codec, raw_len), end


class PreparedChunk(NamedTuple):
    digest: bytes
    raw_len: int
    record: bytes

    @property
    def stored_len(self) -> int:
        return len(self.record)


def prepare_chunks(stream: bytes, config: ChunkingConfig,
                   method: int = compression.DEFLATE) -> list:
    """Chunk, hash and compress a payload stream; pure, safe to run in workers."""
    out = []
    for off, n in chunk_stream(stream, config):
        raw = stream[off:off + n]
        out.append(PreparedChunk(chunk_digest(raw), n, encode_chunk_record(raw, method)))
    return out


class ChunkIndex:
    """In-memory chunk index with trace-time expiry.

    An entry answers a lookup made at trace time ``now`` only while
    ``now - inserted <= window``; a hit does not refresh it. Flows reach
    the index in emission order rather than end-time order, so entries are
    physically dropped only once they are stale for every flow that can
    still arrive: ``slack`` bounds how far a later flow's time may trail
    the newest time seen. A window of zero or less disables deduplication.
    """

    def __init__(self, dedup_window: float, slack: float = 0.0):
        self.dedup_window = dedup_window
        self.window_us = round(dedup_window * 1_000_000)
        self.slack_us = round(slack * 1_000_000)
        self._map: dict = {}
        self._heap: list = []
        self._lock = threading.Lock()
        self._clock: Optional[int] = None
        self.peak_entries = 0

    @property
    def enabled(self) -> bool:
        return self.window_us > 0

    def __len__(self):
        return len(self._map)

    def __contains__(self, digest):
        return digest in self._map

    def get(self, digest: bytes, now: Optional[int] = None):
        """Location for ``digest``; with ``now``, only if the entry is still in the window."""
        entry = self._map.get(digest)
        if entry is None:
            return None
        if now is not None and now - entry[1] > self.window_us:
            return None
        return entry[0]

    def put(self, digest: bytes, location, now: int) -> None:
        if not self.enabled:
            return
        self._map[digest] = (location, now)
        heapq.heappush(self._heap, (now, digest))
        if len(self._map) > self.peak_entries:
            self.peak_entries = len(self._map)

    def lookup_or_insert(self, digest: bytes, make_location, now: int):
        """Atomic check-and-insert; returns ``(location, hit)``."""
        with self._lock:
            loc = self.get(digest, now) if self.enabled else None
            if loc is not None:
                return loc, True
            loc = make_location()
            self.put(digest, loc, now)
            return loc, False

    def expire(self, now: int) -> int:
        if self._clock is None or now > self._clock:
            self._clock = now
        cutoff = self._clock - self.window_us - self.slack_us
        heap, m = self._heap, self._map
        removed = 0
        while heap and heap[0][0] < cutoff:
            t, digest = heapq.heappop(heap)
            entry = m.get(digest)
            if entry is not None and entry[1] == t:
                del m[digest]
                removed += 1
        return removed

    def discard_segments(self, segment_ids) -> int:
        """Forget entries pointing into deleted bulk segments."""
        dead = [d for d, (loc, _) in self._map.items() if loc.segment_id in segment_ids]
        for d in dead:
            del self._map[d]
        return len(dead)


def expire_chunk_index(chunk_index, now: int) -> None:
    chunk_index.expire(now)


@dataclass
class DedupStats:
    chunks: int = 0
    raw_bytes: int = 0
    hits: int = 0
    hit_bytes: int = 0
    stored_chunks: int = 0
    stored_raw_bytes: int = 0
    stored_bytes: int = 0

    def add(self, other: "DedupStats") -> None:
        for k in self.__dataclass_fields__:
            setattr(self, k, getattr(self, k) + getattr(other, k))


def commit_chunks(prepared, chunk_index, bulk_store, now: int,
                  stats: Optional[DedupStats] = None) -> list:
    """Look each prepared chunk up in the index; append only the misses."""
    if chunk_index is not None:
        chunk_index.expire(now)
    refs = []
    for pc in prepared:
        if stats is not None:
            stats.chunks += 1
            stats.raw_bytes += pc.raw_len
        if chunk_index is not None and chunk_index.enabled:
            loc, hit = chunk_index.lookup_or_insert(
                pc.digest, lambda pc=pc: bulk_store.append_chunk(pc.record), now)
        else:
            loc, hit = bulk_store.append_chunk(pc.record), False
        if stats is not None:
            if hit:
                stats.hits += 1
                stats.hit_bytes += pc.raw_len
            else:
                stats.stored_chunks += 1
                stats.stored_raw_bytes += pc.raw_len
                stats.stored_bytes += pc.stored_len
        refs.append(ChunkRef(loc, pc.raw_len))
    return refs


def dedup_and_store(chunks, chunk_index, bulk_store, now: int,
                    method: int = compression.DEFLATE, stats: Optional[DedupStats] = None) -> list:
    """Deduplicate raw chunk byte strings against the index and store the new ones."""
    prepared = [PreparedChunk(chunk_digest(c), len(c), encode_chunk_record(c, method)) for c in chunks]
    return commit_chunks(prepared, chunk_index, bulk_store, now, stats)


def read_and_reassemble(refs, lengths, bulk_store) -> list:
    """Fetch and decompress the referenced chunks; split by per-packet lengths."""
    parts = []
    for ref in refs:
        raw = bulk_store.read_chunk(ref.location)
        if len(raw) != ref.raw_len:
            raise IntegrityError(f"chunk holds {len(raw)} bytes, reference expects {ref.raw_len}",
                                 ref.location)
        parts.append(raw)
    return split_payloads(b"".join(parts), lengths)


class MemoryBulkStore:
    """Single-segment bulk store kept in memory."""

    def __init__(self, segment_id: int = 0):
        self.segment_id = segment_id
        self.data = bytearray()
        self.evicted = False

    def append_chunk(self, record: bytes) -> ChunkLocation:
        loc = ChunkLocation(self.segment_id, len(self.data))
        self.data += record
        return loc

    def read_chunk(self, loc: ChunkLocation) -> bytes:
        if self.evicted or loc.segment_id != self.segment_id or loc.offset >= len(self.data):
            raise DataUnavailableError("chunk not available", loc)
        raw, _ = decode_chunk_record(self.data, loc.offset)
        return raw
