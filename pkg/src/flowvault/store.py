"""Two-tier append-only archive: header logs and indexes on the fast tier,
payload chunk segments on the bulk tier.

Directory layout::

    <fast>/manifest                       JSON, replaced atomically
    <fast>/headers/epoch_<id>.log         header blocks of flows indexed in epoch <id>
    <fast>/index/epoch_<id>.<ip|port>.idx sealed epoch indexes
    <bulk>/chunks/seg_<id>.dat            chunk records

Header log file::

    4   magic b"FVHL"
    u8  format version (1)
    3   zero
    u32 log number (the high bits of every flow location in this file)
    u64 epoch id
    then records: u32 block length, u32 crc32 of the block, block bytes

Chunk segment file::

    4   magic b"FVCS"
    u8  format version (1)
    u8  chunk compressor id
    2   zero
    u64 segment id
    then chunk records (see ``payload``); chunk offsets count from the end
    of this 16-byte header.

A flow location is ``(log number << 40) | offset``, where offset counts
record bytes from the end of the log file header. Offsets grow in append
order, which keeps per-epoch index postings dense.

All integers are little-endian. Sealed files are never modified; the
manifest is the only mutable object and is swapped in with a rename after
the files it lists have been flushed to disk.
"""
from __future__ import annotations

import errno
import json
import logging
import os
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterator, Optional

from . import compression
from .chunking import ChunkingConfig
from .errors import DataUnavailableError, IntegrityError, StorageError, UsageError
from .flow_index import HASH_FNV1A64, EpochIndex, EpochIndexBuilder, IndexField
from .header_codec import CompressedHeaderBlock
from .locations import ChunkLocation
from .payload import decode_chunk_record, parse_chunk_record_header

log = logging.getLogger(__name__)

FORMAT_VERSION = 1
MANIFEST = "manifest"
LOG_MAGIC = b"FVHL"
SEGMENT_MAGIC = b"FVCS"
_LOG_HEADER = struct.Struct("<4sB3xIQ")
_SEG_HEADER = struct.Struct("<4sBB2xQ")
_FRAME = struct.Struct("<II")

LOCATION_OFFSET_BITS = 40
_OFFSET_MASK = (1 << LOCATION_OFFSET_BITS) - 1


def flow_location(log_no: int, offset: int) -> int:
    if offset > _OFFSET_MASK:
        raise StorageError(f"header log {log_no} exceeds {_OFFSET_MASK} bytes")
    return (log_no << LOCATION_OFFSET_BITS) | offset


def split_flow_location(loc: int) -> tuple[int, int]:
    return loc >> LOCATION_OFFSET_BITS, loc & _OFFSET_MASK


@dataclass
class ArchiveConfig:
    epoch_length: float = 60.0
    chunking: ChunkingConfig = field(default_factory=ChunkingConfig.cdc)
    dedup_window: float = 10_000.0
    compressor: int = compression.DEFLATE

    def __post_init__(self):
        if self.epoch_length <= 0:
            raise ValueError("epoch_length must be positive")
        if self.compressor not in compression.NAMES:
            raise ValueError(f"unknown compressor id {self.compressor}")

    @property
    def epoch_us(self) -> int:
        return round(self.epoch_length * 1_000_000)

    def to_dict(self) -> dict:
        return {"epoch_length": self.epoch_length, "chunking": self.chunking.to_dict(),
                "dedup_window": self.dedup_window, "compressor": self.compressor}

    @classmethod
    def from_dict(cls, d: dict) -> "ArchiveConfig":
        return cls(d["epoch_length"], ChunkingConfig.from_dict(d["chunking"]),
                   d["dedup_window"], d["compressor"])


@dataclass
class EpochInfo:
    epoch_id: int
    log_no: int
    flows: int = 0
    packets: int = 0
    min_ts: Optional[int] = None
    max_ts: Optional[int] = None
    log_bytes: int = 0
    index_bytes: dict = field(default_factory=dict)

    def overlaps(self, t0: Optional[int], t1: Optional[int]) -> bool:
        """True if [min_ts, max_ts] meets the half-open range [t0, t1)."""
        if self.flows == 0:
            return False
        if t0 is not None and self.max_ts < t0:
            return False
        if t1 is not None and self.min_ts >= t1:
            return False
        return True

    def to_dict(self) -> dict:
        return dict(self.__dict__)

    @classmethod
    def from_dict(cls, d: dict) -> "EpochInfo":
        return cls(**d)


@dataclass
class SegmentInfo:
    segment_id: int
    write_epoch: int      # first unsealed epoch when the segment was opened
    horizon: int = -1     # newest epoch of any flow referencing a chunk in it
    size: int = 0

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass
class EvictionReport:
    epochs: list = field(default_factory=list)
    segments: list = field(default_factory=list)
    fast_bytes: int = 0
    bulk_bytes: int = 0


class _OpenEpoch:
    __slots__ = ("info", "fh", "ip", "port")

    def __init__(self, info, fh, base):
        self.info = info
        self.fh = fh
        self.ip = EpochIndexBuilder(info.epoch_id, IndexField.IP_ADDR, base)
        self.port = EpochIndexBuilder(info.epoch_id, IndexField.PORT, base)


def _fsync_dir(path: Path) -> None:
    try:
        fd = os.open(path, os.O_RDONLY)
    except OSError:
        return
    try:
        os.fsync(fd)
    except OSError:
        pass
    finally:
        os.close(fd)


def _storage_error(exc: OSError, what: str) -> StorageError:
    if exc.errno in (errno.ENOSPC, errno.EDQUOT):
        return StorageError(f"storage full while writing {what}; free space with `flowvault evict`")
    return StorageError(f"cannot write {what}: {exc}")


class Archive:
    """An archive directory pair, open for reading or for recording."""

    def __init__(self, fast_dir, bulk_dir, config: ArchiveConfig, manifest: dict, writable: bool):
        self.fast_dir = Path(fast_dir)
        self.bulk_dir = Path(bulk_dir)
        self.config = config
        self.writable = writable
        self.fault_hook: Optional[Callable[[str], None]] = None
        self.epochs: dict = {int(k): EpochInfo.from_dict(v) for k, v in manifest.get("epochs", {}).items()}
        self.segments: dict = {int(k): SegmentInfo(**v) for k, v in manifest.get("segments", {}).items()}
        self.sealed_through: Optional[int] = manifest.get("sealed_through")
        self.next_log_no: int = manifest.get("next_log_no", 0)
        self.next_segment_id: int = manifest.get("next_segment_id", 0)
        self.stats: dict = manifest.get("stats", {})
        self.extra: dict = manifest.get("extra", {})
        self._log_epoch = {e.log_no: e.epoch_id for e in self.epochs.values()}
        self._open: dict = {}
        self._readers: dict = {}
        self._seg_readers: dict = {}
        self._index_cache: dict = {}
        self._seg = None          # (SegmentInfo, file handle) being appended to
        self._closed = False

    # ------------------------------------------------------------ lifecycle
    @classmethod
    def create(cls, fast_dir, bulk_dir=None, config: Optional[ArchiveConfig] = None) -> "Archive":
        fast = Path(fast_dir)
        bulk = Path(bulk_dir) if bulk_dir is not None else fast
        if (fast / MANIFEST).exists():
            raise UsageError(f"archive already exists at {fast}")
        for d in (fast / "headers", fast / "index", bulk / "chunks"):
            d.mkdir(parents=True, exist_ok=True)
        config = config or ArchiveConfig()
        arc = cls(fast, bulk, config, {}, writable=True)
        arc._write_manifest()
        return arc

    @classmethod
    def open(cls, fast_dir, bulk_dir=None, writable: bool = False) -> "Archive":
        fast = Path(fast_dir)
        try:
            manifest = json.loads((fast / MANIFEST).read_text())
        except FileNotFoundError:
            raise UsageError(f"no archive at {fast}") from None
        except (ValueError, UnicodeDecodeError) as exc:
            raise IntegrityError(f"archive manifest unreadable: {exc}") from None
        if manifest.get("format_version") != FORMAT_VERSION:
            raise IntegrityError(f"unsupported archive format {manifest.get('format_version')}")
        if manifest.get("hash_id") != HASH_FNV1A64:
            raise IntegrityError(f"archive indexes use unknown hash id {manifest.get('hash_id')}")
        if bulk_dir is None:
            bulk_dir = manifest.get("bulk_dir") or fast
            if not Path(bulk_dir).is_absolute():
                bulk_dir = fast / bulk_dir
        arc = cls(fast, bulk_dir, ArchiveConfig.from_dict(manifest["config"]), manifest, writable)
        if writable:
            arc._discard_unsealed()
        return arc

    def _discard_unsealed(self) -> None:
        """Drop files left by an interrupted run that the manifest never recorded."""
        known_logs = {f"epoch_{e}.log" for e in self.epochs}
        for p in (self.fast_dir / "headers").glob("epoch_*.log"):
            if p.name not in known_logs:
                p.unlink()
        known_idx = {f"epoch_{e}.{f}.idx" for e in self.epochs for f in ("ip", "port")}
        for p in (self.fast_dir / "index").glob("*"):
            if p.name not in known_idx:
                p.unlink()
        top = self.next_segment_id
        for p in (self.bulk_dir / "chunks").glob("seg_*.dat"):
            sid = int(p.stem[4:])
            if sid not in self.segments:
                p.unlink()
            top = max(top, sid + 1)
        self.next_segment_id = top

    def close(self) -> None:
        if self._closed:
            return
        self._closed = True
        for oe in self._open.values():
            oe.fh.close()
        self._open.clear()
        if self._seg is not None:
            self._seg[1].close()
            self._seg = None
        for fh in list(self._readers.values()) + list(self._seg_readers.values()):
            fh.close()
        self._readers.clear()
        self._seg_readers.clear()

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()

    def _fault(self, point: str) -> None:
        if self.fault_hook is not None:
            self.fault_hook(point)

    def _require_writable(self):
        if not self.writable or self._closed:
            raise UsageError("archive is not open for recording")

    # ------------------------------------------------------------ manifest
    def manifest(self) -> dict:
        return {
            "format_version": FORMAT_VERSION,
            "hash_id": HASH_FNV1A64,
            "config": self.config.to_dict(),
            "bulk_dir": str(self.bulk_dir.resolve()) if self.bulk_dir != self.fast_dir else "",
            "sealed_through": self.sealed_through,
            "next_log_no": self.next_log_no,
            "next_segment_id": self.next_segment_id,
            "epochs": {str(k): v.to_dict() for k, v in sorted(self.epochs.items())},
            "segments": {str(k): v.to_dict() for k, v in sorted(self.segments.items())},
            "stats": self.stats,
            "extra": self.extra,
        }

    def _write_manifest(self) -> None:
        path = self.fast_dir / MANIFEST
        tmp = path.with_name(MANIFEST + ".tmp")
        data = json.dumps(self.manifest(), indent=1, sort_keys=True).encode()
        try:
            with open(tmp, "wb") as fh:
                fh.write(data)
                fh.flush()
                os.fsync(fh.fileno())
            self._fault("manifest-before-rename")
            os.replace(tmp, path)
        except OSError as exc:
            raise _storage_error(exc, "manifest") from None
        _fsync_dir(self.fast_dir)

    def save(self) -> None:
        self._write_manifest()

    # ------------------------------------------------------------ epochs
    def _log_path(self, epoch_id: int) -> Path:
        return self.fast_dir / "headers" / f"epoch_{epoch_id}.log"

    def _index_path(self, epoch_id: int, fld: IndexField) -> Path:
        return self.fast_dir / "index" / f"epoch_{epoch_id}.{fld.tag}.idx"

    def is_sealed(self, epoch_id: int) -> bool:
        return self.sealed_through is not None and epoch_id < self.sealed_through

    def sealed_epochs(self) -> list:
        return sorted(e for e in self.epochs if self.is_sealed(e))

    def _open_epoch(self, epoch_id: int) -> _OpenEpoch:
        oe = self._open.get(epoch_id)
        if oe is not None:
            return oe
        if self.is_sealed(epoch_id):
            raise UsageError(f"epoch {epoch_id} is already sealed")
        log_no = self.next_log_no
        self.next_log_no += 1
        info = EpochInfo(epoch_id, log_no)
        try:
            fh = open(self._log_path(epoch_id), "wb")
            fh.write(_LOG_HEADER.pack(LOG_MAGIC, FORMAT_VERSION, log_no, epoch_id))
        except OSError as exc:
            raise _storage_error(exc, "header log") from None
        oe = self._open[epoch_id] = _OpenEpoch(info, fh, flow_location(log_no, 0))
        self._log_epoch[log_no] = epoch_id
        return oe

    def append_header_block(self, epoch_id: int, block: CompressedHeaderBlock) -> int:
        """Append a flow's header block to its epoch log, index it, return its location."""
        self._require_writable()
        oe = self._open_epoch(epoch_id)
        data = block.to_bytes()
        info = oe.info
        loc = flow_location(info.log_no, info.log_bytes)
        try:
            oe.fh.write(_FRAME.pack(len(data), zlib.crc32(data)))
            oe.fh.write(data)
        except OSError as exc:
            raise _storage_error(exc, "header log") from None
        self._fault("header-append")
        info.log_bytes += _FRAME.size + len(data)
        info.flows += 1
        info.packets += block.packet_count
        info.min_ts = block.min_ts if info.min_ts is None else min(info.min_ts, block.min_ts)
        info.max_ts = block.max_ts if info.max_ts is None else max(info.max_ts, block.max_ts)
        oe.ip.insert_flow(block.key, loc)
        oe.port.insert_flow(block.key, loc)
        for ref in block.chunk_refs:
            seg = self.segments.get(ref.location.segment_id)
            if seg is not None and seg.horizon < epoch_id:
                seg.horizon = epoch_id
        return loc

    def seal_epoch(self, epoch_id: int) -> Optional[EpochInfo]:
        """Persist the epoch's log and indexes, then record it in the manifest.

        Epochs are sealed in increasing order; an epoch without flows only
        advances the sealed watermark.
        """
        self._require_writable()
        if self.sealed_through is not None and epoch_id < self.sealed_through:
            raise UsageError(f"epoch {epoch_id} is already sealed")
        for e in sorted(self._open):
            if e < epoch_id:
                raise UsageError(f"epoch {e} must be sealed before epoch {epoch_id}")
        oe = self._open.pop(epoch_id, None)
        info = None
        try:
            self._rotate_segment()
            if oe is not None:
                info = oe.info
                oe.fh.flush()
                os.fsync(oe.fh.fileno())
                oe.fh.close()
                self._fault("log-synced")
                for b in (oe.ip, oe.port):
                    idx = b.seal()
                    path = self._index_path(epoch_id, b.field)
                    tmp = path.with_suffix(".tmp")
                    with open(tmp, "wb") as fh:
                        fh.write(idx.to_bytes())
                        fh.flush()
                        os.fsync(fh.fileno())
                    os.replace(tmp, path)
                    info.index_bytes[b.field.tag] = idx.nbytes
                    self._index_cache[(epoch_id, b.field)] = idx
                    self._fault("index-written")
                _fsync_dir(self.fast_dir / "index")
                _fsync_dir(self.fast_dir / "headers")
                self.epochs[epoch_id] = info
        except OSError as exc:
            raise _storage_error(exc, f"epoch {epoch_id}") from None
        self.sealed_through = epoch_id + 1
        self._write_manifest()
        self._fault("epoch-sealed")
        return info

    def open_epochs(self) -> list:
        return sorted(self._open)

    # ------------------------------------------------------------ header reads
    def _log_reader(self, log_no: int):
        fh = self._readers.get(log_no)
        if fh is None:
            epoch_id = self._log_epoch.get(log_no)
            if epoch_id is None or (epoch_id not in self.epochs and epoch_id not in self._open):
                raise DataUnavailableError(f"header log {log_no} is not in the archive")
            oe = self._open.get(epoch_id)
            if oe is not None:
                oe.fh.flush()
            try:
                fh = open(self._log_path(epoch_id), "rb")
            except FileNotFoundError:
                raise DataUnavailableError(f"header log for epoch {epoch_id} is missing") from None
            head = fh.read(_LOG_HEADER.size)
            if len(head) < _LOG_HEADER.size:
                fh.close()
                raise IntegrityError(f"header log for epoch {epoch_id} truncated")
            magic, version, no, _ = _LOG_HEADER.unpack(head)
            if magic != LOG_MAGIC or version != FORMAT_VERSION or no != log_no:
                fh.close()
                raise IntegrityError(f"header log for epoch {epoch_id} has a bad file header")
            self._readers[log_no] = fh
        return fh

    def read_header_block_bytes(self, loc: int) -> bytes:
        log_no, offset = split_flow_location(loc)
        fh = self._log_reader(log_no)
        fh.seek(_LOG_HEADER.size + offset)
        frame = fh.read(_FRAME.size)
        if len(frame) < _FRAME.size:
            raise IntegrityError("flow location past end of header log", loc)
        n, crc = _FRAME.unpack(frame)
        data = fh.read(n)
        if len(data) != n:
            raise IntegrityError("header block truncated", loc)
        if zlib.crc32(data) != crc:
            raise IntegrityError("header block checksum mismatch", loc)
        return data

    def read_header_block(self, loc: int) -> CompressedHeaderBlock:
        return CompressedHeaderBlock.from_bytes(self.read_header_block_bytes(loc), 0, loc)

    def iter_epoch_blocks(self, epoch_id: int) -> Iterator[tuple]:
        """Every ``(location, block)`` of an epoch, in log order."""
        info = self.epochs.get(epoch_id)
        if info is None:
            oe = self._open.get(epoch_id)
            if oe is None:
                return
            info = oe.info
        offset = 0
        while offset < info.log_bytes:
            loc = flow_location(info.log_no, offset)
            data = self.read_header_block_bytes(loc)
            yield loc, CompressedHeaderBlock.from_bytes(data, 0, loc)
            offset += _FRAME.size + len(data)

    def epoch_of_location(self, loc: int) -> Optional[int]:
        return self._log_epoch.get(split_flow_location(loc)[0])

    def load_index(self, epoch_id: int, fld: IndexField) -> EpochIndex:
        key = (epoch_id, fld)
        idx = self._index_cache.get(key)
        if idx is None:
            if epoch_id not in self.epochs:
                raise DataUnavailableError(f"epoch {epoch_id} is not in the archive")
            try:
                raw = self._index_path(epoch_id, fld).read_bytes()
            except FileNotFoundError:
                raise IntegrityError(f"index file for epoch {epoch_id} ({fld.tag}) is missing") from None
            idx = EpochIndex.from_bytes(raw)
            if idx.epoch_id != epoch_id or idx.field != fld:
                raise IntegrityError(f"index file for epoch {epoch_id} ({fld.tag}) is mislabeled")
            if len(self._index_cache) > 256:
                self._index_cache.clear()
            self._index_cache[key] = idx
        return idx

    # ------------------------------------------------------------ chunks
    def _seg_path(self, segment_id: int) -> Path:
        return self.bulk_dir / "chunks" / f"seg_{segment_id}.dat"

    def _rotate_segment(self) -> None:
        if self._seg is None:
            return
        info, fh = self._seg
        fh.flush()
        os.fsync(fh.fileno())
        fh.close()
        self._seg = None
        _fsync_dir(self.bulk_dir / "chunks")
        self._fault("segment-closed")

    def _current_segment(self):
        if self._seg is None:
            sid = self.next_segment_id
            self.next_segment_id += 1
            write_epoch = self.sealed_through if self.sealed_through is not None else -1
            info = SegmentInfo(sid, write_epoch)
            try:
                fh = open(self._seg_path(sid), "wb")
                fh.write(_SEG_HEADER.pack(SEGMENT_MAGIC, FORMAT_VERSION, self.config.compressor, sid))
            except OSError as exc:
                raise _storage_error(exc, "chunk segment") from None
            self.segments[sid] = info
            self._seg = (info, fh)
        return self._seg

    def append_chunk(self, record: bytes) -> ChunkLocation:
        self._require_writable()
        info, fh = self._current_segment()
        loc = ChunkLocation(info.segment_id, info.size)
        try:
            fh.write(record)
        except OSError as exc:
            raise _storage_error(exc, "chunk segment") from None
        info.size += len(record)
        self._fault("chunk-append")
        return loc

    def _seg_reader(self, segment_id: int):
        fh = self._seg_readers.get(segment_id)
        if fh is None:
            if segment_id not in self.segments:
                raise DataUnavailableError(f"chunk segment {segment_id} has been evicted")
            if self._seg is not None and self._seg[0].segment_id == segment_id:
                self._seg[1].flush()
            try:
                fh = open(self._seg_path(segment_id), "rb")
            except FileNotFoundError:
                raise DataUnavailableError(f"chunk segment {segment_id} is missing") from None
            head = fh.read(_SEG_HEADER.size)
            if len(head) < _SEG_HEADER.size:
                fh.close()
                raise IntegrityError(f"chunk segment {segment_id} truncated")
            magic, version, _, sid = _SEG_HEADER.unpack(head)
            if magic != SEGMENT_MAGIC or version != FORMAT_VERSION or sid != segment_id:
                fh.close()
                raise IntegrityError(f"chunk segment {segment_id} has a bad file header")
            self._seg_readers[segment_id] = fh
        elif self._seg is not None and self._seg[0].segment_id == segment_id:
            self._seg[1].flush()
        return fh

    def read_chunk_record(self, loc: ChunkLocation) -> bytes:
        fh = self._seg_reader(loc.segment_id)
        size = self.segments[loc.segment_id].size
        if loc.offset >= size:
            raise IntegrityError(f"chunk offset {loc.offset} past end of segment", loc)
        fh.seek(_SEG_HEADER.size + loc.offset)
        head = fh.read(min(24, size - loc.offset))
        try:
            raw_len, stored_len, codec, data_pos = parse_chunk_record_header(head)
        except IntegrityError as exc:
            raise IntegrityError(str(exc), loc) from None
        total = data_pos + stored_len
        if loc.offset + total > size:
            raise IntegrityError("chunk record runs past end of segment", loc)
        if total > len(head):
            head += fh.read(total - len(head))
        return head[:total]

    def read_chunk(self, loc: ChunkLocation) -> bytes:
        record = self.read_chunk_record(loc)
        try:
            raw, _ = decode_chunk_record(record)
        except IntegrityError as exc:
            raise IntegrityError(str(exc), loc) from None
        return raw

    # ------------------------------------------------------------ eviction
    def evict_oldest(self, retain_until: int, honor_horizons: bool = True) -> EvictionReport:
        """Remove every sealed epoch with id < ``retain_until``.

        A bulk segment goes with them once no retained flow can reference
        it: its reference horizon is older than ``retain_until``. With
        ``honor_horizons=False`` segments are dropped by the epoch they were
        written in instead, which can leave retained flows with dangling
        chunk references; reads of those raise ``DataUnavailableError``.
        """
        rep = EvictionReport()
        victims = [e for e in self.sealed_epochs() if e < retain_until]
        for e in victims:
            info = self.epochs.pop(e)
            self._drop_reader(info.log_no)
            for fld in IndexField:
                self._index_cache.pop((e, fld), None)
            rep.epochs.append(e)
            rep.fast_bytes += _LOG_HEADER.size + info.log_bytes + sum(info.index_bytes.values())
        current = self._seg[0].segment_id if self._seg is not None else None
        for sid, seg in sorted(self.segments.items()):
            if sid == current:
                continue
            mark = seg.horizon if honor_horizons else seg.write_epoch
            if mark < retain_until and self._segment_sealed(seg):
                rep.segments.append(sid)
                rep.bulk_bytes += _SEG_HEADER.size + seg.size
        for sid in rep.segments:
            del self.segments[sid]
            fh = self._seg_readers.pop(sid, None)
            if fh is not None:
                fh.close()
        if rep.epochs or rep.segments:
            self._write_manifest()
        # Files go only after the manifest stops listing them.
        for e in rep.epochs:
            for p in (self._log_path(e), self._index_path(e, IndexField.IP_ADDR),
                      self._index_path(e, IndexField.PORT)):
                p.unlink(missing_ok=True)
        for sid in rep.segments:
            self._seg_path(sid).unlink(missing_ok=True)
        return rep

    def _segment_sealed(self, seg: SegmentInfo) -> bool:
        # A segment written while its epoch was still open may hold chunks of
        # flows that are not yet committed; leave it until that epoch seals.
        return self.sealed_through is not None and seg.write_epoch < self.sealed_through

    def _drop_reader(self, log_no: int) -> None:
        fh = self._readers.pop(log_no, None)
        if fh is not None:
            fh.close()

    # ------------------------------------------------------------ accounting
    def tier_bytes(self) -> tuple[int, int]:
        """On-disk bytes of (fast tier, bulk tier) for live data."""
        fast = 0
        for info in self.epochs.values():
            fast += _LOG_HEADER.size + info.log_bytes + sum(info.index_bytes.values())
        for oe in self._open.values():
            fast += _LOG_HEADER.size + oe.info.log_bytes
        bulk = sum(_SEG_HEADER.size + s.size for s in self.segments.values())
        return fast, bulk

    def index_bytes(self) -> int:
        return sum(sum(i.index_bytes.values()) for i in self.epochs.values())

    def total_flows(self) -> int:
        return sum(i.flows for i in self.epochs.values())

    def total_packets(self) -> int:
        return sum(i.packets for i in self.epochs.values())
