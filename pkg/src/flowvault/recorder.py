"""Recording pipeline: parse, group, compress, deduplicate, commit, seal.

The calling thread owns grouping, epoch assignment, the chunk index and
every archive write. Header compression and payload chunking/compression
of a flow are pure functions of the flow and run on worker threads when
``workers > 1``; results are committed strictly in flow emission order, so
the archive content does not depend on worker scheduling.
"""
from __future__ import annotations

import logging
import os
import queue
import threading
import time
from collections import deque
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Iterable, Optional

from .grouper import Flow, FlowGrouper, GrouperConfig
from .header_codec import compress_headers
from .packet import LINKTYPE_ETHERNET, Packet, parse_headers
from .payload import ChunkIndex, DedupStats, assemble_payload_stream, commit_chunks, prepare_chunks
from .pcap import read_pcap
from .store import Archive, ArchiveConfig

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class PipelineConfig:
    workers: int = 1
    queue_depth: int = 64
    grouper: GrouperConfig = field(default_factory=GrouperConfig)

    def __post_init__(self):
        if self.workers < 1:
            raise ValueError("workers must be at least 1")
        if self.queue_depth < 1:
            raise ValueError("queue_depth must be at least 1")


@dataclass
class RecordReport:
    packets: int = 0
    flows: int = 0
    epochs_sealed: int = 0
    input_bytes: int = 0          # pcap record headers + captured bytes
    raw_header_bytes: int = 0     # pcap record headers + packet header bytes
    payload_bytes: int = 0
    header_block_bytes: int = 0
    chunks: int = 0
    dedup_hits: int = 0
    dedup_hit_bytes: int = 0
    stored_chunks: int = 0
    stored_chunk_bytes: int = 0
    fast_bytes: int = 0
    bulk_bytes: int = 0
    index_bytes: int = 0
    chunk_index_peak: int = 0
    parse_seconds: float = 0.0
    group_seconds: float = 0.0
    compress_seconds: float = 0.0
    commit_seconds: float = 0.0
    seal_seconds: float = 0.0
    wall_seconds: float = 0.0

    @property
    def throughput_pps(self) -> float:
        return self.packets / self.wall_seconds if self.wall_seconds > 0 else 0.0

    @property
    def throughput_gbps(self) -> float:
        return self.input_bytes * 8 / self.wall_seconds / 1e9 if self.wall_seconds > 0 else 0.0

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "RecordReport":
        known = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**known)

    def merge(self, other: "RecordReport") -> None:
        for k in self.__dataclass_fields__:
            setattr(self, k, getattr(self, k) + getattr(other, k))


def _prepare(flow: Flow, chunking, compressor):
    t = time.perf_counter()
    block = compress_headers(flow, compressor)
    stream, _ = assemble_payload_stream(flow)
    chunks = prepare_chunks(stream, chunking, compressor)
    return block, chunks, len(stream), time.perf_counter() - t


class Recorder:
    """Feeds packets into an archive opened for recording."""

    def __init__(self, archive: Archive, config: PipelineConfig = PipelineConfig(),
                 link_type: int = LINKTYPE_ETHERNET):
        if not archive.writable:
            raise ValueError("archive must be opened for recording")
        self.archive = archive
        self.config = config
        self.link_type = link_type
        self.grouper = FlowGrouper(config.grouper)
        self.chunk_index = ChunkIndex(archive.config.dedup_window, config.grouper.idle_timeout)
        self.report = RecordReport()
        self.dedup = DedupStats()
        self._epoch_us = archive.config.epoch_us
        self._first_unsealed: Optional[int] = archive.sealed_through
        self._seq = archive.extra.get("next_seq", 0)
        self._pending: deque = deque()
        self._pool = ThreadPoolExecutor(config.workers) if config.workers > 1 else None
        self._max_pending = config.workers * config.queue_depth
        self._t0 = time.perf_counter()
        self._finished = False
        self.last_ts: Optional[int] = None
        archive.extra.setdefault("link_type", link_type)
        if archive.extra["link_type"] != link_type:
            raise ValueError(f"archive holds link type {archive.extra['link_type']}, input is {link_type}")

    # ------------------------------------------------------------ ingest
    def ingest(self, packet: Packet) -> None:
        t = time.perf_counter()
        parsed = parse_headers(packet, self.link_type)
        t1 = time.perf_counter()
        seq = self._seq
        self._seq += 1
        rep = self.report
        rep.packets += 1
        rep.input_bytes += 16 + packet.captured_len
        rep.raw_header_bytes += 16 + parsed.payload_offset
        rep.payload_bytes += packet.captured_len - parsed.payload_offset
        flows = self.grouper.ingest(packet, parsed, seq)
        rep.parse_seconds += t1 - t
        rep.group_seconds += time.perf_counter() - t1
        ts = packet.ts_us
        self.last_ts = ts
        if self._first_unsealed is None:
            self._first_unsealed = ts // self._epoch_us
        for f in flows:
            self._emit(f)
        if ts >= (self._first_unsealed + 1) * self._epoch_us:
            pending = self.grouper.min_pending_ts()
            self._seal_through(ts if pending is None else min(ts, pending))

    def ingest_many(self, packets: Iterable[Packet]) -> None:
        for p in packets:
            self.ingest(p)

    def epoch_for(self, flow: Flow) -> int:
        """Epoch indexing the flow: the one containing its end, unless already sealed."""
        return max(flow.last_ts // self._epoch_us, self._first_unsealed)

    def _emit(self, flow: Flow) -> None:
        epoch = self.epoch_for(flow)
        cfg = self.archive.config
        if self._pool is not None:
            job = self._pool.submit(_prepare, flow, cfg.chunking, cfg.compressor)
        else:
            job = _prepare(flow, cfg.chunking, cfg.compressor)
        self._pending.append((flow, epoch, job))
        while len(self._pending) > self._max_pending:
            self._commit_one()

    def _commit_one(self) -> None:
        flow, epoch, job = self._pending.popleft()
        block, chunks, _, spent = job.result() if self._pool is not None else job
        t = time.perf_counter()
        stats = DedupStats()
        block.chunk_refs = commit_chunks(chunks, self.chunk_index, self.archive, flow.last_ts, stats)
        self.archive.append_header_block(epoch, block)
        rep = self.report
        rep.flows += 1
        rep.compress_seconds += spent
        rep.header_block_bytes += len(block.to_bytes())
        rep.chunks += stats.chunks
        rep.dedup_hits += stats.hits
        rep.dedup_hit_bytes += stats.hit_bytes
        rep.stored_chunks += stats.stored_chunks
        rep.stored_chunk_bytes += stats.stored_bytes
        self.dedup.add(stats)
        rep.commit_seconds += time.perf_counter() - t

    def drain(self) -> None:
        while self._pending:
            self._commit_one()

    def _seal_through(self, watermark: int) -> None:
        target = watermark // self._epoch_us
        if target <= self._first_unsealed:
            return
        self.drain()
        t = time.perf_counter()
        for k in self.archive.open_epochs():
            if k < target:
                self.archive.seal_epoch(k)
                self.report.epochs_sealed += 1
        self._first_unsealed = target
        self.archive.sealed_through = target
        self.report.seal_seconds += time.perf_counter() - t

    # ------------------------------------------------------------ finish
    def finish(self) -> RecordReport:
        """Flush every open flow, seal all remaining epochs and persist the report."""
        if self._finished:
            return self.report
        self._finished = True
        for f in self.grouper.flush_all():
            self._emit(f)
        self.drain()
        open_epochs = self.archive.open_epochs()
        if open_epochs:
            self._seal_through((open_epochs[-1] + 1) * self._epoch_us)
        if self._pool is not None:
            self._pool.shutdown()
        rep = self.report
        rep.wall_seconds = time.perf_counter() - self._t0
        rep.chunk_index_peak = self.chunk_index.peak_entries
        prior = RecordReport.from_dict(self.archive.stats) if self.archive.stats else RecordReport()
        prior.merge(rep)
        prior.fast_bytes, prior.bulk_bytes = self.archive.tier_bytes()
        prior.index_bytes = self.archive.index_bytes()
        prior.chunk_index_peak = max(self.archive.stats.get("chunk_index_peak", 0), rep.chunk_index_peak)
        rep.fast_bytes, rep.bulk_bytes, rep.index_bytes = prior.fast_bytes, prior.bulk_bytes, prior.index_bytes
        self.archive.stats = prior.to_dict()
        self.archive.extra["next_seq"] = self._seq
        self.archive.save()
        return rep

    def abort(self) -> None:
        if self._pool is not None:
            self._pool.shutdown(cancel_futures=True)

    def evict_oldest(self, retain_until: int, honor_horizons: bool = True):
        """Evict while recording; forgets chunk index entries into deleted segments."""
        self.drain()
        rep = self.archive.evict_oldest(retain_until, honor_horizons)
        if rep.segments:
            self.chunk_index.discard_segments(set(rep.segments))
        return rep


def record(source, fast_dir, bulk_dir=None, archive_config: Optional[ArchiveConfig] = None,
           config: PipelineConfig = PipelineConfig()) -> tuple[Archive, RecordReport]:
    """Record a pcap (path, bytes or binary stream) into a new archive."""
    if isinstance(source, (str, os.PathLike)):
        with open(source, "rb") as fh:
            return record(fh, fast_dir, bulk_dir, archive_config, config)
    packets, link_type = read_pcap(source)
    archive = Archive.create(fast_dir, bulk_dir, archive_config)
    rec = Recorder(archive, config, link_type)
    try:
        rec.ingest_many(packets)
        report = rec.finish()
    except BaseException:
        rec.abort()
        archive.close()
        raise
    return archive, report


# ---------------------------------------------------------------- online harness
class PacedFeed:
    """Producer thread that offers packets at a fixed rate into a bounded queue.

    A packet that finds the queue full is dropped and counted, which is how
    a capture ring behaves when the consumer falls behind.
    """

    def __init__(self, packets, rate_pps: float, capacity: int = 4096):
        self.packets = list(packets)
        self.rate = rate_pps
        self.queue: queue.Queue = queue.Queue(capacity)
        self.dropped = 0
        self.offered = 0
        self.done = threading.Event()
        self._thread = threading.Thread(target=self._run, daemon=True)

    def start(self) -> "PacedFeed":
        self._thread.start()
        return self

    def _run(self) -> None:
        interval = 1.0 / self.rate
        start = time.perf_counter()
        for i, p in enumerate(self.packets):
            due = start + i * interval
            delay = due - time.perf_counter()
            if delay > 0:
                time.sleep(delay)
            self.offered += 1
            try:
                self.queue.put_nowait(p)
            except queue.Full:
                self.dropped += 1
        self.done.set()

    def join(self) -> None:
        self._thread.join()


def measure_ingest_rate(packets, archive_factory, config: PipelineConfig = PipelineConfig(),
                        link_type: int = LINKTYPE_ETHERNET) -> float:
    """Packets per second the recorder sustains on ``packets`` with no pacing."""
    archive = archive_factory()
    rec = Recorder(archive, config, link_type)
    t = time.perf_counter()
    rec.ingest_many(packets)
    rec.finish()
    spent = time.perf_counter() - t
    archive.close()
    return len(packets) / spent if spent > 0 else float("inf")
