"""Query execution: epoch selection, index lookup, key verification,
header decompression and packet reconstruction.

A query runs as a ``QueryTask`` whose ``step()`` performs one bounded unit
of work (one epoch's index lookup, or at most ``FLOWS_PER_STEP`` candidate
flows). All progress lives in plain picklable state, so a task can be
paused between any two steps, serialized, and resumed against the same
archive without redoing finished work.

Matching is per packet: a packet is returned when its timestamp lies in
the half-open time range and its flow key satisfies every predicate.
"""
from __future__ import annotations

import enum
import io
import queue
import time
from dataclasses import asdict, dataclass, field
from typing import Optional

from .errors import DataUnavailableError, UsageError
from .flow_index import IndexField, intersect
from .header_codec import CompressedHeaderBlock, decompress_headers
from .packet import LINKTYPE_ETHERNET, FlowKey, Packet, ip_to_int
from .payload import read_and_reassemble
from .pcap import PcapWriter, read_pcap
from .store import Archive, flow_location

FLOWS_PER_STEP = 256
US = 1_000_000


class Retrieval(enum.Enum):
    EXISTENCE = "exists"
    HEADERS = "headers"
    FULL = "full"


class QueryMode(enum.Enum):
    OFFLINE = "offline"
    ONLINE = "online"


@dataclass(frozen=True)
class TimeRange:
    """``entire``, the trailing ``last`` seconds, or ``[start, end)`` in trace seconds."""

    kind: str = "entire"
    seconds: Optional[float] = None
    start: Optional[float] = None
    end: Optional[float] = None

    def __post_init__(self):
        if self.kind not in ("entire", "last", "range"):
            raise ValueError(f"unknown time range kind {self.kind!r}")
        if self.kind == "last" and (self.seconds is None or self.seconds <= 0):
            raise ValueError("last:<seconds> needs a positive duration")
        if self.kind == "range" and (self.start is None or self.end is None or self.end < self.start):
            raise ValueError("range needs start <= end")

    @classmethod
    def entire(cls) -> "TimeRange":
        return cls()

    @classmethod
    def last(cls, seconds: float) -> "TimeRange":
        return cls("last", seconds=seconds)

    @classmethod
    def between(cls, start: float, end: float) -> "TimeRange":
        return cls("range", start=start, end=end)

    @classmethod
    def parse(cls, text: str) -> "TimeRange":
        t = text.strip().lower()
        if t == "entire":
            return cls.entire()
        if t.startswith("last:"):
            return cls.last(float(t[5:]))
        a, sep, b = t.partition(":")
        if not sep:
            raise ValueError(f"bad time range {text!r}; expected entire, last:<sec> or <t0>:<t1>")
        return cls.between(float(a), float(b))

    def resolve(self, newest_end_us: Optional[int]) -> tuple:
        """Microsecond bounds ``(t0, t1)``; ``None`` means unbounded."""
        if self.kind == "entire":
            return None, None
        if self.kind == "range":
            return round(self.start * US), round(self.end * US)
        if newest_end_us is None:
            return 0, 0
        return newest_end_us - round(self.seconds * US), newest_end_us

    def __str__(self):
        if self.kind == "entire":
            return "entire"
        if self.kind == "last":
            return f"last:{self.seconds:g}"
        return f"{self.start:g}:{self.end:g}"


def _ip(v):
    return None if v is None else ip_to_int(v)


@dataclass(frozen=True)
class Criteria:
    """Conjunction of flow-key predicates; ``None`` leaves a field unconstrained."""

    src_ip: Optional[int] = None
    dst_ip: Optional[int] = None
    any_ip: Optional[int] = None
    src_port: Optional[int] = None
    dst_port: Optional[int] = None
    any_port: Optional[int] = None
    protocol: Optional[int] = None

    def __post_init__(self):
        for name in ("src_ip", "dst_ip", "any_ip"):
            object.__setattr__(self, name, _ip(getattr(self, name)))
        for name, top in (("src_port", 0xFFFF), ("dst_port", 0xFFFF), ("any_port", 0xFFFF),
                          ("protocol", 0xFF)):
            v = getattr(self, name)
            if v is not None and not (isinstance(v, int) and 0 <= v <= top):
                raise ValueError(f"{name} must be an integer in 0..{top}, got {v!r}")

    def matches(self, key: FlowKey) -> bool:
        if self.src_ip is not None and key.src_ip != self.src_ip:
            return False
        if self.dst_ip is not None and key.dst_ip != self.dst_ip:
            return False
        if self.any_ip is not None and self.any_ip not in (key.src_ip, key.dst_ip):
            return False
        if self.src_port is not None and key.src_port != self.src_port:
            return False
        if self.dst_port is not None and key.dst_port != self.dst_port:
            return False
        if self.any_port is not None and self.any_port not in (key.src_port, key.dst_port):
            return False
        if self.protocol is not None and key.protocol != self.protocol:
            return False
        return True

    def index_lookups(self) -> list:
        """``(field, value)`` pairs an index can answer."""
        out = []
        for v in (self.src_ip, self.dst_ip, self.any_ip):
            if v is not None:
                out.append((IndexField.IP_ADDR, v))
        for v in (self.src_port, self.dst_port, self.any_port):
            if v is not None:
                out.append((IndexField.PORT, v))
        return out

    @property
    def empty(self) -> bool:
        return all(v is None for v in asdict(self).values())


@dataclass(frozen=True)
class Query:
    time_range: TimeRange = field(default_factory=TimeRange)
    criteria: Criteria = field(default_factory=Criteria)
    retrieval: Retrieval = Retrieval.HEADERS
    mode: QueryMode = QueryMode.OFFLINE
    exhaustive_count: bool = False   # existence queries: keep counting past the first match


@dataclass
class QueryStats:
    epochs_touched: int = 0
    index_lookups: int = 0
    candidates: int = 0
    false_positives: int = 0      # candidates whose stored key fails the criteria
    time_rejects: int = 0         # key matched but no packet lies in the range
    verified: int = 0             # key matched and stored time span meets the range
    blocks_read: int = 0
    blocks_decompressed: int = 0
    chunks_read: int = 0
    fast_bytes_read: int = 0
    bulk_bytes_read: int = 0
    full_scan: bool = False
    steps: int = 0
    wall_seconds: float = 0.0

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class QueryResult:
    exists: bool
    flow_count: int
    packet_count: int
    pcap: Optional[bytes]
    stats: QueryStats
    errors: list = field(default_factory=list)   # (flow location, message) per unreadable flow

    def packets(self) -> list:
        if self.pcap is None:
            return []
        it, _ = read_pcap(self.pcap)
        return list(it)


@dataclass(frozen=True)
class Snapshot:
    """Sealed epochs visible to a query, fixed when the query starts."""

    epochs: tuple
    newest_end_us: Optional[int]

    @classmethod
    def of(cls, archive: Archive) -> "Snapshot":
        sealed = archive.sealed_epochs()
        if not sealed:
            return cls((), None)
        return cls(tuple(sealed), (sealed[-1] + 1) * archive.config.epoch_us)


class QueryTask:
    """Resumable execution state of one query."""

    def __init__(self, engine: "QueryEngine", query: Query, snapshot: Optional[Snapshot] = None):
        self.query = query
        self.snapshot = snapshot or Snapshot.of(engine.archive)
        self.t0, self.t1 = query.time_range.resolve(self.snapshot.newest_end_us)
        self.epochs = [e for e in self.snapshot.epochs
                       if e in engine.archive.epochs
                       and engine.archive.epochs[e].overlaps(self.t0, self.t1)]
        self.lookups = query.criteria.index_lookups()
        self.stats = QueryStats(full_scan=not self.lookups and bool(self.epochs))
        self.epoch_pos = 0
        self.candidates: list = []
        self.cand_pos = 0
        self.scan_offset: Optional[int] = None   # log offset cursor during a scan
        self.records: list = []                  # (ts, seq, captured, original, bytes)
        self.flow_count = 0
        self.matched: list = []                  # locations of flows with matching packets
        self.found = False
        self.errors: list = []
        self.done = not self.epochs
        self._engine = engine

    def __getstate__(self):
        state = dict(self.__dict__)
        state["_engine"] = None
        return state

    def resume(self, engine: "QueryEngine") -> "QueryTask":
        self._engine = engine
        return self

    # ------------------------------------------------------------ stepping
    def step(self) -> bool:
        """Do one unit of work; return True once the query is complete."""
        if self.done:
            return True
        if self._engine is None:
            raise UsageError("query task must be resumed with an engine before stepping")
        t = time.perf_counter()
        self.stats.steps += 1
        archive = self._engine.archive
        epoch = self.epochs[self.epoch_pos]
        if self.lookups:
            if self.cand_pos == 0 and not self.candidates:
                self._lookup(archive, epoch)
                if not self.candidates:
                    self._next_epoch()
            else:
                self._verify_batch(archive)
        else:
            self._scan_batch(archive, epoch)
        self.stats.wall_seconds += time.perf_counter() - t
        return self.done

    def run(self) -> "QueryResult":
        while not self.step():
            pass
        return self.result()

    def _next_epoch(self) -> None:
        self.epoch_pos += 1
        self.candidates = []
        self.cand_pos = 0
        self.scan_offset = None
        if self.epoch_pos >= len(self.epochs):
            self.done = True

    def _stop_early(self) -> bool:
        q = self.query
        if q.retrieval is Retrieval.EXISTENCE and self.found and not q.exhaustive_count:
            self.done = True
            return True
        return False

    def _lookup(self, archive: Archive, epoch: int) -> None:
        self.stats.epochs_touched += 1
        lists = []
        for fld, value in self.lookups:
            try:
                idx = archive.load_index(epoch, fld)
            except DataUnavailableError as exc:
                self.errors.append((None, str(exc)))
                lists = []
                break
            self.stats.index_lookups += 1
            lists.append(idx.lookup(value))
        self.candidates = intersect(lists)
        self.stats.candidates += len(self.candidates)

    def _verify_batch(self, archive: Archive) -> None:
        end = min(self.cand_pos + FLOWS_PER_STEP, len(self.candidates))
        for i in range(self.cand_pos, end):
            self.cand_pos = i + 1
            self._examine(archive, self.candidates[i], None)
            if self._stop_early():
                return
        if self.cand_pos >= len(self.candidates):
            self._next_epoch()

    def _scan_batch(self, archive: Archive, epoch: int) -> None:
        if self.scan_offset is None:
            self.stats.epochs_touched += 1
            self.scan_offset = 0
        info = archive.epochs.get(epoch)
        if info is None:
            self.errors.append((None, f"epoch {epoch} was evicted during the query"))
            self._next_epoch()
            return
        n = 0
        while n < FLOWS_PER_STEP and self.scan_offset < info.log_bytes:
            loc = flow_location(info.log_no, self.scan_offset)
            raw = archive.read_header_block_bytes(loc)
            self.scan_offset += 8 + len(raw)
            self.stats.candidates += 1
            self._examine(archive, loc, raw)
            n += 1
            if self._stop_early():
                return
        if self.scan_offset >= info.log_bytes:
            self._next_epoch()

    def _examine(self, archive: Archive, loc: int, raw: Optional[bytes]) -> None:
        st = self.stats
        try:
            if raw is None:
                raw = archive.read_header_block_bytes(loc)
        except DataUnavailableError as exc:
            self.errors.append((loc, str(exc)))
            return
        st.blocks_read += 1
        st.fast_bytes_read += len(raw)
        block = CompressedHeaderBlock.from_bytes(raw, 0, loc)
        if not self.query.criteria.matches(block.key):
            st.false_positives += 1
            return
        t0, t1 = self.t0, self.t1
        if (t0 is not None and block.max_ts < t0) or (t1 is not None and block.min_ts >= t1):
            st.time_rejects += 1
            return
        st.verified += 1
        whole = (t0 is None or block.min_ts >= t0) and (t1 is None or block.max_ts < t1)
        if self.query.retrieval is Retrieval.EXISTENCE and whole:
            self._matched(loc)
            return
        st.blocks_decompressed += 1
        recs = decompress_headers(block, loc)
        keep = [r for r in recs if (t0 is None or r.ts_us >= t0) and (t1 is None or r.ts_us < t1)]
        if not keep:
            st.time_rejects += 1
            return
        if self.query.retrieval is Retrieval.EXISTENCE:
            self._matched(loc)
            return
        if self.query.retrieval is Retrieval.HEADERS:
            self.records.extend((r.ts_us, r.seq, len(r.header), r.original_len, r.header) for r in keep)
        else:
            try:
                payloads = read_and_reassemble(block.chunk_refs, [r.payload_len for r in recs], archive)
            except DataUnavailableError as exc:
                self.errors.append((loc, str(exc)))
                return
            st.chunks_read += len(block.chunk_refs)
            st.bulk_bytes_read += block.payload_bytes
            for r, pl in zip(recs, payloads):
                if (t0 is None or r.ts_us >= t0) and (t1 is None or r.ts_us < t1):
                    self.records.append((r.ts_us, r.seq, r.captured_len, r.original_len, r.header + pl))
        self._matched(loc)

    def _matched(self, loc: int) -> None:
        self.found = True
        self.flow_count += 1
        self.matched.append(loc)

    # ------------------------------------------------------------ output
    def result(self) -> QueryResult:
        if not self.done:
            raise UsageError("query task has not finished")
        q = self.query
        if q.retrieval is Retrieval.EXISTENCE:
            return QueryResult(self.found, self.flow_count, 0, None, self.stats, list(self.errors))
        link = LINKTYPE_ETHERNET
        if self._engine is not None:
            link = self._engine.archive.extra.get("link_type", LINKTYPE_ETHERNET)
        self.records.sort(key=lambda r: (r[0], r[1]))
        buf = io.BytesIO()
        w = PcapWriter(buf, link)
        for ts, _, captured, original, data in self.records:
            sec, frac = divmod(ts, US)
            w.write(Packet(sec, frac, captured, original, data))
        return QueryResult(self.flow_count > 0, self.flow_count, len(self.records), buf.getvalue(),
                           self.stats, list(self.errors))


class QueryEngine:
    def __init__(self, archive: Archive):
        self.archive = archive

    def start(self, query: Query, snapshot: Optional[Snapshot] = None) -> QueryTask:
        return QueryTask(self, query, snapshot)

    def execute(self, query: Query, snapshot: Optional[Snapshot] = None) -> QueryResult:
        return self.start(query, snapshot).run()

    def flow_lookup(self, query: Query, snapshot: Optional[Snapshot] = None) -> list:
        """Locations of every flow with at least one matching packet, ascending."""
        exhaustive = Query(query.time_range, query.criteria, Retrieval.EXISTENCE,
                           query.mode, exhaustive_count=True)
        task = self.start(exhaustive, snapshot)
        task.run()
        return sorted(task.matched)


@dataclass
class OnlineOutcome:
    snapshot: Snapshot
    result: QueryResult


def run_online(queries, recorder, feed, batch: int = 64) -> list:
    """Interleave query steps with recording of packets arriving from ``feed``.

    The consumer drains up to ``batch`` packets at a time from the feed's
    queue and runs a query step only when no packet is waiting, so query
    work never delays ingest. Queries run one after another; each sees the
    epochs sealed when it starts. Recording continues until the feed is
    exhausted.
    """
    engine = QueryEngine(recorder.archive)
    todo = list(queries)
    outcomes = []
    task = None
    pending = feed.queue
    while True:
        took = 0
        while took < batch:
            try:
                p = pending.get_nowait()
            except queue.Empty:
                break
            recorder.ingest(p)
            took += 1
        if took:
            continue
        if task is None and todo:
            task = engine.start(todo.pop(0))
        if task is not None:
            if task.step():
                outcomes.append(OnlineOutcome(task.snapshot, task.result()))
                task = None
            continue
        if feed.done.is_set() and pending.empty():
            break
        try:
            recorder.ingest(pending.get(timeout=0.01))
        except queue.Empty:
            pass
    return outcomes


def execute_online(query: Query, recorder, feed, batch: int = 64) -> QueryResult:
    """Run one query while recording; see ``run_online``."""
    return run_online([query], recorder, feed, batch)[0].result
