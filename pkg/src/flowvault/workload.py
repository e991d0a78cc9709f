"""Synthetic traces, storage cost arithmetic and dedup-window sweeps.

Payload models:

* ``re``: byte ``i`` of a payload is ``(i * r) mod 256`` with ``r`` drawn
  per packet from 0..255, so payloads repeat heavily across packets.
* ``nr``: uniformly random bytes; nothing repeats.
* ``dup``: ``nr`` traffic where a fraction of flows is replayed exactly
  ``dup_gap`` seconds later from a fresh source port. The generator records
  how many payload bytes were replayed.
"""
from __future__ import annotations

import csv
import io
import struct
from dataclasses import asdict, dataclass, field
from typing import Iterable, Optional

import numpy as np

from . import compression
from .chunking import ChunkingConfig, chunk_stream
from .grouper import FlowGrouper, GrouperConfig
from .packet import (
    LINKTYPE_ETHERNET, PROTO_TCP, PROTO_UDP, TCP_ACK, TCP_FIN, TCP_SYN, Packet,
    internet_checksum, parse_headers,
)
from .payload import ChunkIndex, assemble_payload_stream, chunk_digest, encode_chunk_record
from .pcap import write_pcap

US = 1_000_000
PAYLOAD_MODELS = ("re", "nr", "dup")
_ETH = struct.Struct("!6s6sH")
_IP = struct.Struct("!BBHHHBBHII")
_TCP = struct.Struct("!HHIIHHHH")
_UDP = struct.Struct("!HHHH")
_SERVER_PORTS = (80, 443, 53, 22, 25, 8080, 993, 3306, 5432, 123)
PROTO_ICMP = 1


@dataclass(frozen=True)
class TraceSpec:
    seed: int = 0
    duration: float = 60.0            # seconds over which flows start
    start_time: float = 0.0
    flow_rate: float = 50.0           # new flows per second
    mean_flow_packets: float = 12.0
    mean_gap: float = 0.05            # seconds between packets of a flow
    small_packet_frac: float = 0.39   # with SYN/FIN this puts the mean packet near 669 B
    payload_min: int = 860
    payload_max: int = 1460
    payload_model: str = "re"
    dup_fraction: float = 0.3
    dup_gap: float = 100.0
    hosts: int = 256
    tcp_frac: float = 0.8
    udp_frac: float = 0.15
    icmp_frac: float = 0.03           # the rest is non-IP
    bad_checksum_frac: float = 0.01

    def __post_init__(self):
        if self.payload_model not in PAYLOAD_MODELS:
            raise ValueError(f"payload_model must be one of {PAYLOAD_MODELS}")
        if self.duration <= 0 or self.flow_rate <= 0 or self.mean_flow_packets < 1:
            raise ValueError("duration, flow_rate must be positive and mean_flow_packets >= 1")
        if not 0 < self.payload_min <= self.payload_max <= 1460:
            raise ValueError("need 0 < payload_min <= payload_max <= 1460")
        if not 0 <= self.dup_fraction <= 1 or self.dup_gap < 0:
            raise ValueError("dup_fraction must be in [0, 1] and dup_gap >= 0")
        fr = (self.tcp_frac, self.udp_frac, self.icmp_frac)
        if min(fr) < 0 or sum(fr) > 1:
            raise ValueError("protocol fractions must be non-negative and sum to at most 1")
        if self.hosts < 2:
            raise ValueError("need at least two hosts")


@dataclass
class GeneratedTrace:
    packets: list
    link_type: int
    flows: int
    dup_flows: int = 0
    dup_payload_bytes: int = 0        # payload bytes that exactly repeat an earlier flow
    payload_bytes: int = 0

    def pcap(self) -> bytes:
        return write_pcap(self.packets, self.link_type)


def re_payload(n: int, r: int) -> bytes:
    return ((np.arange(n, dtype=np.uint32) * r) & 0xFF).astype(np.uint8).tobytes()


class _FlowPlan:
    __slots__ = ("kind", "src", "dst", "sport", "dport", "times", "payloads", "ttl", "ip_id", "isn")


def _mac(host: int) -> bytes:
    return b"\x02\x00" + host.to_bytes(4, "big")


def _ip_header(total_len, ip_id, ttl, proto, src, dst) -> bytes:
    head = _IP.pack(0x45, 0, total_len, ip_id & 0xFFFF, 0x4000, ttl, proto, 0, src, dst)
    return head[:10] + internet_checksum(head).to_bytes(2, "big") + head[12:]


def _transport_checksum(src, dst, proto, segment: bytes) -> int:
    pseudo = struct.pack("!IIBBH", src, dst, 0, proto, len(segment))
    c = internet_checksum(pseudo + segment)
    return c if proto == PROTO_TCP or c else 0xFFFF


def _build_packets(plan: _FlowPlan, rng, bad_frac: float) -> list:
    out = []
    eth = _ETH.pack(_mac(plan.dst), _mac(plan.src), 0x0800)
    n = len(plan.times)
    seq = plan.isn
    for i, (ts, pl) in enumerate(zip(plan.times, plan.payloads)):
        ip_id = plan.ip_id + i
        if plan.kind == "tcp":
            flags = TCP_ACK
            if i == 0:
                flags = TCP_SYN
            elif i == n - 1 and n > 2:
                flags = TCP_FIN | TCP_ACK
            elif pl:
                flags |= 0x08
            tcp = _TCP.pack(plan.sport, plan.dport, seq, 1 if i else 0, (5 << 12) | flags, 65535, 0, 0)
            c = _transport_checksum(plan.src, plan.dst, PROTO_TCP, tcp + pl)
            if rng.random() < bad_frac:
                c ^= 0x5A5A
            seg = tcp[:16] + c.to_bytes(2, "big") + tcp[18:] + pl
            seq = (seq + len(pl) + (1 if flags & (TCP_SYN | TCP_FIN) else 0)) & 0xFFFFFFFF
            data = eth + _ip_header(20 + len(seg), ip_id, plan.ttl, PROTO_TCP, plan.src, plan.dst) + seg
        elif plan.kind == "udp":
            udp = _UDP.pack(plan.sport, plan.dport, 8 + len(pl), 0)
            c = _transport_checksum(plan.src, plan.dst, PROTO_UDP, udp + pl)
            if rng.random() < bad_frac:
                c ^= 0x5A5A
            seg = udp[:6] + c.to_bytes(2, "big") + pl
            data = eth + _ip_header(20 + len(seg), ip_id, plan.ttl, PROTO_UDP, plan.src, plan.dst) + seg
        elif plan.kind == "icmp":
            icmp = bytes((8, 0, 0, 0)) + (plan.sport << 16 | i).to_bytes(4, "big") + pl
            icmp = icmp[:2] + internet_checksum(icmp).to_bytes(2, "big") + icmp[4:]
            data = eth + _ip_header(20 + len(icmp), ip_id, plan.ttl, PROTO_ICMP, plan.src, plan.dst) + icmp
        else:
            arp = bytes.fromhex("0001080006040001") + _mac(plan.src) + plan.src.to_bytes(4, "big") \
                + b"\x00" * 6 + plan.dst.to_bytes(4, "big")
            data = _ETH.pack(b"\xff" * 6, _mac(plan.src), 0x0806) + arp + pl
        out.append(Packet.build(data, ts))
    return out


def _payload(spec: TraceSpec, rng, size: int) -> bytes:
    if size == 0:
        return b""
    if spec.payload_model == "re":
        return re_payload(size, int(rng.integers(0, 256)))
    return rng.bytes(size)


def _plan_flow(spec: TraceSpec, rng, start_us: int) -> _FlowPlan:
    p = _FlowPlan()
    u = rng.random()
    if u < spec.tcp_frac:
        p.kind = "tcp"
    elif u < spec.tcp_frac + spec.udp_frac:
        p.kind = "udp"
    elif u < spec.tcp_frac + spec.udp_frac + spec.icmp_frac:
        p.kind = "icmp"
    else:
        p.kind = "arp"
    base = 0x0A000000
    p.src = base + int(rng.integers(1, spec.hosts + 1))
    p.dst = base + int(rng.integers(1, spec.hosts + 1))
    if p.dst == p.src:
        p.dst = base + (p.src - base) % spec.hosts + 1
    p.sport = int(rng.integers(1024, 65536))
    p.dport = int(_SERVER_PORTS[rng.integers(0, len(_SERVER_PORTS))])
    p.ttl = 64 if rng.random() < 0.9 else 128
    p.ip_id = int(rng.integers(0, 65536))
    p.isn = int(rng.integers(0, 1 << 32))
    n = int(rng.geometric(1.0 / spec.mean_flow_packets))
    if p.kind == "arp":
        n = min(n, 2)
    gaps = rng.exponential(spec.mean_gap, n - 1) if n > 1 else np.zeros(0)
    times = start_us + np.concatenate(([0], np.cumsum(np.round(gaps * US)))).astype(np.int64)
    p.times = [int(t) for t in times]
    sizes = []
    for i in range(n):
        if p.kind == "tcp" and (i == 0 or (i == n - 1 and n > 2)):
            sizes.append(0)
        elif p.kind == "arp":
            sizes.append(int(rng.integers(0, 18)))
        elif rng.random() < spec.small_packet_frac:
            sizes.append(0 if p.kind == "tcp" else int(rng.integers(8, 64)))
        else:
            sizes.append(int(rng.integers(spec.payload_min, spec.payload_max + 1)))
    if p.kind == "arp":
        p.payloads = [rng.bytes(s) for s in sizes]
    else:
        p.payloads = [_payload(spec, rng, s) for s in sizes]
    return p


def generate_packets(spec: TraceSpec) -> GeneratedTrace:
    """Deterministic trace for ``spec``; packets sorted by timestamp."""
    rng = np.random.default_rng(spec.seed)
    start = round(spec.start_time * US)
    n_flows = max(1, int(rng.poisson(spec.flow_rate * spec.duration)))
    starts = np.sort(rng.uniform(0, spec.duration, n_flows))
    plans = [_plan_flow(spec, rng, start + int(round(s * US))) for s in starts]

    dup_flows = 0
    dup_bytes = 0
    if spec.payload_model == "dup" and spec.dup_fraction > 0:
        eligible = [i for i, p in enumerate(plans) if p.kind in ("tcp", "udp") and any(p.payloads)]
        k = int(round(spec.dup_fraction * len(eligible)))
        chosen = sorted(rng.choice(len(eligible), size=k, replace=False).tolist()) if k else []
        gap = round(spec.dup_gap * US)
        for j in chosen:
            orig = plans[eligible[j]]
            c = _FlowPlan()
            c.kind, c.src, c.dst, c.dport, c.ttl = orig.kind, orig.src, orig.dst, orig.dport, orig.ttl
            c.sport = 1024 + (orig.sport - 1024 + 1 + int(rng.integers(0, 60000))) % 64512
            c.ip_id = int(rng.integers(0, 65536))
            c.isn = int(rng.integers(0, 1 << 32))
            c.times = [t + gap for t in orig.times]
            c.payloads = list(orig.payloads)
            plans.append(c)
            dup_flows += 1
            dup_bytes += sum(len(x) for x in c.payloads)

    tagged = []
    payload_bytes = 0
    for fi, plan in enumerate(plans):
        for pi, pkt in enumerate(_build_packets(plan, rng, spec.bad_checksum_frac)):
            tagged.append((pkt.ts_us, fi, pi, pkt))
        payload_bytes += sum(len(x) for x in plan.payloads)
    tagged.sort(key=lambda t: t[:3])
    return GeneratedTrace([t[3] for t in tagged], LINKTYPE_ETHERNET, len(plans), dup_flows,
                          dup_bytes, payload_bytes)


def generate_trace(spec: TraceSpec) -> bytes:
    """pcap bytes of the trace described by ``spec``."""
    return generate_packets(spec).pcap()


# ---------------------------------------------------------------- cost
GB = 1_000_000_000
CHUNK_INDEX_ENTRY_BYTES = 28   # 20-byte digest + 8-byte chunk location


@dataclass(frozen=True)
class CostModel:
    fast_price: float = 0.740     # $/GB
    bulk_price: float = 0.0467    # $/GB

    def __post_init__(self):
        if self.fast_price <= 0 or self.bulk_price <= 0:
            raise ValueError("prices must be positive")


def storage_cost(fast_bytes: float, bulk_bytes: float, cost_model: CostModel = CostModel()) -> float:
    """Dollars to hold the given bytes per tier (GB = 10**9 bytes)."""
    return fast_bytes / GB * cost_model.fast_price + bulk_bytes / GB * cost_model.bulk_price


def archive_cost(archive, cost_model: CostModel = CostModel()) -> float:
    fast, bulk = archive.tier_bytes()
    return storage_cost(fast, bulk, cost_model)


# ---------------------------------------------------------------- sweep
@dataclass
class ChunkEvents:
    """Chunks in the order a recorder would commit them."""

    config: ChunkingConfig
    slack: float = 0.0            # grouper idle timeout: how far commit times can trail
    now: list = field(default_factory=list)
    digest: list = field(default_factory=list)
    raw_len: list = field(default_factory=list)
    stored_len: list = field(default_factory=list)


def collect_chunk_events(packets: Iterable[Packet], config: ChunkingConfig, link_type: int = LINKTYPE_ETHERNET,
                         grouper: GrouperConfig = GrouperConfig(),
                         method: int = compression.DEFLATE) -> ChunkEvents:
    """Group, chunk and hash ``packets`` exactly as recording would."""
    ev = ChunkEvents(config, grouper.idle_timeout)
    g = FlowGrouper(grouper)

    def take(flows):
        for f in flows:
            stream, _ = assemble_payload_stream(f)
            for off, n in chunk_stream(stream, config):
                raw = stream[off:off + n]
                ev.now.append(f.last_ts)
                ev.digest.append(chunk_digest(raw))
                ev.raw_len.append(n)
                ev.stored_len.append(len(encode_chunk_record(raw, method)))

    for seq, p in enumerate(packets):
        take(g.ingest(p, parse_headers(p, link_type), seq))
    take(g.flush_all())
    return ev


@dataclass
class SweepRow:
    chunking: str
    window: float
    chunks: int
    raw_bytes: int
    dup_raw_bytes: int
    redundancy_raw_pct: float
    stored_bytes: int
    dup_stored_bytes: int
    redundancy_compressed_pct: float
    index_entries_peak: int
    cost: float


def replay_window(ev: ChunkEvents, window: float, cost_model: CostModel = CostModel()) -> SweepRow:
    idx = ChunkIndex(window, ev.slack)
    raw = dup_raw = stored = dup_stored = 0
    seen = object()
    for now, d, r, s in zip(ev.now, ev.digest, ev.raw_len, ev.stored_len):
        idx.expire(now)
        raw += r
        stored += s
        if idx.enabled and idx.get(d, now) is not None:
            dup_raw += r
            dup_stored += s
        else:
            idx.put(d, seen, now)
    kept = stored - dup_stored
    cost = storage_cost(idx.peak_entries * CHUNK_INDEX_ENTRY_BYTES, kept, cost_model)
    return SweepRow(str(ev.config), window, len(ev.now), raw, dup_raw,
                    100.0 * dup_raw / raw if raw else 0.0, stored, dup_stored,
                    100.0 * dup_stored / stored if stored else 0.0, idx.peak_entries, cost)


def dedup_window_sweep(packets, configs, windows, link_type: int = LINKTYPE_ETHERNET,
                       grouper: GrouperConfig = GrouperConfig(),
                       cost_model: CostModel = CostModel()) -> list:
    """One grouping/chunking pass per config, then a timestamped replay per window."""
    packets = list(packets)
    rows = []
    for cfg in configs:
        ev = collect_chunk_events(packets, cfg, link_type, grouper)
        for w in sorted(windows):
            rows.append(replay_window(ev, w, cost_model))
    return rows


_COLUMNS = ("chunking", "window", "chunks", "raw_bytes", "dup_raw_bytes", "redundancy_raw_pct",
            "stored_bytes", "dup_stored_bytes", "redundancy_compressed_pct", "index_entries_peak", "cost")


def _cells(row: SweepRow) -> list:
    d = asdict(row)
    out = []
    for k in _COLUMNS:
        v = d[k]
        if k in ("redundancy_raw_pct", "redundancy_compressed_pct"):
            out.append(f"{v:.2f}")
        elif k == "cost":
            out.append(f"{v:.6f}")
        elif k == "window":
            out.append(f"{v:g}")
        else:
            out.append(str(v))
    return out


def format_sweep(rows, fmt: str = "text") -> str:
    if fmt == "csv":
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(_COLUMNS)
        for r in rows:
            w.writerow(_cells(r))
        return buf.getvalue()
    table = [list(_COLUMNS)] + [_cells(r) for r in rows]
    widths = [max(len(row[i]) for row in table) for i in range(len(_COLUMNS))]
    lines = []
    for row in table:
        lines.append("  ".join(c.rjust(w) if j else c.ljust(w) for j, (c, w) in enumerate(zip(row, widths))))
    return "\n".join(lines) + "\n"
