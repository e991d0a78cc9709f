"""Group an ordered packet stream into bounded-duration flows."""
from __future__ import annotations

import logging
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

from .packet import TCP_FIN, TCP_RST, FlowKey, Packet, ParseClass, ParsedHeader, extract_flow_key

log = logging.getLogger(__name__)

REGRESSION_TOLERANCE_US = 1_000_000


@dataclass(frozen=True)
class GrouperConfig:
    mfd: float = 300.0
    idle_timeout: float = 15.0
    max_buffered_bytes: int = 256 << 20

    def __post_init__(self):
        if not 0 < self.idle_timeout <= self.mfd:
            raise ValueError(f"need 0 < idle_timeout <= mfd, got {self.idle_timeout}, {self.mfd}")
        if self.max_buffered_bytes <= 0:
            raise ValueError("max_buffered_bytes must be positive")


class FlowPacket(NamedTuple):
    packet: Packet
    header: ParsedHeader
    seq: int  # ingest sequence number, breaks timestamp ties


@dataclass(slots=True)
class Flow:
    key: FlowKey
    packets: list = field(default_factory=list)

    @property
    def first_ts(self) -> int:
        return self.packets[0].packet.ts_us

    @property
    def last_ts(self) -> int:
        return self.packets[-1].packet.ts_us

    def __len__(self):
        return len(self.packets)


class _Buffer:
    __slots__ = ("key", "packets", "first_ts", "last_ts", "nbytes", "fin_seen")

    def __init__(self, key, ts):
        self.key = key
        self.packets = []
        self.first_ts = ts
        self.last_ts = ts
        self.nbytes = 0
        self.fin_seen = False


class FlowGrouper:
    """Buffers packets per 5-tuple and emits completed flows.

    A buffer is flushed when adding a packet would stretch it past the
    maximum flow duration, when it has been idle longer than the idle
    timeout, on TCP RST or the first non-FIN segment after a FIN, or when
    the byte cap forces the oldest buffer out.
    """

    def __init__(self, config: GrouperConfig = GrouperConfig()):
        self.config = config
        self._mfd = round(config.mfd * 1_000_000)
        self._idle = round(config.idle_timeout * 1_000_000)
        self._buffers: dict = {}            # creation order == first_ts order
        self._lru: OrderedDict = OrderedDict()  # last-activity order
        self._bytes = 0
        self._next_seq = 0
        self._high_ts: Optional[int] = None

    @property
    def buffered_bytes(self) -> int:
        return self._bytes

    def __len__(self):
        return len(self._buffers)

    def min_pending_ts(self) -> Optional[int]:
        """Last-activity time of the stalest open buffer."""
        if not self._lru:
            return None
        return self._buffers[next(iter(self._lru))].last_ts

    def ingest(self, packet: Packet, parsed: ParsedHeader, seq: Optional[int] = None) -> list:
        if seq is None:
            seq = self._next_seq
        self._next_seq = seq + 1
        ts = packet.ts_us
        if self._high_ts is not None and ts < self._high_ts - REGRESSION_TOLERANCE_US:
            log.warning("timestamp regressed by %.6f s at packet %d; keeping ingest order",
                        (self._high_ts - ts) / 1e6, seq)
        if self._high_ts is None or ts > self._high_ts:
            self._high_ts = ts

        done = []
        limit = ts - self._idle
        while self._lru:
            k = next(iter(self._lru))
            if self._buffers[k].last_ts >= limit:
                break
            done.append(self._pop(k))

        key = extract_flow_key(parsed)
        buf = self._buffers.get(key)
        if buf is not None and ts - buf.first_ts > self._mfd:
            done.append(self._pop(key))
            buf = None

        size = packet.captured_len
        cap = self.config.max_buffered_bytes
        if size > cap:
            if buf is not None:
                done.append(self._pop(key))
            done.append(Flow(key, [FlowPacket(packet, parsed, seq)]))
            return done
        while self._bytes + size > cap:
            oldest = next(iter(self._buffers))
            done.append(self._pop(oldest))
            if oldest == key:
                buf = None

        if buf is None:
            buf = _Buffer(key, ts)
            self._buffers[key] = buf
            self._lru[key] = None
        else:
            self._lru.move_to_end(key)
        buf.packets.append(FlowPacket(packet, parsed, seq))
        buf.last_ts = ts
        buf.nbytes += size
        self._bytes += size

        if parsed.parse_class is ParseClass.TCP:
            flags = parsed.tcp.flags
            if flags & TCP_RST or (buf.fin_seen and not flags & TCP_FIN):
                done.append(self._pop(key))
            elif flags & TCP_FIN:
                buf.fin_seen = True
        return done

    def flush_all(self) -> list:
        bufs = sorted(self._buffers.values(), key=lambda b: b.first_ts)
        flows = [Flow(b.key, b.packets) for b in bufs]
        self._buffers.clear()
        self._lru.clear()
        self._bytes = 0
        return flows

    def _pop(self, key) -> Flow:
        buf = self._buffers.pop(key)
        del self._lru[key]
        self._bytes -= buf.nbytes
        return Flow(buf.key, buf.packets)
