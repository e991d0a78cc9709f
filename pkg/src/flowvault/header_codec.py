"""Lossless per-flow header compression.

Each packet header is reduced to residuals against predictions made from
the same packet (IP length from the capture length, valid checksums) and
from the previous packet of the flow (IP id, TCP sequence/ack/window,
unchanged fields). Residuals are laid out column by column and the whole
residual stream is deflated. Any field that misses its prediction is kept
as a literal, so arbitrary input round-trips byte for byte.

Block layout (little-endian where fixed width)::

    u8  magic 0xB7
    u8  format version (1)
    u8  residual compressor id (0 stored, 1 deflate)
    13  flow key (src u32, dst u32, proto u8, sport u16, dport u16; network order)
    uv  packet count
    uv  first timestamp, microseconds
    uv  first timestamp - earliest timestamp
    uv  latest timestamp - first timestamp
    uv  ingest sequence number of the first packet
    uv  chunk reference count, then per ref: u64 location, uv raw length
    uv  residual byte count, then the residual bytes

The residual stream is 14 columns, each a uvarint length followed by its
bytes, in the order of ``_COLUMNS``.
"""
from __future__ import annotations

import enum
import struct
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

from . import compression
from .errors import IntegrityError
from .locations import ChunkLocation, ChunkRef
from .packet import (
    FLOW_KEY_SIZE, TCP_FIN, TCP_SYN, FlowKey, IPv4Fields, ParseClass, TCPFields, UDPFields,
    ip_header_checksum, transport_header_checksum,
)
from .varint import get_svarint, get_uvarint, put_svarint, put_uvarint

BLOCK_MAGIC = 0xB7
BLOCK_VERSION = 1

_COLUMNS = ("cls", "mask", "ts", "seq", "plen", "olen", "link", "ipid",
            "tseq", "tack", "twin", "csum", "misc", "raw")
(C_CLS, C_MASK, C_TS, C_SEQ, C_PLEN, C_OLEN, C_LINK, C_IPID,
 C_TSEQ, C_TACK, C_TWIN, C_CSUM, C_MISC, C_RAW) = range(len(_COLUMNS))

# Per-packet miss mask; the most common misses sit in the low seven bits.
M_TCSUM = 1 << 0     # transport checksum predicted (set = not stored)
M_TSEQ = 1 << 1
M_TACK = 1 << 2
M_TWIN = 1 << 3
M_TFLAGS = 1 << 4
M_IPID = 1 << 5
M_TOTLEN = 1 << 6
M_OLEN = 1 << 7
M_LINK = 1 << 8
M_TTL = 1 << 9
M_IPCSUM = 1 << 10   # IP checksum stored literally
M_TOPT = 1 << 11
M_FRAG = 1 << 12
M_TOS = 1 << 13
M_VERIHL = 1 << 14
M_IPOPT = 1 << 15
M_PROTO = 1 << 16
M_SRC = 1 << 17
M_DST = 1 << 18
M_SPORT = 1 << 19
M_DPORT = 1 << 20
M_URG = 1 << 21
M_ULEN = 1 << 22

_DEFAULT_VERIHL = 0x45
_DEFAULT_FRAG = 0x4000   # DF
_DEFAULT_TTL = 64
_DEFAULT_TWORD = 0x5010  # data offset 5, ACK


class Mode(enum.Enum):
    PREDICTED_OK = "predicted"
    DELTA = "delta"
    LITERAL = "literal"


class ResidualField(NamedTuple):
    packet: int
    field_id: str
    mode: Mode
    value: object


class HeaderRecord(NamedTuple):
    """One decoded header with its capture metadata."""

    ts_us: int
    seq: int
    captured_len: int
    original_len: int
    header: bytes
    payload_len: int

    @property
    def ts_sec(self) -> int:
        return self.ts_us // 1_000_000

    @property
    def ts_frac(self) -> int:
        return self.ts_us % 1_000_000


@dataclass
class CompressedHeaderBlock:
    key: FlowKey
    packet_count: int
    first_ts: int
    min_ts: int
    max_ts: int
    first_seq: int
    codec: int
    encoded: bytes
    chunk_refs: list = field(default_factory=list)

    def to_bytes(self) -> bytes:
        out = bytearray((BLOCK_MAGIC, BLOCK_VERSION, self.codec))
        out += self.key.pack()
        put_uvarint(out, self.packet_count)
        put_uvarint(out, self.first_ts)
        put_uvarint(out, self.first_ts - self.min_ts)
        put_uvarint(out, self.max_ts - self.first_ts)
        put_uvarint(out, self.first_seq)
        put_uvarint(out, len(self.chunk_refs))
        for ref in self.chunk_refs:
            out += ref.location.pack()
            put_uvarint(out, ref.raw_len)
        put_uvarint(out, len(self.encoded))
        out += self.encoded
        return bytes(out)

    @classmethod
    def from_bytes(cls, buf, pos: int = 0, location=None) -> "CompressedHeaderBlock":
        try:
            if buf[pos] != BLOCK_MAGIC:
                raise IntegrityError("bad header block magic", location)
            if buf[pos + 1] != BLOCK_VERSION:
                raise IntegrityError(f"unsupported header block version {buf[pos + 1]}", location)
            codec = buf[pos + 2]
            pos += 3
            key = FlowKey.unpack(buf, pos)
            pos += FLOW_KEY_SIZE
            count, pos = get_uvarint(buf, pos)
            first_ts, pos = get_uvarint(buf, pos)
            back, pos = get_uvarint(buf, pos)
            fwd, pos = get_uvarint(buf, pos)
            first_seq, pos = get_uvarint(buf, pos)
            nrefs, pos = get_uvarint(buf, pos)
            refs = []
            for _ in range(nrefs):
                loc = ChunkLocation.unpack(buf, pos)
                raw_len, pos = get_uvarint(buf, pos + 8)
                refs.append(ChunkRef(loc, raw_len))
            n, pos = get_uvarint(buf, pos)
            encoded = bytes(buf[pos:pos + n])
            if len(encoded) != n:
                raise IntegrityError("header block residuals truncated", location)
        except IntegrityError as exc:
            if exc.location is None and location is not None:
                raise IntegrityError(str(exc), location) from None
            raise
        except (IndexError, ValueError, struct.error) as exc:
            raise IntegrityError(f"header block unreadable: {exc}", location) from None
        return cls(key, count, first_ts, first_ts - back, first_ts + fwd, first_seq, codec,
                   encoded, refs)

    @property
    def payload_bytes(self) -> int:
        return sum(r.raw_len for r in self.chunk_refs)


def _s16(x: int) -> int:
    return ((x + 0x8000) & 0xFFFF) - 0x8000


def _s32(x: int) -> int:
    return ((x + 0x80000000) & 0xFFFFFFFF) - 0x80000000


class _State:
    """Previous-packet context shared by encoder and decoder."""

    __slots__ = ("link", "verihl", "tos", "ipid", "frag", "ttl", "ipopt",
                 "next_seq", "ack", "tword", "win", "topt")

    def __init__(self):
        self.link = None
        self.verihl = _DEFAULT_VERIHL
        self.tos = 0
        self.ipid = 0xFFFF  # first packet predicts id 0
        self.frag = _DEFAULT_FRAG
        self.ttl = _DEFAULT_TTL
        self.ipopt = b""
        self.next_seq = 0
        self.ack = 0
        self.tword = _DEFAULT_TWORD
        self.win = 0
        self.topt = b""


def _tcp_advance(seq: int, ip: IPv4Fields, tcp_doff: int, tcp_flags: int, plen: int) -> int:
    seg = ip.total_length - ip.ihl * 4 - tcp_doff * 4
    if seg < 0:
        seg = plen
    if tcp_flags & TCP_SYN:
        seg += 1
    if tcp_flags & TCP_FIN:
        seg += 1
    return (seq + seg) & 0xFFFFFFFF


def encode_residuals(flow, trace: Optional[list] = None) -> bytes:
    """Stage 1+2: the uncompressed column-grouped residual stream."""
    key = flow.key
    cols = [bytearray() for _ in _COLUMNS]
    cls_col, mask_col, ts_col, seq_col, plen_col, misc = (
        cols[C_CLS], cols[C_MASK], cols[C_TS], cols[C_SEQ], cols[C_PLEN], cols[C_MISC])
    st = _State()
    prev_ts = prev_seq = None
    for i, fp in enumerate(flow.packets):
        p, h, seq = fp
        cls = h.parse_class
        cls_col.append(cls)
        plen = p.captured_len - h.payload_offset
        put_uvarint(plen_col, plen)
        ts = p.ts_us
        if prev_ts is not None:
            put_svarint(ts_col, ts - prev_ts)
            put_svarint(seq_col, seq - prev_seq - 1)
            if trace is not None:
                trace.append(ResidualField(i, "timestamp", Mode.DELTA, ts - prev_ts))
        prev_ts, prev_seq = ts, seq
        mask = 0
        if p.original_len != p.captured_len:
            mask |= M_OLEN
            put_uvarint(cols[C_OLEN], p.original_len - p.captured_len)
        if cls is ParseClass.NON_IP:
            put_uvarint(cols[C_RAW], len(h.raw))
            cols[C_RAW] += h.raw
            put_uvarint(mask_col, mask)
            if trace is not None:
                trace.append(ResidualField(i, "raw", Mode.LITERAL, h.raw))
            continue

        link = h.link_header
        if link != st.link:
            mask |= M_LINK
            put_uvarint(cols[C_LINK], len(link))
            cols[C_LINK] += link
            st.link = link
        ip = h.ip
        verihl = (ip.version << 4) | ip.ihl
        if verihl != st.verihl:
            mask |= M_VERIHL
            misc.append(verihl)
            st.verihl = verihl
        if ip.tos != st.tos:
            mask |= M_TOS
            misc.append(ip.tos)
            st.tos = ip.tos
        tot_res = ip.total_length - (p.original_len - len(link))
        if tot_res:
            mask |= M_TOTLEN
            put_svarint(misc, tot_res)
        id_res = _s16(ip.ident - st.ipid - 1)
        if id_res:
            mask |= M_IPID
            put_svarint(cols[C_IPID], id_res)
        st.ipid = ip.ident
        frag = (ip.flags << 13) | ip.frag_offset
        if frag != st.frag:
            mask |= M_FRAG
            misc += frag.to_bytes(2, "big")
            st.frag = frag
        if ip.ttl != st.ttl:
            mask |= M_TTL
            misc.append(ip.ttl)
            st.ttl = ip.ttl
        if ip.protocol != key.protocol:
            mask |= M_PROTO
            misc.append(ip.protocol)
        ip_ok = ip.checksum == ip_header_checksum(ip)
        if not ip_ok:
            mask |= M_IPCSUM
            cols[C_CSUM] += ip.checksum.to_bytes(2, "big")
        if ip.src != key.src_ip:
            mask |= M_SRC
            misc += ip.src.to_bytes(4, "big")
        if ip.dst != key.dst_ip:
            mask |= M_DST
            misc += ip.dst.to_bytes(4, "big")
        if ip.options != st.ipopt:
            mask |= M_IPOPT
            misc += ip.options
            st.ipopt = ip.options
        if trace is not None:
            trace.append(ResidualField(i, "ip_total_length", Mode.DELTA if tot_res else Mode.PREDICTED_OK, tot_res))
            trace.append(ResidualField(i, "ip_id", Mode.DELTA if id_res else Mode.PREDICTED_OK, id_res))
            trace.append(ResidualField(i, "ip_checksum", Mode.PREDICTED_OK if ip_ok else Mode.LITERAL,
                                       None if ip_ok else ip.checksum))

        if cls is ParseClass.TCP:
            t = h.tcp
            if t.src_port != key.src_port:
                mask |= M_SPORT
                misc += t.src_port.to_bytes(2, "big")
            if t.dst_port != key.dst_port:
                mask |= M_DPORT
                misc += t.dst_port.to_bytes(2, "big")
            seq_res = _s32(t.seq - st.next_seq)
            if seq_res:
                mask |= M_TSEQ
                put_svarint(cols[C_TSEQ], seq_res)
            ack_res = _s32(t.ack - st.ack)
            if ack_res:
                mask |= M_TACK
                put_svarint(cols[C_TACK], ack_res)
            st.ack = t.ack
            tword = (t.data_offset << 12) | t.flags
            if tword != st.tword:
                mask |= M_TFLAGS
                misc += tword.to_bytes(2, "big")
                st.tword = tword
            win_res = _s16(t.window - st.win)
            if win_res:
                mask |= M_TWIN
                put_svarint(cols[C_TWIN], win_res)
            st.win = t.window
            if t.urgent:
                mask |= M_URG
                misc += t.urgent.to_bytes(2, "big")
            if t.options != st.topt:
                mask |= M_TOPT
                misc += t.options
                st.topt = t.options
            t_ok = plen == 0 and t.checksum == transport_header_checksum(
                ip.src, ip.dst, ip.protocol, t.pack(checksum=0))
            if t_ok:
                mask |= M_TCSUM
            else:
                cols[C_CSUM] += t.checksum.to_bytes(2, "big")
            st.next_seq = _tcp_advance(t.seq, ip, t.data_offset, t.flags, plen)
            if trace is not None:
                trace.append(ResidualField(i, "tcp_seq", Mode.DELTA if seq_res else Mode.PREDICTED_OK, seq_res))
                trace.append(ResidualField(i, "tcp_ack", Mode.DELTA if ack_res else Mode.PREDICTED_OK, ack_res))
                trace.append(ResidualField(i, "tcp_window", Mode.DELTA if win_res else Mode.PREDICTED_OK, win_res))
                trace.append(ResidualField(i, "transport_checksum", Mode.PREDICTED_OK if t_ok else Mode.LITERAL,
                                           None if t_ok else t.checksum))
        elif cls is ParseClass.UDP:
            u = h.udp
            if u.src_port != key.src_port:
                mask |= M_SPORT
                misc += u.src_port.to_bytes(2, "big")
            if u.dst_port != key.dst_port:
                mask |= M_DPORT
                misc += u.dst_port.to_bytes(2, "big")
            ulen_res = u.length - (ip.total_length - ip.ihl * 4)
            if ulen_res:
                mask |= M_ULEN
                put_svarint(misc, ulen_res)
            u_ok = plen == 0 and u.checksum == transport_header_checksum(
                ip.src, ip.dst, ip.protocol, u.pack(checksum=0))
            if u_ok:
                mask |= M_TCSUM
            else:
                cols[C_CSUM] += u.checksum.to_bytes(2, "big")
            if trace is not None:
                trace.append(ResidualField(i, "transport_checksum", Mode.PREDICTED_OK if u_ok else Mode.LITERAL,
                                           None if u_ok else u.checksum))
        put_uvarint(mask_col, mask)

    out = bytearray()
    for c in cols:
        put_uvarint(out, len(c))
        out += c
    return bytes(out)


def compress_headers(flow, method: int = compression.DEFLATE) -> CompressedHeaderBlock:
    if not flow.packets:
        raise ValueError("cannot compress an empty flow")
    stage2 = encode_residuals(flow)
    codec, encoded = compression.compress_best(stage2, method)
    times = [fp.packet.ts_us for fp in flow.packets]
    return CompressedHeaderBlock(
        key=flow.key, packet_count=len(flow.packets), first_ts=times[0], min_ts=min(times),
        max_ts=max(times), first_seq=flow.packets[0].seq, codec=codec, encoded=encoded)


class _Reader:
    __slots__ = ("buf", "pos", "end")

    def __init__(self, buf, pos, end):
        self.buf, self.pos, self.end = buf, pos, end

    def u(self) -> int:
        v, self.pos = get_uvarint(self.buf, self.pos)
        return v

    def s(self) -> int:
        v, self.pos = get_svarint(self.buf, self.pos)
        return v

    def take(self, n: int) -> bytes:
        if self.pos + n > self.end:
            raise IntegrityError("residual column exhausted")
        b = self.buf[self.pos:self.pos + n]
        self.pos += n
        return b

    def byte(self) -> int:
        if self.pos >= self.end:
            raise IntegrityError("residual column exhausted")
        b = self.buf[self.pos]
        self.pos += 1
        return b

    def u16(self) -> int:
        return int.from_bytes(self.take(2), "big")


def decompress_headers(block: CompressedHeaderBlock, location=None) -> list:
    """Rebuild every header of the block, in flow order."""
    try:
        stage2 = compression.decompress(block.encoded, block.codec)
        return _decode(block, stage2)
    except IntegrityError as exc:
        raise IntegrityError(f"header block corrupt: {exc}", location) from None
    except (IndexError, ValueError, TypeError) as exc:
        raise IntegrityError(f"header block corrupt: {exc}", location) from None


def _decode(block: CompressedHeaderBlock, buf: bytes) -> list:
    key = block.key
    cols = []
    pos = 0
    for _ in _COLUMNS:
        n, pos = get_uvarint(buf, pos)
        if pos + n > len(buf):
            raise IntegrityError("residual column overruns stream")
        cols.append(_Reader(buf, pos, pos + n))
        pos += n
    cls_c, mask_c, ts_c, seq_c, plen_c, olen_c, link_c, ipid_c, tseq_c, tack_c, twin_c, csum_c, misc, raw_c = cols

    st = _State()
    out = []
    ts = block.first_ts
    seq = block.first_seq
    for i in range(block.packet_count):
        cls = ParseClass(cls_c.byte())
        mask = mask_c.u()
        plen = plen_c.u()
        if i:
            ts += ts_c.s()
            seq += seq_c.s() + 1
        olen = olen_c.u() if mask & M_OLEN else 0

        if cls is ParseClass.NON_IP:
            header = raw_c.take(raw_c.u())
            captured = len(header) + plen
            out.append(HeaderRecord(ts, seq, captured, captured + olen, header, plen))
            continue

        if mask & M_LINK:
            st.link = link_c.take(link_c.u())
        link = st.link
        if link is None:
            raise IntegrityError("link header missing on first packet")
        if mask & M_VERIHL:
            st.verihl = misc.byte()
        if mask & M_TOS:
            st.tos = misc.byte()
        tot_res = misc.s() if mask & M_TOTLEN else 0
        ident = (st.ipid + 1 + (ipid_c.s() if mask & M_IPID else 0)) & 0xFFFF
        st.ipid = ident
        if mask & M_FRAG:
            st.frag = misc.u16()
        if mask & M_TTL:
            st.ttl = misc.byte()
        proto = misc.byte() if mask & M_PROTO else key.protocol
        ip_csum = csum_c.u16() if mask & M_IPCSUM else None
        src = int.from_bytes(misc.take(4), "big") if mask & M_SRC else key.src_ip
        dst = int.from_bytes(misc.take(4), "big") if mask & M_DST else key.dst_ip
        ihl = st.verihl & 0x0F
        if mask & M_IPOPT:
            st.ipopt = misc.take(ihl * 4 - 20)
        hlen = len(link) + ihl * 4

        tcp_parts = udp_parts = None
        if cls is ParseClass.TCP:
            sport = misc.u16() if mask & M_SPORT else key.src_port
            dport = misc.u16() if mask & M_DPORT else key.dst_port
            tseq = (st.next_seq + (tseq_c.s() if mask & M_TSEQ else 0)) & 0xFFFFFFFF
            st.ack = (st.ack + (tack_c.s() if mask & M_TACK else 0)) & 0xFFFFFFFF
            if mask & M_TFLAGS:
                st.tword = misc.u16()
            st.win = (st.win + (twin_c.s() if mask & M_TWIN else 0)) & 0xFFFF
            urgent = misc.u16() if mask & M_URG else 0
            doff = st.tword >> 12
            if mask & M_TOPT:
                st.topt = misc.take(doff * 4 - 20)
            t_csum = None if mask & M_TCSUM else csum_c.u16()
            tcp_parts = (sport, dport, tseq, doff, urgent, t_csum)
            hlen += doff * 4
        elif cls is ParseClass.UDP:
            sport = misc.u16() if mask & M_SPORT else key.src_port
            dport = misc.u16() if mask & M_DPORT else key.dst_port
            ulen_res = misc.s() if mask & M_ULEN else 0
            u_csum = None if mask & M_TCSUM else csum_c.u16()
            udp_parts = (sport, dport, ulen_res, u_csum)
            hlen += 8

        captured = hlen + plen
        original = captured + olen
        total_length = original - len(link) + tot_res
        frag = st.frag
        ip = IPv4Fields(st.verihl >> 4, ihl, st.tos, total_length, ident, frag >> 13, frag & 0x1FFF,
                        st.ttl, proto, 0, src, dst, st.ipopt)
        ip = ip._replace(checksum=ip_header_checksum(ip) if ip_csum is None else ip_csum)
        header = link + ip.pack()
        if tcp_parts is not None:
            sport, dport, tseq, doff, urgent, t_csum = tcp_parts
            t = TCPFields(sport, dport, tseq, st.ack, doff, st.tword & 0x0FFF, st.win, 0, urgent, st.topt)
            if t_csum is None:
                t_csum = transport_header_checksum(src, dst, proto, t.pack(checksum=0))
            header += t.pack(checksum=t_csum)
            st.next_seq = _tcp_advance(tseq, ip, doff, t.flags, plen)
        elif udp_parts is not None:
            sport, dport, ulen_res, u_csum = udp_parts
            u = UDPFields(sport, dport, (total_length - ihl * 4 + ulen_res) & 0xFFFF, 0)
            if u_csum is None:
                u_csum = transport_header_checksum(src, dst, proto, u.pack(checksum=0))
            header += u.pack(checksum=u_csum)
        out.append(HeaderRecord(ts, seq, captured, original, header, plen))
    return out
