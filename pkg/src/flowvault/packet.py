"""Packets, flow keys and lossless link/IPv4/TCP/UDP header decoding."""
from __future__ import annotations

import enum
import ipaddress
import struct
from dataclasses import dataclass
from typing import NamedTuple, Optional

LINKTYPE_ETHERNET = 1
LINKTYPE_RAW = 101
LINKTYPE_IPV4 = 228

ETHERTYPE_IPV4 = 0x0800
_VLAN_ETHERTYPES = (0x8100, 0x88A8)

PROTO_TCP = 6
PROTO_UDP = 17

TCP_FIN = 0x01
TCP_SYN = 0x02
TCP_RST = 0x04
TCP_ACK = 0x10

_IP_STRUCT = struct.Struct("!BBHHHBBHII")
_TCP_STRUCT = struct.Struct("!HHIIHHHH")
_UDP_STRUCT = struct.Struct("!HHHH")
_KEY_STRUCT = struct.Struct("!IIBHH")


@dataclass(frozen=True, slots=True)
class Packet:
    """One captured packet: capture metadata plus the captured bytes."""

    ts_sec: int
    ts_frac: int
    captured_len: int
    original_len: int
    data: bytes

    def __post_init__(self):
        if self.captured_len != len(self.data):
            raise ValueError(
                f"captured_len {self.captured_len} does not match data length {len(self.data)}")
        if self.captured_len > self.original_len:
            raise ValueError(
                f"captured_len {self.captured_len} exceeds original_len {self.original_len}")
        if not 0 <= self.ts_frac < 1_000_000:
            raise ValueError(f"ts_frac {self.ts_frac} outside 0..999999")
        if self.ts_sec < 0:
            raise ValueError(f"negative ts_sec {self.ts_sec}")

    @property
    def ts_us(self) -> int:
        return self.ts_sec * 1_000_000 + self.ts_frac

    @classmethod
    def build(cls, data: bytes, ts_us: int, original_len: Optional[int] = None) -> "Packet":
        data = bytes(data)
        sec, frac = divmod(ts_us, 1_000_000)
        return cls(sec, frac, len(data), len(data) if original_len is None else original_len, data)


class FlowKey(NamedTuple):
    """Direction-sensitive 5-tuple; addresses are 32-bit integers."""

    src_ip: int
    dst_ip: int
    protocol: int
    src_port: int
    dst_port: int

    def pack(self) -> bytes:
        return _KEY_STRUCT.pack(*self)

    @classmethod
    def unpack(cls, buf, pos: int = 0) -> "FlowKey":
        return cls._make(_KEY_STRUCT.unpack_from(buf, pos))

    def __str__(self) -> str:
        src = ipaddress.IPv4Address(self.src_ip)
        dst = ipaddress.IPv4Address(self.dst_ip)
        return f"{src}:{self.src_port} -> {dst}:{self.dst_port} proto {self.protocol}"


FLOW_KEY_SIZE = _KEY_STRUCT.size
NON_IP_KEY = FlowKey(0, 0, 0, 0, 0)


class ParseClass(enum.IntEnum):
    TCP = 0
    UDP = 1
    OTHER_IP = 2
    NON_IP = 3


class IPv4Fields(NamedTuple):
    version: int
    ihl: int
    tos: int
    total_length: int
    ident: int
    flags: int
    frag_offset: int
    ttl: int
    protocol: int
    checksum: int
    src: int
    dst: int
    options: bytes

    @property
    def header_len(self) -> int:
        return self.ihl * 4

    def pack(self, checksum: Optional[int] = None) -> bytes:
        return _IP_STRUCT.pack(
            (self.version << 4) | self.ihl, self.tos, self.total_length, self.ident,
            (self.flags << 13) | self.frag_offset, self.ttl, self.protocol,
            self.checksum if checksum is None else checksum, self.src, self.dst) + self.options


class TCPFields(NamedTuple):
    src_port: int
    dst_port: int
    seq: int
    ack: int
    data_offset: int
    flags: int  # low 12 bits of the offset word, reserved bits included
    window: int
    checksum: int
    urgent: int
    options: bytes

    @property
    def header_len(self) -> int:
        return self.data_offset * 4

    def pack(self, checksum: Optional[int] = None) -> bytes:
        return _TCP_STRUCT.pack(
            self.src_port, self.dst_port, self.seq, self.ack,
            (self.data_offset << 12) | self.flags, self.window,
            self.checksum if checksum is None else checksum, self.urgent) + self.options


class UDPFields(NamedTuple):
    src_port: int
    dst_port: int
    length: int
    checksum: int

    header_len = 8

    def pack(self, checksum: Optional[int] = None) -> bytes:
        return _UDP_STRUCT.pack(self.src_port, self.dst_port, self.length,
                                self.checksum if checksum is None else checksum)


@dataclass(slots=True)
class ParsedHeader:
    """Structured view of a packet's header region.

    ``serialize()`` returns exactly ``packet.data[:payload_offset]``. For
    ``NON_IP`` the header region is the entire packet, held in ``raw``.
    """

    parse_class: ParseClass
    link_header: bytes
    ip: Optional[IPv4Fields]
    tcp: Optional[TCPFields]
    udp: Optional[UDPFields]
    raw: bytes
    payload_offset: int

    def serialize(self) -> bytes:
        if self.parse_class is ParseClass.NON_IP:
            return self.raw
        out = self.link_header + self.ip.pack()
        if self.tcp is not None:
            out += self.tcp.pack()
        elif self.udp is not None:
            out += self.udp.pack()
        return out


def internet_checksum(data: bytes) -> int:
    """RFC 1071 checksum of ``data`` (odd lengths are zero padded)."""
    if len(data) & 1:
        data += b"\x00"
    v = int.from_bytes(data, "big")
    s = v % 0xFFFF
    if s == 0 and v:
        s = 0xFFFF
    return ~s & 0xFFFF


def ip_header_checksum(ip: IPv4Fields) -> int:
    return internet_checksum(ip.pack(checksum=0))


def transport_header_checksum(src: int, dst: int, protocol: int, header: bytes) -> int:
    """Checksum over the pseudo-header and ``header`` alone (no payload)."""
    pseudo = struct.pack("!IIBBH", src, dst, 0, protocol, len(header))
    return internet_checksum(pseudo + header)


def _link_header_len(data: bytes, link_type: int) -> Optional[int]:
    """Offset of the IPv4 header, or None when the frame is not IPv4."""
    if link_type == LINKTYPE_ETHERNET:
        off = 12
        while len(data) >= off + 2:
            ethertype = (data[off] << 8) | data[off + 1]
            if ethertype in _VLAN_ETHERTYPES:
                off += 4
                continue
            return off + 2 if ethertype == ETHERTYPE_IPV4 else None
        return None
    if link_type in (LINKTYPE_RAW, LINKTYPE_IPV4):
        return 0
    return None


def _non_ip(data: bytes) -> ParsedHeader:
    return ParsedHeader(ParseClass.NON_IP, b"", None, None, None, bytes(data), len(data))


def parse_headers(packet, link_type: int = LINKTYPE_ETHERNET) -> ParsedHeader:
    """Decode link, IPv4 and TCP/UDP headers; never fails.

    Anything that is not a complete IPv4 header degrades to ``NON_IP``; a
    missing or truncated transport header degrades to ``OTHER_IP``.
    """
    data = packet.data if isinstance(packet, Packet) else bytes(packet)
    link_len = _link_header_len(data, link_type)
    if link_len is None or len(data) < link_len + 20:
        return _non_ip(data)
    vihl, tos, total_length, ident, frag, ttl, proto, csum, src, dst = _IP_STRUCT.unpack_from(data, link_len)
    version, ihl = vihl >> 4, vihl & 0x0F
    ip_end = link_len + ihl * 4
    if version != 4 or ihl < 5 or len(data) < ip_end:
        return _non_ip(data)
    ip = IPv4Fields(version, ihl, tos, total_length, ident, frag >> 13, frag & 0x1FFF, ttl, proto,
                    csum, src, dst, data[link_len + 20:ip_end])
    link = data[:link_len]
    avail = len(data) - ip_end
    if ip.frag_offset == 0:
        if proto == PROTO_TCP and avail >= 20:
            sport, dport, seq, ack, word, window, tcsum, urg = _TCP_STRUCT.unpack_from(data, ip_end)
            doff = word >> 12
            if doff >= 5 and avail >= doff * 4:
                tcp = TCPFields(sport, dport, seq, ack, doff, word & 0x0FFF, window, tcsum, urg,
                                data[ip_end + 20:ip_end + doff * 4])
                return ParsedHeader(ParseClass.TCP, link, ip, tcp, None, b"", ip_end + doff * 4)
        elif proto == PROTO_UDP and avail >= 8:
            udp = UDPFields._make(_UDP_STRUCT.unpack_from(data, ip_end))
            return ParsedHeader(ParseClass.UDP, link, ip, None, udp, b"", ip_end + 8)
    return ParsedHeader(ParseClass.OTHER_IP, link, ip, None, None, b"", ip_end)


def extract_flow_key(parsed: ParsedHeader) -> FlowKey:
    cls = parsed.parse_class
    if cls is ParseClass.NON_IP:
        return NON_IP_KEY
    ip = parsed.ip
    if cls is ParseClass.TCP:
        return FlowKey(ip.src, ip.dst, ip.protocol, parsed.tcp.src_port, parsed.tcp.dst_port)
    if cls is ParseClass.UDP:
        return FlowKey(ip.src, ip.dst, ip.protocol, parsed.udp.src_port, parsed.udp.dst_port)
    return FlowKey(ip.src, ip.dst, ip.protocol, 0, 0)


def ip_to_int(addr) -> int:
    return int(ipaddress.IPv4Address(addr))
