from __future__ import annotations

import struct

import pytest

from flowvault.packet import Packet

ETH_IP = b"\x02\x00\x00\x00\x00\x02" + b"\x02\x00\x00\x00\x00\x01" + b"\x08\x00"


def ones_complement(data: bytes) -> int:
    if len(data) % 2:
        data += b"\x00"
    total = 0
    for i in range(0, len(data), 2):
        total += (data[i] << 8) | data[i + 1]
        total = (total & 0xFFFF) + (total >> 16)
    return ~total & 0xFFFF


def ipv4(total_len, proto, src, dst, ip_id=1, ttl=64, frag=0x4000, tos=0, options=b"", fix=True):
    ihl = 5 + len(options) // 4
    head = struct.pack("!BBHHHBBHII", 0x40 | ihl, tos, total_len, ip_id, frag, ttl, proto, 0, src, dst) + options
    if fix:
        head = head[:10] + ones_complement(head).to_bytes(2, "big") + head[12:]
    return head


def tcp_packet(ts_us, src=0x0A000001, dst=0x0A000002, sport=1234, dport=80, seq=1000, ack=1,
               flags=0x18, payload=b"", ip_id=1, ttl=64, window=65535, bad_checksum=False,
               options=b"", original_len=None):
    doff = 5 + len(options) // 4
    tcp = struct.pack("!HHIIHHHH", sport, dport, seq, ack, (doff << 12) | flags, window, 0, 0) + options
    pseudo = struct.pack("!IIBBH", src, dst, 0, 6, len(tcp) + len(payload))
    c = ones_complement(pseudo + tcp + payload)
    if bad_checksum:
        c ^= 0x1234
    tcp = tcp[:16] + c.to_bytes(2, "big") + tcp[18:]
    ip = ipv4(20 + len(tcp) + len(payload), 6, src, dst, ip_id, ttl)
    return Packet.build(ETH_IP + ip + tcp + payload, ts_us, original_len)


def udp_packet(ts_us, src=0x0A000001, dst=0x0A000002, sport=5353, dport=53, payload=b"", ip_id=1):
    udp = struct.pack("!HHHH", sport, dport, 8 + len(payload), 0)
    pseudo = struct.pack("!IIBBH", src, dst, 0, 17, len(udp) + len(payload))
    c = ones_complement(pseudo + udp + payload) or 0xFFFF
    udp = udp[:6] + c.to_bytes(2, "big")
    ip = ipv4(28 + len(payload), 17, src, dst, ip_id)
    return Packet.build(ETH_IP + ip + udp + payload, ts_us)


def oracle_key(data: bytes) -> tuple:
    """5-tuple by direct byte inspection: Ethernet II + IPv4, ports for TCP/UDP."""
    if len(data) < 34 or data[12:14] != b"\x08\x00" or data[14] >> 4 != 4:
        return (0, 0, 0, 0, 0)
    ihl = (data[14] & 0x0F) * 4
    if ihl < 20 or len(data) < 14 + ihl:
        return (0, 0, 0, 0, 0)
    proto = data[23]
    src, dst = struct.unpack("!II", data[26:34])
    frag_off = struct.unpack("!H", data[20:22])[0] & 0x1FFF
    t = 14 + ihl
    if frag_off == 0:
        if proto == 6 and len(data) >= t + 20:
            doff = data[t + 12] >> 4
            if doff >= 5 and len(data) >= t + doff * 4:
                return (src, dst, proto) + struct.unpack("!HH", data[t:t + 4])
        if proto == 17 and len(data) >= t + 8:
            return (src, dst, proto) + struct.unpack("!HH", data[t:t + 4])
    return (src, dst, proto, 0, 0)


def oracle_select(packets, criteria, t0=None, t1=None, keys=None) -> list:
    """Indices of packets whose key and time satisfy the query, canonical order."""
    out = []
    for i, p in enumerate(packets):
        ts = p.ts_us
        if t0 is not None and ts < t0:
            continue
        if t1 is not None and ts >= t1:
            continue
        src, dst, proto, sport, dport = keys[i] if keys is not None else oracle_key(p.data)
        c = criteria
        if c.src_ip is not None and src != c.src_ip:
            continue
        if c.dst_ip is not None and dst != c.dst_ip:
            continue
        if c.any_ip is not None and c.any_ip not in (src, dst):
            continue
        if c.src_port is not None and sport != c.src_port:
            continue
        if c.dst_port is not None and dport != c.dst_port:
            continue
        if c.any_port is not None and c.any_port not in (sport, dport):
            continue
        if c.protocol is not None and proto != c.protocol:
            continue
        out.append(i)
    out.sort(key=lambda i: (packets[i].ts_us, i))
    return out


def oracle_header_len(data: bytes) -> int:
    """Header bytes of an untagged Ethernet frame: through TCP/UDP, else IPv4, else all."""
    if len(data) < 34 or data[12:14] != b"\x08\x00" or data[14] >> 4 != 4:
        return len(data)
    t = 14 + (data[14] & 0x0F) * 4
    if (data[14] & 0x0F) < 5 or len(data) < t:
        return len(data)
    proto = data[23]
    frag_off = struct.unpack("!H", data[20:22])[0] & 0x1FFF
    if frag_off == 0 and proto == 6 and len(data) >= t + 20 and data[t + 12] >> 4 >= 5 \
            and len(data) >= t + (data[t + 12] >> 4) * 4:
        return t + (data[t + 12] >> 4) * 4
    if frag_off == 0 and proto == 17 and len(data) >= t + 8:
        return t + 8
    return t


def header_only(p: Packet, header_len: int) -> Packet:
    return Packet(p.ts_sec, p.ts_frac, header_len, p.original_len, p.data[:header_len])


@pytest.fixture
def tcp():
    return tcp_packet


@pytest.fixture
def udp():
    return udp_packet


class OracleTrace:
    """Vectorized linear scan over a packet list, keyed by ``oracle_key``."""

    def __init__(self, packets, keys=None):
        import numpy as np
        self.np = np
        self.packets = list(packets)
        keys = keys if keys is not None else [oracle_key(p.data) for p in self.packets]
        self.keys = keys
        arr = np.array(keys, dtype=np.int64).reshape(-1, 5)
        self.src, self.dst, self.proto, self.sport, self.dport = arr.T
        self.ts = np.array([p.ts_us for p in self.packets], dtype=np.int64)

    def select(self, c, t0=None, t1=None) -> list:
        np = self.np
        m = np.ones(len(self.packets), dtype=bool)
        if t0 is not None:
            m &= self.ts >= t0
        if t1 is not None:
            m &= self.ts < t1
        for v, col in ((c.src_ip, self.src), (c.dst_ip, self.dst), (c.src_port, self.sport),
                       (c.dst_port, self.dport), (c.protocol, self.proto)):
            if v is not None:
                m &= col == v
        if c.any_ip is not None:
            m &= (self.src == c.any_ip) | (self.dst == c.any_ip)
        if c.any_port is not None:
            m &= (self.sport == c.any_port) | (self.dport == c.any_port)
        idx = np.flatnonzero(m)
        return idx[np.lexsort((idx, self.ts[idx]))].tolist()


ACCEPTANCE: list = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda l: int(l.split()[1])):
            terminalreporter.write_line(line)
