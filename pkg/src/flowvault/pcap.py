"""Streaming reader and writer for the classic microsecond pcap format."""
from __future__ import annotations

import io
import logging
import struct
from typing import BinaryIO, Iterable, Iterator

from .errors import PcapFormatError
from .packet import LINKTYPE_ETHERNET, Packet

log = logging.getLogger(__name__)

MAGIC_USEC = 0xA1B2C3D4
MAGIC_NSEC = 0xA1B23C4D
SNAPLEN = 65535
GLOBAL_HEADER_LEN = 24
RECORD_HEADER_LEN = 16

_GLOBAL_LE = struct.Struct("<IHHiIII")
_RECORD_LE = struct.Struct("<IIII")


class PcapReader:
    """Iterate packets of a pcap stream without buffering the whole file.

    The global header is consumed on construction so ``link_type`` is
    available before iteration starts.
    """

    def __init__(self, stream: BinaryIO):
        self._stream = stream
        header = _read_exact(stream, GLOBAL_HEADER_LEN)
        if len(header) < GLOBAL_HEADER_LEN:
            raise PcapFormatError(f"pcap global header truncated ({len(header)} of 24 bytes)")
        magic_le = struct.unpack_from("<I", header)[0]
        if magic_le == MAGIC_USEC:
            endian = "<"
        elif magic_le == _swap32(MAGIC_USEC):
            endian = ">"
        elif magic_le in (MAGIC_NSEC, _swap32(MAGIC_NSEC)):
            raise PcapFormatError("nanosecond pcap (magic 0xa1b23c4d) is not supported")
        else:
            raise PcapFormatError(f"bad pcap magic 0x{magic_le:08x}")
        _, self.version_major, self.version_minor, self.thiszone, self.sigfigs, self.snaplen, \
            self.link_type = struct.unpack(endian + "IHHiIII", header)
        self._record = struct.Struct(endian + "IIII")
        self.truncated = False

    def __iter__(self) -> Iterator[Packet]:
        stream, record = self._stream, self._record
        index = 0
        while True:
            head = _read_exact(stream, RECORD_HEADER_LEN)
            if not head:
                return
            if len(head) < RECORD_HEADER_LEN:
                self._warn_truncated(index)
                return
            ts_sec, ts_usec, incl_len, orig_len = record.unpack(head)
            data = _read_exact(stream, incl_len)
            if len(data) < incl_len:
                self._warn_truncated(index)
                return
            if ts_usec >= 1_000_000:
                raise PcapFormatError(f"record {index}: ts_usec {ts_usec} out of range")
            if incl_len > orig_len:
                raise PcapFormatError(f"record {index}: incl_len {incl_len} > orig_len {orig_len}")
            yield Packet(ts_sec, ts_usec, incl_len, orig_len, data)
            index += 1

    def _warn_truncated(self, index: int) -> None:
        self.truncated = True
        log.warning("pcap record %d truncated; dropped it and kept %d earlier packets", index, index)


def read_pcap(stream) -> tuple[Iterator[Packet], int]:
    """Return ``(packet iterator, link_type)`` for a pcap byte stream or bytes."""
    if isinstance(stream, (bytes, bytearray, memoryview)):
        stream = io.BytesIO(bytes(stream))
    reader = PcapReader(stream)
    return iter(reader), reader.link_type


def global_header(link_type: int = LINKTYPE_ETHERNET) -> bytes:
    return _GLOBAL_LE.pack(MAGIC_USEC, 2, 4, 0, 0, SNAPLEN, link_type)


def record_bytes(packet: Packet) -> bytes:
    if packet.captured_len != len(packet.data):
        raise ValueError("captured_len does not match data length")
    return _RECORD_LE.pack(packet.ts_sec, packet.ts_frac, packet.captured_len,
                           packet.original_len) + packet.data


class PcapWriter:
    def __init__(self, stream: BinaryIO, link_type: int = LINKTYPE_ETHERNET):
        self._stream = stream
        stream.write(global_header(link_type))

    def write(self, packet: Packet) -> None:
        self._stream.write(record_bytes(packet))


def write_pcap(packets: Iterable[Packet], link_type: int = LINKTYPE_ETHERNET) -> bytes:
    out = io.BytesIO()
    writer = PcapWriter(out, link_type)
    for p in packets:
        writer.write(p)
    return out.getvalue()


def _read_exact(stream, n: int) -> bytes:
    buf = stream.read(n)
    if buf is None:
        buf = b""
    while len(buf) < n:
        more = stream.read(n - len(buf))
        if not more:
            break
        buf += more
    return buf


def _swap32(v: int) -> int:
    return int.from_bytes(v.to_bytes(4, "little"), "big")
