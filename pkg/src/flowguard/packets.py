"""Packet data model and classic pcap (libpcap 2.4, Ethernet) reading and writing.

Payload bytes are never stored, only counted: written frames carry zero-filled
payloads of the right length, so a write/read round trip is field-exact.
"""

from __future__ import annotations

import enum
import ipaddress
import os
import struct
from dataclasses import dataclass, field
from typing import Iterable, List, NamedTuple, Tuple

PCAP_MAGIC = 0xA1B2C3D4
PCAP_MAGIC_SWAPPED = 0xD4C3B2A1
PCAP_VERSION = (2, 4)
LINKTYPE_ETHERNET = 1
SNAPLEN = 65535

GLOBAL_HEADER_LEN = 24
RECORD_HEADER_LEN = 16
ETH_HEADER_LEN = 14
ETHERTYPE_IPV4 = 0x0800

_ETH_DST = bytes.fromhex("020000000002")
_ETH_SRC = bytes.fromhex("020000000001")


class Proto(enum.IntEnum):
    TCP = 6
    UDP = 17


class TcpFlags(enum.IntFlag):
    FIN = 0x01
    SYN = 0x02
    RST = 0x04
    PSH = 0x08
    ACK = 0x10
    URG = 0x20
    ECE = 0x40
    CWR = 0x80


class PcapFormatError(ValueError):
    """Raised for malformed, truncated or unsupported capture files."""


def ip_to_int(ip: str | int) -> int:
    if isinstance(ip, int):
        if not 0 <= ip <= 0xFFFFFFFF:
            raise ValueError(f"not an IPv4 address: {ip}")
        return ip
    return int(ipaddress.IPv4Address(ip))


def int_to_ip(value: int) -> str:
    return str(ipaddress.IPv4Address(value))


def _split_headers(protocol: int, header_len: int) -> Tuple[int, int] | None:
    """(ip header bytes, l4 header bytes) that add up to ``header_len``, or None."""
    if protocol == Proto.TCP:
        l4 = min(60, header_len - 20)
        if l4 < 20:
            return None
    elif protocol == Proto.UDP:
        l4 = 8
    else:
        l4 = 0
    ip = header_len - l4
    if ip < 20 or ip > 60 or ip % 4 or (protocol == Proto.TCP and l4 % 4):
        return None
    return ip, l4


@dataclass(frozen=True, slots=True)
class Packet:
    """One captured IPv4 packet, reduced to what flow metering and filtering need.

    Addresses are 32-bit integers (see :func:`ip_to_int`). ``header_len_bytes``
    counts the IPv4 header plus the TCP/UDP header, options included.
    """

    timestamp_us: int
    src_ip: int
    dst_ip: int
    src_port: int
    dst_port: int
    protocol: int
    tcp_flags: int = 0
    header_len_bytes: int = 40
    payload_len_bytes: int = 0

    def __post_init__(self) -> None:
        # enum members would leak into CSV/JSON as "Proto.TCP"
        if type(self.protocol) is not int:
            object.__setattr__(self, "protocol", int(self.protocol))
        if type(self.tcp_flags) is not int:
            object.__setattr__(self, "tcp_flags", int(self.tcp_flags))
        if self.timestamp_us < 0:
            raise ValueError("timestamp_us must be non-negative")
        if not (0 <= self.src_ip <= 0xFFFFFFFF and 0 <= self.dst_ip <= 0xFFFFFFFF):
            raise ValueError("addresses must be 32-bit integers")
        if not (0 <= self.src_port <= 0xFFFF and 0 <= self.dst_port <= 0xFFFF):
            raise ValueError("ports must be in 0..65535")
        if not 0 <= self.protocol <= 0xFF:
            raise ValueError("protocol must be an 8-bit code")
        if self.protocol != Proto.TCP and self.tcp_flags:
            raise ValueError("tcp_flags must be empty for non-TCP packets")
        if self.protocol not in (Proto.TCP, Proto.UDP) and (self.src_port or self.dst_port):
            raise ValueError("ports must be 0 for protocols other than TCP/UDP")
        if not 0 <= self.tcp_flags <= 0xFF:
            raise ValueError("tcp_flags must fit in 8 bits")
        if self.payload_len_bytes < 0:
            raise ValueError("payload_len_bytes must be non-negative")
        if _split_headers(self.protocol, self.header_len_bytes) is None:
            raise ValueError(
                f"header_len_bytes={self.header_len_bytes} is not encodable for protocol {self.protocol}"
            )
        if self.l3_len > 0xFFFF:
            raise ValueError("IPv4 total length exceeds 65535")

    @property
    def l3_len(self) -> int:
        return self.header_len_bytes + self.payload_len_bytes

    @property
    def wire_len(self) -> int:
        return self.l3_len + ETH_HEADER_LEN

    @property
    def five_tuple(self) -> "FiveTuple":
        return FiveTuple(self.src_ip, self.dst_ip, self.src_port, self.dst_port, self.protocol)

    def has_flag(self, flag: TcpFlags) -> bool:
        return bool(self.tcp_flags & flag)


class FiveTuple(NamedTuple):
    src_ip: int
    dst_ip: int
    src_port: int
    dst_port: int
    protocol: int

    def reversed(self) -> "FiveTuple":
        return FiveTuple(self.dst_ip, self.src_ip, self.dst_port, self.src_port, self.protocol)

    def canonical(self) -> "FiveTuple":
        """Direction-free key: the lower (ip, port) endpoint is placed first."""
        if (self.src_ip, self.src_port) <= (self.dst_ip, self.dst_port):
            return self
        return self.reversed()

    def __str__(self) -> str:
        return (
            f"{int_to_ip(self.src_ip)}:{self.src_port}->"
            f"{int_to_ip(self.dst_ip)}:{self.dst_port}/{self.protocol}"
        )


def _ipv4_checksum(header: bytes) -> int:
    total = sum(struct.unpack(f"!{len(header) // 2}H", header))
    while total >> 16:
        total = (total & 0xFFFF) + (total >> 16)
    return ~total & 0xFFFF


def encode_frame(pkt: Packet, ident: int = 0) -> bytes:
    """Ethernet + IPv4 (+TCP/UDP) frame for ``pkt`` with a zero-filled payload."""
    ip_len, l4_len = _split_headers(pkt.protocol, pkt.header_len_bytes)  # type: ignore[misc]
    ip_hdr = bytearray(
        struct.pack(
            "!BBHHHBBHII",
            0x40 | (ip_len // 4),
            0,
            pkt.l3_len,
            ident & 0xFFFF,
            0x4000,
            64,
            pkt.protocol,
            0,
            pkt.src_ip,
            pkt.dst_ip,
        )
    )
    ip_hdr += b"\x01" * (ip_len - 20)  # IP NOP options
    struct.pack_into("!H", ip_hdr, 10, _ipv4_checksum(bytes(ip_hdr)))
    if pkt.protocol == Proto.TCP:
        l4 = struct.pack(
            "!HHIIBBHHH",
            pkt.src_port,
            pkt.dst_port,
            0,
            0,
            (l4_len // 4) << 4,
            pkt.tcp_flags,
            64240,
            0,
            0,
        ) + b"\x01" * (l4_len - 20)
    elif pkt.protocol == Proto.UDP:
        l4 = struct.pack("!HHHH", pkt.src_port, pkt.dst_port, 8 + pkt.payload_len_bytes, 0)
    else:
        l4 = b""
    eth = _ETH_DST + _ETH_SRC + struct.pack("!H", ETHERTYPE_IPV4)
    return b"".join((eth, bytes(ip_hdr), l4, bytes(pkt.payload_len_bytes)))


def decode_frame(frame: bytes, timestamp_us: int) -> Packet | None:
    """Parse an Ethernet frame; None for anything that is not a well-formed IPv4 packet."""
    if len(frame) < ETH_HEADER_LEN + 20:
        return None
    if struct.unpack_from("!H", frame, 12)[0] != ETHERTYPE_IPV4:
        return None
    off = ETH_HEADER_LEN
    vihl, _, total_len = struct.unpack_from("!BBH", frame, off)
    if vihl >> 4 != 4:
        return None
    ip_len = (vihl & 0x0F) * 4
    if ip_len < 20 or len(frame) < off + ip_len:
        return None
    protocol = frame[off + 9]
    src_ip, dst_ip = struct.unpack_from("!II", frame, off + 12)
    l4_off = off + ip_len
    src_port = dst_port = flags = 0
    if protocol == Proto.TCP:
        if len(frame) < l4_off + 20:
            return None
        src_port, dst_port = struct.unpack_from("!HH", frame, l4_off)
        l4_len = (frame[l4_off + 12] >> 4) * 4
        flags = frame[l4_off + 13]
        if l4_len < 20:
            return None
    elif protocol == Proto.UDP:
        if len(frame) < l4_off + 8:
            return None
        src_port, dst_port = struct.unpack_from("!HH", frame, l4_off)
        l4_len = 8
    else:
        l4_len = 0
    header_len = ip_len + l4_len
    if total_len < header_len:
        return None
    try:
        return Packet(
            timestamp_us=timestamp_us,
            src_ip=src_ip,
            dst_ip=dst_ip,
            src_port=src_port,
            dst_port=dst_port,
            protocol=protocol,
            tcp_flags=flags,
            header_len_bytes=header_len,
            payload_len_bytes=total_len - header_len,
        )
    except ValueError:
        return None


@dataclass
class PcapScan:
    packets: List[Packet] = field(default_factory=list)
    skipped: int = 0
    total_records: int = 0


def scan_pcap(path: str | os.PathLike) -> PcapScan:
    """Read a capture, keeping the count of records that were not IPv4."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < GLOBAL_HEADER_LEN:
        raise PcapFormatError(f"{path}: global header truncated ({len(data)} bytes)")
    (magic,) = struct.unpack_from("<I", data, 0)
    if magic == PCAP_MAGIC:
        endian = "<"
    elif magic == PCAP_MAGIC_SWAPPED:
        endian = ">"
    else:
        raise PcapFormatError(f"{path}: bad pcap magic 0x{magic:08x}")
    _, vmaj, vmin, _, _, _, linktype = struct.unpack_from(endian + "IHHiIII", data, 0)
    if (vmaj, vmin) != PCAP_VERSION:
        raise PcapFormatError(f"{path}: unsupported pcap version {vmaj}.{vmin}")
    if linktype != LINKTYPE_ETHERNET:
        raise PcapFormatError(f"{path}: unsupported linktype {linktype}")

    rec = struct.Struct(endian + "IIII")
    scan = PcapScan()
    off = GLOBAL_HEADER_LEN
    end = len(data)
    index = 0
    while off < end:
        if off + RECORD_HEADER_LEN > end:
            raise PcapFormatError(f"{path}: record {index} header truncated")
        ts_sec, ts_usec, incl_len, _ = rec.unpack_from(data, off)
        off += RECORD_HEADER_LEN
        if off + incl_len > end:
            raise PcapFormatError(f"{path}: record {index} truncated ({incl_len} bytes declared)")
        pkt = decode_frame(data[off : off + incl_len], ts_sec * 1_000_000 + ts_usec)
        off += incl_len
        index += 1
        if pkt is None:
            scan.skipped += 1
        else:
            scan.packets.append(pkt)
    scan.total_records = index
    return scan


def read_pcap(path: str | os.PathLike) -> List[Packet]:
    return scan_pcap(path).packets


def write_pcap(packets: Iterable[Packet], path: str | os.PathLike) -> int:
    """Write ``packets`` as a little-endian classic pcap; returns bytes written."""
    chunks = [struct.pack("<IHHiIII", PCAP_MAGIC, *PCAP_VERSION, 0, 0, SNAPLEN, LINKTYPE_ETHERNET)]
    rec = struct.Struct("<IIII")
    last_ts = -1
    for i, pkt in enumerate(packets):
        if pkt.timestamp_us < last_ts:
            raise ValueError(f"packet {i} out of timestamp order ({pkt.timestamp_us} < {last_ts})")
        last_ts = pkt.timestamp_us
        frame = encode_frame(pkt, ident=i)
        sec, usec = divmod(pkt.timestamp_us, 1_000_000)
        incl = frame[:SNAPLEN]
        chunks.append(rec.pack(sec, usec, len(incl), len(frame)))
        chunks.append(incl)
    blob = b"".join(chunks)
    with open(path, "wb") as fh:
        fh.write(blob)
    return len(blob)
