import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from flowguard.packets import (
    FiveTuple,
    Packet,
    PcapFormatError,
    Proto,
    TcpFlags,
    decode_frame,
    encode_frame,
    int_to_ip,
    ip_to_int,
    read_pcap,
    scan_pcap,
    write_pcap,
)

GLOBAL = struct.pack("<IHHiIII", 0xA1B2C3D4, 2, 4, 0, 0, 65535, 1)


def syn(ts=0, src="10.46.0.1", sport=1234, payload=0):
    return Packet(ts, ip_to_int(src), ip_to_int("10.46.0.10"), sport, 80, Proto.TCP, TcpFlags.SYN, 40, payload)


def test_ip_conversions():
    assert ip_to_int("10.46.0.1") == 0x0A2E0001
    assert int_to_ip(0x0A2E0001) == "10.46.0.1"
    with pytest.raises(ValueError):
        ip_to_int("10.46.0")


def test_packet_invariants():
    with pytest.raises(ValueError):
        Packet(0, 1, 2, 3, 4, Proto.UDP, TcpFlags.SYN, 28)
    with pytest.raises(ValueError):
        Packet(0, 1, 2, 3, 4, Proto.TCP, 0, 36)
    with pytest.raises(ValueError):
        Packet(0, 1, 2, 0, 0, 1, 0, 19)
    p = syn(payload=10)
    assert p.wire_len == 40 + 10 + 14
    assert type(p.protocol) is int and type(p.tcp_flags) is int


def test_five_tuple_canonical_is_direction_free():
    t = FiveTuple(5, 9, 1000, 80, 6)
    assert t.canonical() == t.reversed().canonical()
    assert t.reversed().reversed() == t


def test_empty_capture(tmp_path):
    path = tmp_path / "e.pcap"
    assert write_pcap([], path) == 24
    assert read_pcap(path) == []


def test_single_syn_size(tmp_path):
    # global header 24 + record header 16 + Ethernet 14 + IPv4 20 + TCP 20
    assert write_pcap([syn()], tmp_path / "s.pcap") == 24 + 16 + 14 + 40


def test_hand_assembled_record_timestamp(tmp_path):
    p = syn()
    frame = encode_frame(p)
    blob = GLOBAL + struct.pack("<IIII", 1, 500000, len(frame), len(frame)) + frame
    path = tmp_path / "h.pcap"
    path.write_bytes(blob)
    (got,) = read_pcap(path)
    assert got.timestamp_us == 1_500_000


def test_byte_swapped_magic(tmp_path):
    frame = encode_frame(syn())
    hdr = struct.pack(">IHHiIII", 0xA1B2C3D4, 2, 4, 0, 0, 65535, 1)
    path = tmp_path / "be.pcap"
    path.write_bytes(hdr + struct.pack(">IIII", 3, 7, len(frame), len(frame)) + frame)
    (got,) = read_pcap(path)
    assert got.timestamp_us == 3_000_007


def test_three_packet_round_trip(tmp_path):
    pk = [syn(0), Packet(5, 1, 2, 53, 5353, Proto.UDP, 0, 28, 100), Packet(9, 3, 4, 0, 0, 1, 0, 20, 8)]
    write_pcap(pk, tmp_path / "r.pcap")
    assert read_pcap(tmp_path / "r.pcap") == pk


def test_errors(tmp_path):
    bad = tmp_path / "bad.pcap"
    bad.write_bytes(b"\x00" * 10)
    with pytest.raises(PcapFormatError, match="truncated"):
        read_pcap(bad)
    bad.write_bytes(struct.pack("<IHHiIII", 0xA1B2C3D4, 2, 4, 0, 0, 65535, 105))
    with pytest.raises(PcapFormatError, match="linktype 105"):
        read_pcap(bad)
    bad.write_bytes(b"\xde\xad\xbe\xef" + GLOBAL[4:])
    with pytest.raises(PcapFormatError, match="magic"):
        read_pcap(bad)
    frame = encode_frame(syn())
    bad.write_bytes(GLOBAL + struct.pack("<IIII", 0, 0, len(frame), len(frame)) + frame + b"\x00" * 10)
    with pytest.raises(PcapFormatError, match="record 1"):
        read_pcap(bad)
    with pytest.raises(ValueError, match="out of timestamp order"):
        write_pcap([syn(5), syn(4)], tmp_path / "o.pcap")
    with pytest.raises(OSError):
        write_pcap([], tmp_path / "missing-dir" / "x.pcap")


def test_non_ipv4_frames_are_skipped_and_counted(tmp_path):
    arp = bytes(12) + struct.pack("!H", 0x0806) + bytes(28)
    frame = encode_frame(syn())
    blob = GLOBAL
    for f in (frame, arp, frame):
        blob += struct.pack("<IIII", 0, 0, len(f), len(f)) + f
    path = tmp_path / "m.pcap"
    path.write_bytes(blob)
    scan = scan_pcap(path)
    assert len(scan.packets) == 2 and scan.skipped == 1
    assert len(scan.packets) + scan.skipped == scan.total_records == 3


def test_decode_rejects_garbage():
    assert decode_frame(b"\x00" * 20, 0) is None


packets_st = st.builds(
    lambda ts, s, d, sp, dp, proto, flags, opt, pay: Packet(
        ts,
        s,
        d,
        sp if proto != 1 else 0,
        dp if proto != 1 else 0,
        proto,
        flags if proto == 6 else 0,
        {6: 40 + 4 * opt, 17: 28 + 4 * opt, 1: 20 + 4 * opt}[proto],
        pay,
    ),
    st.integers(0, 2**40),
    st.integers(0, 2**32 - 1),
    st.integers(0, 2**32 - 1),
    st.integers(0, 65535),
    st.integers(0, 65535),
    st.sampled_from([6, 17, 1]),
    st.integers(0, 255),
    st.integers(0, 10),
    st.integers(0, 3000),
)


@settings(max_examples=40, deadline=None)
@given(st.lists(packets_st, max_size=50))
def test_round_trip_property(tmp_path_factory, pk):
    pk = sorted(pk, key=lambda p: p.timestamp_us)
    path = tmp_path_factory.mktemp("rt") / "p.pcap"
    write_pcap(pk, path)
    back = read_pcap(path)
    assert back == pk
    assert all(a.timestamp_us <= b.timestamp_us for a, b in zip(back, back[1:]))


def test_frame_round_trip_random():
    rng = np.random.default_rng(3)
    for _ in range(200):
        p = Packet(
            int(rng.integers(0, 2**40)), int(rng.integers(0, 2**32)), int(rng.integers(0, 2**32)),
            int(rng.integers(0, 65536)), int(rng.integers(0, 65536)), 6, int(rng.integers(0, 256)),
            40 + 4 * int(rng.integers(0, 11)), int(rng.integers(0, 1500)),
        )
        assert decode_frame(encode_frame(p), p.timestamp_us) == p
