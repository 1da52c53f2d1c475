import numpy as np
import pytest

from flowguard.flowmeter import (
    FEATURE_NAMES,
    FlowMeterConfig,
    FlowTable,
    FlowTableFull,
    TimestampRegression,
    csv_header,
    meter,
    read_features_csv,
    write_features_csv,
)
from flowguard.packets import Packet, TcpFlags

from oracles import brute_force_features, random_flow, rel_err

A, B = 0x0A000001, 0x0A000002
S, F, R, AK = int(TcpFlags.SYN), int(TcpFlags.FIN), int(TcpFlags.RST), int(TcpFlags.ACK)


def pkt(ts, fwd=True, flags=AK, payload=0, header=40, proto=6):
    if fwd:
        return Packet(ts, A, B, 1000, 80, proto, flags, header, payload)
    return Packet(ts, B, A, 80, 1000, proto, flags, header, payload)


def test_twenty_features_in_order():
    assert len(FEATURE_NAMES) == 20
    assert FEATURE_NAMES[0] == "Flow Duration" and FEATURE_NAMES[-1] == "Idle Max"
    assert csv_header()[-1] == "Label"


def test_hand_computed_flow():
    # fwd at 0 (SYN, 40B), bwd at 1000 (SYN|ACK, 40B), fwd at 2_501_000 (ACK, 40+100B)
    flows = meter([pkt(0, flags=S), pkt(1000, False, S | AK), pkt(2_501_000, payload=100)])
    (f,) = flows
    assert f.packet_count == 3
    assert f["Flow Duration"] == pytest.approx(2.501)
    assert f["Fwd Pkt Len Max"] == 140
    assert f["Fwd Pkt Len Mean"] == 90
    assert f["Fwd Pkt Len Std"] == 50
    assert f["Flow IAT Mean"] == pytest.approx(1.2505)
    assert f["Flow IAT Max"] == pytest.approx(2.5)
    assert f["Fwd IAT Tot"] == pytest.approx(2.501)
    assert f["Fwd Header Len"] == 80
    assert f["Pkt Len Min"] == 40
    assert f["SYN Flag Cnt"] == 2
    assert f["Fwd Seg Size Avg"] == 50
    assert f["Subflow Fwd Pkts"] == 1  # 2 forward packets over 2 subflows
    assert f["Active Max"] == pytest.approx(0.001)
    assert f["Idle Mean"] == f["Idle Min"] == f["Idle Max"] == pytest.approx(2.5)
    assert f["Idle Std"] == 0


def test_single_packet_flow_is_all_zero_spread():
    (f,) = meter([pkt(7)])
    for name in ("Flow Duration", "Fwd Pkt Len Std", "Flow IAT Mean", "Pkt Len Var", "Active Max", "Idle Max"):
        assert f[name] == 0


def test_streaming_matches_brute_force():
    rng = np.random.default_rng(21)
    for _ in range(200):
        pk = random_flow(rng, int(rng.integers(1, 21)))
        (f,) = meter(pk)
        ref = brute_force_features(pk)
        for name in FEATURE_NAMES:
            assert rel_err(f[name], ref[name]) <= 1e-9, name


def test_forward_direction_is_first_packet():
    (f,) = meter([pkt(0, fwd=False, flags=S), pkt(10)])
    assert f.five_tuple.src_ip == B and f.five_tuple.src_port == 80
    assert f["Fwd Pkt Len Max"] == 40


def test_termination_and_flush():
    t = FlowTable()
    for p in [pkt(0, flags=S), pkt(5, False, S | AK), pkt(10, flags=F | AK), pkt(20, False, F | AK)]:
        t.ingest(p)
    assert len(t.flush(now_us=21)) == 1 and len(t) == 0
    t.ingest(pkt(30, flags=S))
    t.ingest(pkt(40, flags=R))
    assert len(t.flush(now_us=41)) == 1


def test_idle_timeout_boundary_is_strict():
    cfg = FlowMeterConfig(flow_timeout_us=100)
    t = FlowTable(cfg)
    t.ingest(pkt(0))
    assert t.flush(now_us=100) == []
    assert len(t.flush(now_us=101)) == 1


def test_gap_beyond_flow_timeout_starts_a_new_flow():
    cfg = FlowMeterConfig(flow_timeout_us=1000)
    flows = meter([pkt(0), pkt(500), pkt(2000)], cfg)
    assert [f.packet_count for f in flows] == [2, 1]


def test_activity_threshold_is_strict():
    # a gap of exactly the activity timeout is not idle
    (f,) = meter([pkt(0), pkt(1_000_000)])
    assert f["Idle Max"] == 0 and f["Active Max"] == pytest.approx(1.0)
    (f,) = meter([pkt(0), pkt(1_000_001)])
    assert f["Idle Max"] == pytest.approx(1.000001) and f["Active Max"] == 0


def test_timestamp_regression():
    t = FlowTable()
    t.ingest(pkt(5000))
    t.ingest(pkt(4500))  # within the 1 ms tolerance: clamped
    with pytest.raises(TimestampRegression):
        t.ingest(pkt(3000))


def test_capacity_limit():
    t = FlowTable(FlowMeterConfig(max_flows=2))
    t.ingest(Packet(0, 1, 2, 1, 2, 6, S, 40))
    t.ingest(Packet(1, 1, 2, 3, 4, 6, S, 40))
    with pytest.raises(FlowTableFull):
        t.ingest(Packet(2, 1, 2, 5, 6, 6, S, 40))


def test_non_flow_protocols_are_counted_not_metered():
    t = FlowTable()
    assert t.ingest(Packet(0, 1, 2, 0, 0, 1, 0, 28)) is False
    assert t.non_flow_packets == 1 and len(t) == 0


def test_windowed_metering_splits_segments():
    pk = [pkt(0, flags=S), pkt(1_500_000), pkt(2_500_000)]
    flows = meter(pk, window_us=2_000_000, origin_us=0)
    assert [f.packet_count for f in flows] == [2, 1]
    assert flows[1].flow_start_us == 2_500_000


def test_csv_round_trip(tmp_path):
    rng = np.random.default_rng(2)
    flows = [f.with_label(i % 2) for i, f in enumerate(meter(random_flow(rng, 9, t0=i * 10**9)[0:9])[0] for i in range(5))]
    path = tmp_path / "f.csv"
    assert write_features_csv(flows, path) == 5
    back = read_features_csv(path)
    assert [b.values for b in back] == [f.values for f in flows]
    assert [b.label for b in back] == [0, 1, 0, 1, 0]
    assert [b.five_tuple for b in back] == [f.five_tuple for f in flows]


def test_small_examples():
    (f,) = meter([pkt(0, flags=S)])
    assert (f.packet_count, f["SYN Flag Cnt"], f["Subflow Fwd Pkts"]) == (1, 1, 1)
    (f,) = meter([pkt(0), pkt(2_000_000)])
    assert f["Flow IAT Mean"] == f["Flow IAT Max"] == 2.0
    (f,) = meter([pkt(0, payload=60), pkt(5, fwd=False), pkt(9, payload=60)])
    assert f.packet_count == 3 and f["Subflow Fwd Pkts"] == 2
    assert (f["Fwd Pkt Len Mean"], f["Fwd Pkt Len Std"], f["Fwd Pkt Len Max"]) == (100, 0, 100)
    assert FlowTable().flush(now_us=10**12) == []


def test_interleaving_does_not_change_features():
    rng = np.random.default_rng(8)
    flows = [random_flow(rng, int(rng.integers(1, 15)), t0=1_000_000 + int(rng.integers(0, 3_000_000))) for _ in range(30)]
    alone = {}
    for pk in flows:
        (f,) = meter(pk)
        alone[f.five_tuple] = f.values
    for _ in range(3):
        # a stable sort keeps each flow's own order; permuting the flow list reorders ties across flows
        order = rng.permutation(len(flows))
        merged = sorted((p for i in order for p in flows[i]), key=lambda p: p.timestamp_us)
        got = {f.five_tuple: f.values for f in meter(merged)}
        assert got == alone


def test_feature_invariants_hold_on_generated_corpora():
    from flowguard.traffic import build_corpus

    for seed in range(3):
        for f in meter(build_corpus(150, 150, seed=seed).packets):
            v = dict(zip(FEATURE_NAMES, f.values))
            assert all(x >= 0 for x in f.values)
            assert v["SYN Flag Cnt"] <= f.packet_count
            if v["Fwd Pkt Len Max"] > 0:
                assert v["Fwd Pkt Len Max"] >= v["Fwd Pkt Len Mean"]
            assert v["Idle Max"] >= v["Idle Mean"] >= v["Idle Min"]
            if v["Idle Max"] == 0:
                assert v["Idle Mean"] == v["Idle Min"] == v["Idle Std"] == 0


def test_table_never_exceeds_its_cap():
    t = FlowTable(FlowMeterConfig(max_flows=5, flow_timeout_us=10))
    for i in range(50):
        # each new flow arrives after the previous ones have timed out
        t.flush(now_us=i * 100)
        t.ingest(Packet(i * 100, 1, 2, 1000 + i, 80, 6, S, 40))
        assert len(t) <= 5
