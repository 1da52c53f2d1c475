"""Bidirectional flow metering and the 20 flow features used for detection.

Flows are keyed by the canonical 5-tuple; the forward direction is that of the
first packet seen. Every accumulator is O(1) and integer-valued (microseconds,
bytes), so standard deviations and variances are exact up to the final float
conversion. All std/var features are population statistics.
"""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass
from typing import Dict, Iterable, List, Optional, Tuple

from .packets import FiveTuple, Packet, Proto, TcpFlags, _split_headers, int_to_ip, ip_to_int

FEATURE_NAMES: Tuple[str, ...] = (
    "Flow Duration",
    "Fwd Pkt Len Max",
    "Fwd Pkt Len Mean",
    "Fwd Pkt Len Std",
    "Flow IAT Mean",
    "Flow IAT Max",
    "Fwd IAT Mean",
    "Fwd IAT Tot",
    "Fwd IAT Std",
    "Fwd Header Len",
    "Pkt Len Min",
    "Pkt Len Var",
    "SYN Flag Cnt",
    "Fwd Seg Size Avg",
    "Subflow Fwd Pkts",
    "Active Max",
    "Idle Std",
    "Idle Mean",
    "Idle Min",
    "Idle Max",
)
ID_COLUMNS: Tuple[str, ...] = ("Src IP", "Src Port", "Dst IP", "Dst Port", "Protocol", "Flow Start")
LABEL_COLUMN = "Label"

# "Fwd Header Len" counts IPv4 + TCP/UDP header bytes; set False for L4 only.
FWD_HEADER_INCLUDES_L3 = True

_SYN = int(TcpFlags.SYN)
_FIN = int(TcpFlags.FIN)
_RST = int(TcpFlags.RST)
_METERED = (int(Proto.TCP), int(Proto.UDP))


class FlowMeterError(RuntimeError):
    pass


class TimestampRegression(FlowMeterError):
    pass


class FlowTableFull(FlowMeterError):
    pass


@dataclass(frozen=True)
class FlowMeterConfig:
    activity_timeout_us: int = 1_000_000
    subflow_gap_us: int = 1_000_000
    flow_timeout_us: int = 120_000_000
    max_flows: int = 1_000_000
    regression_tolerance_us: int = 1_000


def _pop_std(n: int, s: int, ss: int) -> float:
    if n < 2:
        return 0.0
    return math.sqrt(_pop_var(n, s, ss))


def _pop_var(n: int, s: int, ss: int) -> float:
    if n < 2:
        return 0.0
    return (n * ss - s * s) / (n * n)


def _fwd_header_bytes(pkt: Packet) -> int:
    if FWD_HEADER_INCLUDES_L3:
        return pkt.header_len_bytes
    return _split_headers(pkt.protocol, pkt.header_len_bytes)[1]  # type: ignore[index]


class FlowRecord:
    """Running statistics for one bidirectional flow."""

    __slots__ = (
        "key", "fwd_ip", "fwd_port", "bwd_ip", "bwd_port", "protocol",
        "first_ts", "last_ts", "packets",
        "fwd_n", "fwd_len_sum", "fwd_len_sq", "fwd_len_max", "fwd_payload", "fwd_header",
        "bwd_n",
        "len_min", "len_sum", "len_sq",
        "iat_sum", "iat_max",
        "fwd_last_ts", "fwd_iat_n", "fwd_iat_sum", "fwd_iat_sq",
        "syn_count",
        "active_start", "active_max",
        "idle_n", "idle_sum", "idle_sq", "idle_min", "idle_max",
        "subflows",
        "fin_fwd", "fin_bwd", "rst",
    )

    def __init__(self, key: FiveTuple, pkt: Packet, ts: int) -> None:
        self.key = key
        self.fwd_ip, self.fwd_port = pkt.src_ip, pkt.src_port
        self.bwd_ip, self.bwd_port = pkt.dst_ip, pkt.dst_port
        self.protocol = pkt.protocol
        self.first_ts = self.last_ts = ts
        self.packets = 0
        self.fwd_n = self.fwd_len_sum = self.fwd_len_sq = self.fwd_len_max = 0
        self.fwd_payload = self.fwd_header = 0
        self.bwd_n = 0
        self.len_min = pkt.l3_len
        self.len_sum = self.len_sq = 0
        self.iat_sum = self.iat_max = 0
        self.fwd_last_ts = ts
        self.fwd_iat_n = self.fwd_iat_sum = self.fwd_iat_sq = 0
        self.syn_count = 0
        self.active_start = ts
        self.active_max = 0
        self.idle_n = self.idle_sum = self.idle_sq = 0
        self.idle_min = self.idle_max = 0
        self.subflows = 1
        self.fin_fwd = self.fin_bwd = self.rst = False

    @property
    def terminated(self) -> bool:
        return self.rst or (self.fin_fwd and self.fin_bwd)

    @property
    def forward_tuple(self) -> FiveTuple:
        return FiveTuple(self.fwd_ip, self.bwd_ip, self.fwd_port, self.bwd_port, self.protocol)

    def add(self, pkt: Packet, ts: int, cfg: FlowMeterConfig) -> None:
        length = pkt.l3_len
        if self.packets:
            gap = ts - self.last_ts
            self.iat_sum += gap
            if gap > self.iat_max:
                self.iat_max = gap
            if gap > cfg.activity_timeout_us:
                active = self.last_ts - self.active_start
                if active > self.active_max:
                    self.active_max = active
                if self.idle_n == 0 or gap < self.idle_min:
                    self.idle_min = gap
                if gap > self.idle_max:
                    self.idle_max = gap
                self.idle_n += 1
                self.idle_sum += gap
                self.idle_sq += gap * gap
                self.active_start = ts
            if gap > cfg.subflow_gap_us:
                self.subflows += 1
        self.packets += 1
        self.last_ts = ts

        if length < self.len_min:
            self.len_min = length
        self.len_sum += length
        self.len_sq += length * length

        flags = pkt.tcp_flags
        if flags & _SYN:
            self.syn_count += 1
        forward = pkt.src_ip == self.fwd_ip and pkt.src_port == self.fwd_port
        if forward:
            if self.fwd_n:
                g = ts - self.fwd_last_ts
                self.fwd_iat_n += 1
                self.fwd_iat_sum += g
                self.fwd_iat_sq += g * g
            self.fwd_last_ts = ts
            self.fwd_n += 1
            self.fwd_len_sum += length
            self.fwd_len_sq += length * length
            if length > self.fwd_len_max:
                self.fwd_len_max = length
            self.fwd_payload += pkt.payload_len_bytes
            self.fwd_header += _fwd_header_bytes(pkt)
            if flags & _FIN:
                self.fin_fwd = True
        else:
            self.bwd_n += 1
            if flags & _FIN:
                self.fin_bwd = True
        if flags & _RST:
            self.rst = True

    def finalize(self, label: Optional[int] = None) -> "FlowFeatures":
        if self.packets == 0:
            raise FlowMeterError("cannot finalize an empty flow record")
        n, fn = self.packets, self.fwd_n
        us = 1e-6
        iat_n = n - 1
        active_max = max(self.active_max, self.last_ts - self.active_start)
        values = (
            (self.last_ts - self.first_ts) * us,
            float(self.fwd_len_max),
            self.fwd_len_sum / fn,
            _pop_std(fn, self.fwd_len_sum, self.fwd_len_sq),
            (self.iat_sum / iat_n) * us if iat_n else 0.0,
            self.iat_max * us,
            (self.fwd_iat_sum / self.fwd_iat_n) * us if self.fwd_iat_n else 0.0,
            self.fwd_iat_sum * us,
            _pop_std(self.fwd_iat_n, self.fwd_iat_sum, self.fwd_iat_sq) * us,
            float(self.fwd_header),
            float(self.len_min),
            _pop_var(n, self.len_sum, self.len_sq),
            float(self.syn_count),
            self.fwd_payload / fn,
            fn / self.subflows,
            active_max * us,
            _pop_std(self.idle_n, self.idle_sum, self.idle_sq) * us,
            (self.idle_sum / self.idle_n) * us if self.idle_n else 0.0,
            self.idle_min * us,
            self.idle_max * us,
        )
        return FlowFeatures(self.forward_tuple, self.first_ts, n, values, label)


@dataclass(frozen=True)
class FlowFeatures:
    """The 20 named features of one flow, ordered as :data:`FEATURE_NAMES`."""

    five_tuple: FiveTuple  # oriented initiator -> responder
    flow_start_us: int
    packet_count: int
    values: Tuple[float, ...]
    label: Optional[int] = None

    def __getitem__(self, name: str) -> float:
        return self.values[FEATURE_NAMES.index(name)]

    def as_dict(self) -> Dict[str, float]:
        return dict(zip(FEATURE_NAMES, self.values))

    def with_label(self, label: Optional[int]) -> "FlowFeatures":
        return FlowFeatures(self.five_tuple, self.flow_start_us, self.packet_count, self.values, label)

    @property
    def src_ip(self) -> int:
        return self.five_tuple.src_ip


def finalize(record: FlowRecord) -> FlowFeatures:
    return record.finalize()


class FlowTable:
    """Flow state for one packet source. Not thread-safe; one owner at a time."""

    def __init__(self, config: FlowMeterConfig | None = None) -> None:
        self.config = config or FlowMeterConfig()
        self.flows: Dict[FiveTuple, FlowRecord] = {}
        self._expired: List[FlowRecord] = []
        self._clock = -1
        self.non_flow_packets = 0

    def __len__(self) -> int:
        return len(self.flows)

    def ingest(self, pkt: Packet) -> bool:
        """Account one packet; returns False for protocols that are not metered."""
        if pkt.protocol not in _METERED:
            self.non_flow_packets += 1
            return False
        ts = pkt.timestamp_us
        if ts < self._clock:
            if self._clock - ts > self.config.regression_tolerance_us:
                raise TimestampRegression(
                    f"timestamp {ts} is {self._clock - ts} us earlier than the previous packet"
                )
            ts = self._clock
        self._clock = ts
        key = FiveTuple(pkt.src_ip, pkt.dst_ip, pkt.src_port, pkt.dst_port, pkt.protocol).canonical()
        rec = self.flows.get(key)
        if rec is not None and ts - rec.last_ts > self.config.flow_timeout_us:
            self._expired.append(self.flows.pop(key))
            rec = None
        if rec is None:
            if len(self.flows) >= self.config.max_flows:
                raise FlowTableFull(f"flow table holds the configured maximum of {self.config.max_flows} flows")
            rec = FlowRecord(key, pkt, ts)
            self.flows[key] = rec
        rec.add(pkt, ts, self.config)
        return True

    def ingest_all(self, packets: Iterable[Packet]) -> None:
        for p in packets:
            self.ingest(p)

    def flush(self, now_us: int, flow_timeout_us: int | None = None) -> List[FlowFeatures]:
        """Finalize and drop flows idle strictly longer than the timeout, or torn down."""
        timeout = self.config.flow_timeout_us if flow_timeout_us is None else flow_timeout_us
        done = [r for r in self.flows.values() if r.terminated or now_us - r.last_ts > timeout]
        for r in done:
            del self.flows[r.key]
        out = [r.finalize() for r in self._expired]
        self._expired.clear()
        out.extend(r.finalize() for r in done)
        return out

    def flush_all(self) -> List[FlowFeatures]:
        out = [r.finalize() for r in self._expired]
        out.extend(r.finalize() for r in self.flows.values())
        self._expired.clear()
        self.flows.clear()
        return out


def meter(
    packets: Iterable[Packet],
    config: FlowMeterConfig | None = None,
    window_us: int | None = None,
    origin_us: int | None = None,
) -> List[FlowFeatures]:
    """Meter a whole stream.

    With ``window_us`` the table is force-flushed at every window boundary
    (``origin_us + k * window_us``), so flows that span windows are emitted
    once per window segment.
    """
    table = FlowTable(config)
    out: List[FlowFeatures] = []
    boundary = None
    for p in packets:
        if window_us is not None:
            if boundary is None:
                origin = p.timestamp_us if origin_us is None else origin_us
                boundary = origin + window_us
            while p.timestamp_us >= boundary:
                out.extend(table.flush_all())
                boundary += window_us
        table.ingest(p)
    out.extend(table.flush_all())
    return out


# -- CSV ---------------------------------------------------------------------


def csv_header() -> List[str]:
    return [*ID_COLUMNS, *FEATURE_NAMES, LABEL_COLUMN]


def write_features_csv(flows: Iterable[FlowFeatures], path: str | os.PathLike) -> int:
    n = 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(csv_header())
        for f in flows:
            t = f.five_tuple
            w.writerow(
                [int_to_ip(t.src_ip), t.src_port, int_to_ip(t.dst_ip), t.dst_port, t.protocol, f.flow_start_us]
                + [repr(v) for v in f.values]
                + ["" if f.label is None else f.label]
            )
            n += 1
    return n


def read_features_csv(path: str | os.PathLike) -> List[FlowFeatures]:
    out = []
    with open(path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        if header != csv_header():
            raise ValueError(f"{path}: unexpected flow CSV header")
        for row in r:
            t = FiveTuple(ip_to_int(row[0]), ip_to_int(row[2]), int(row[1]), int(row[3]), int(row[4]))
            vals = tuple(float(v) for v in row[6 : 6 + len(FEATURE_NAMES)])
            lab = row[-1]
            out.append(FlowFeatures(t, int(row[5]), 0, vals, int(lab) if lab != "" else None))
    return out
