"""Seeded synthetic traffic: benign TCP sessions and hping3-style SYN floods.

All randomness comes from numpy's PCG64 generator (``numpy.random.default_rng``),
so a (profile, seed) pair yields the same packet stream on every platform.

Benign traffic is a stand-in, not a model of any real capture: web-like
sessions (handshake, a few request/response exchanges separated by
heavy-tailed think times, FIN or RST teardown) mixed with longer bulk
transfers. Benign stacks send TCP options (60-byte SYN headers, 52-byte
headers afterwards); flood packets carry bare 40-byte SYN headers, as hping3
does by default.
"""

from __future__ import annotations

import csv
import enum
import ipaddress
import math
import os
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Sequence, Tuple

import numpy as np

from .packets import FiveTuple, Packet, Proto, TcpFlags, int_to_ip, ip_to_int

SYN = int(TcpFlags.SYN)
ACK = int(TcpFlags.ACK)
PSH = int(TcpFlags.PSH)
FIN = int(TcpFlags.FIN)
RST = int(TcpFlags.RST)

MSS = 1448
BENIGN_SYN_HEADER = 60
BENIGN_HEADER = 52
FLOOD_HEADER = 40

EPHEMERAL_LO = 32768
EPHEMERAL_HI = 60999
FLOOD_PORT_LO = 1024
FLOOD_PORT_SPAN = 65536 - FLOOD_PORT_LO
# unique source ports per attacker address before the sequence would wrap
FLOOD_FLOWS_PER_SOURCE = 60_000

# rough packets-per-session averages, used to turn a packet rate into a session rate
_MEAN_PKTS = {"web": 18.0, "bulk": 260.0}

DEFAULT_ATTACKER = "10.46.0.1"
DEFAULT_SERVER = "10.46.0.10"
DEFAULT_CLIENTS = "10.46.2.0/24"


class TrafficKind(str, enum.Enum):
    BENIGN_WEB = "benign_web"
    BENIGN_BULK = "benign_bulk"
    SYN_FLOOD = "syn_flood"


@dataclass(frozen=True)
class TrafficProfile:
    kind: TrafficKind
    rate_pps: float
    duration_s: float
    src_ip: str
    dst_ip: str
    seed: int = 0
    start_us: int = 0
    dst_port: int = 80

    def __post_init__(self) -> None:
        object.__setattr__(self, "kind", TrafficKind(self.kind))
        if not self.rate_pps > 0:
            raise ValueError(f"rate_pps must be positive, got {self.rate_pps}")
        if not self.duration_s > 0:
            raise ValueError(f"duration_s must be positive, got {self.duration_s}")
        if self.kind is TrafficKind.SYN_FLOOD and "/" in self.src_ip:
            raise ValueError("a SYN flood has a single source address, not a subnet")

    @property
    def end_us(self) -> int:
        return self.start_us + int(round(self.duration_s * 1e6))

    def to_dict(self) -> dict:
        return {
            "kind": self.kind.value,
            "rate_pps": self.rate_pps,
            "duration_s": self.duration_s,
            "src_ip": self.src_ip,
            "dst_ip": self.dst_ip,
            "seed": self.seed,
            "start_us": self.start_us,
            "dst_port": self.dst_port,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TrafficProfile":
        return cls(**d)


@dataclass(frozen=True)
class GroundTruth:
    """Label of one generated flow, keyed by its initiator-oriented 5-tuple."""

    five_tuple: FiveTuple
    flow_start_us: int
    label: int


@dataclass
class Corpus:
    packets: List[Packet]
    truth: List[GroundTruth] = field(default_factory=list)


# -- SYN flood ---------------------------------------------------------------


def _syn_flood(profile: TrafficProfile) -> List[Packet]:
    rng = np.random.default_rng(profile.seed)
    n = int(round(profile.rate_pps * profile.duration_s))
    spacing = 1e6 / profile.rate_pps
    jitter = rng.uniform(-0.4, 0.4, n) * spacing
    offsets = np.floor((np.arange(n) + 0.5) * spacing + jitter).astype(np.int64)
    base = int(rng.integers(0, FLOOD_PORT_SPAN))
    src = ip_to_int(profile.src_ip)
    dst = ip_to_int(profile.dst_ip)
    start = profile.start_us
    return [
        Packet(
            timestamp_us=start + int(off),
            src_ip=src,
            dst_ip=dst,
            src_port=FLOOD_PORT_LO + (base + i) % FLOOD_PORT_SPAN,
            dst_port=profile.dst_port,
            protocol=Proto.TCP,
            tcp_flags=SYN,
            header_len_bytes=FLOOD_HEADER,
            payload_len_bytes=0,
        )
        for i, off in enumerate(offsets.tolist())
    ]


# -- benign sessions ---------------------------------------------------------


class _Session:
    """Builds one TCP session as (timestamp, packet) events."""

    def __init__(self, client: int, cport: int, server: int, sport: int) -> None:
        self.client, self.cport, self.server, self.sport = client, cport, server, sport
        self.events: List[Tuple[int, Packet]] = []

    def send(self, ts: float, from_client: bool, flags: int, payload: int = 0, header: int = BENIGN_HEADER) -> None:
        if from_client:
            s, sp, d, dp = self.client, self.cport, self.server, self.sport
        else:
            s, sp, d, dp = self.server, self.sport, self.client, self.cport
        t = int(ts)
        self.events.append(
            (t, Packet(t, s, d, sp, dp, Proto.TCP, flags, header, payload))
        )


def _think_time_us(rng: np.random.Generator) -> float:
    # Pareto(1.5) tail: mostly sub-second, occasionally several seconds
    return min(30e6, (rng.pareto(1.5) + 1.0) * 150e3)


def _build_session(
    rng: np.random.Generator, kind: str, client: int, cport: int, server: int, sport: int, t0: float
) -> _Session:
    s = _Session(client, cport, server, sport)
    rtt = rng.uniform(2e3, 40e3)
    half = rtt / 2
    t = t0
    s.send(t, True, SYN, header=BENIGN_SYN_HEADER)
    s.send(t + half, False, SYN | ACK, header=BENIGN_SYN_HEADER)
    t += rtt
    s.send(t, True, ACK)

    if kind == "web":
        exchanges = min(6, int(rng.geometric(0.55)))
        mean_log, sigma, cap = math.log(9_000), 1.1, 400
        bw_bps = rng.uniform(20e6, 200e6)
    else:
        exchanges = 1 + int(rng.integers(0, 2))
        mean_log, sigma, cap = math.log(250_000), 0.6, 2_000
        bw_bps = rng.uniform(200e6, 1e9)
    per_pkt_us = MSS * 8 / bw_bps * 1e6

    for k in range(exchanges):
        t += rng.uniform(100, 800) if k == 0 else _think_time_us(rng)
        req = int(np.clip(rng.lognormal(math.log(420), 0.5), 40, MSS))
        s.send(t, True, PSH | ACK, req)
        t += half
        n_bytes = rng.lognormal(mean_log, sigma)
        n_pkts = int(min(cap, max(1, math.ceil(n_bytes / MSS))))
        last_full = int(n_bytes) % MSS or MSS
        for j in range(n_pkts):
            t += rng.exponential(per_pkt_us)
            size = MSS if j < n_pkts - 1 else min(MSS, max(1, last_full))
            s.send(t, False, (PSH | ACK) if j == n_pkts - 1 else ACK, size)
            if j % 2 == 1 or j == n_pkts - 1:
                s.send(t + half, True, ACK)
        t += half

    t += rng.uniform(1e3, 50e3)
    if rng.random() < 0.1:
        s.send(t, True, RST | ACK)
    else:
        s.send(t, True, FIN | ACK)
        s.send(t + half, False, FIN | ACK)
        s.send(t + rtt, True, ACK)
    s.events.sort(key=lambda e: e[0])
    return s


class _ClientPool:
    """Hands out (client ip, ephemeral port) pairs that never repeat."""

    def __init__(self, rng: np.random.Generator, subnet: str) -> None:
        net = ipaddress.IPv4Network(subnet, strict=False)
        hosts = [int(h) for h in net.hosts()] or [int(net.network_address)]
        self.rng = rng
        self.hosts = hosts
        self.next_port: Dict[int, int] = {}

    def take(self) -> Tuple[int, int]:
        for _ in range(len(self.hosts) * 4):
            ip = self.hosts[int(self.rng.integers(0, len(self.hosts)))]
            port = self.next_port.get(ip)
            if port is None:
                port = int(self.rng.integers(EPHEMERAL_LO, EPHEMERAL_HI - 5000))
            if port <= EPHEMERAL_HI:
                self.next_port[ip] = port + 1
                return ip, port
        raise ValueError("client subnet exhausted its ephemeral ports")


def _benign(
    rng: np.random.Generator,
    kinds: Sequence[str],
    starts: Iterable[float],
    clients: _ClientPool,
    server: int,
    sport: int,
) -> Tuple[List[_Session], List[float]]:
    sessions, t0s = [], []
    for kind, t0 in zip(kinds, starts):
        ip, port = clients.take()
        sessions.append(_build_session(rng, kind, ip, port, server, sport, t0))
        t0s.append(t0)
    return sessions, t0s


def _merge(sessions: Sequence[_Session], end_us: int | None = None) -> List[Packet]:
    events = []
    for idx, s in enumerate(sessions):
        events.extend((t, idx, seq, p) for seq, (t, p) in enumerate(s.events))
    events.sort(key=lambda e: (e[0], e[1], e[2]))
    if end_us is None:
        return [e[3] for e in events]
    return [e[3] for e in events if e[0] < end_us]


def generate(profile: TrafficProfile) -> List[Packet]:
    """Timestamp-ordered packet stream for one profile.

    SYN floods produce exactly ``round(rate_pps * duration_s)`` packets. Benign
    kinds start sessions as a Poisson process sized to approximate the packet
    rate; sessions still running at the end of the interval are cut off.
    """
    if profile.kind is TrafficKind.SYN_FLOOD:
        return _syn_flood(profile)
    rng = np.random.default_rng(profile.seed)
    kind = "web" if profile.kind is TrafficKind.BENIGN_WEB else "bulk"
    session_rate = profile.rate_pps / _MEAN_PKTS[kind]
    starts: List[float] = []
    t = float(profile.start_us)
    end = profile.end_us
    while True:
        t += rng.exponential(1e6 / session_rate)
        if t >= end:
            break
        starts.append(t)
    clients = _ClientPool(rng, profile.src_ip)
    sessions, _ = _benign(
        rng, [kind] * len(starts), starts, clients, ip_to_int(profile.dst_ip), profile.dst_port
    )
    return _merge(sessions, end)


def merge_streams(*streams: Sequence[Packet]) -> List[Packet]:
    """Stable timestamp merge; ties keep the order of the arguments."""
    tagged = [(p.timestamp_us, i, j, p) for i, s in enumerate(streams) for j, p in enumerate(s)]
    tagged.sort(key=lambda e: (e[0], e[1], e[2]))
    return [e[3] for e in tagged]


def build_corpus(
    n_benign_flows: int,
    n_malicious_flows: int,
    seed: int = 0,
    *,
    session_rate: float = 20.0,
    bulk_fraction: float = 0.1,
    start_us: int = 1_700_000_000_000_000,
    server: str = DEFAULT_SERVER,
    clients: str = DEFAULT_CLIENTS,
    attackers: Sequence[str] = ("10.46.0.1", "10.46.0.2", "10.46.0.3", "10.46.0.4", "10.46.0.5"),
) -> Corpus:
    """Balanced labelled corpus: benign sessions (label 0) and SYN-flood flows (label 1).

    Every generated session, and every flood packet, is exactly one flow, so the
    metered flow count equals ``n_benign_flows + n_malicious_flows``.
    """
    if n_benign_flows <= 0 or n_malicious_flows <= 0:
        raise ValueError("both flow counts must be positive")
    if n_malicious_flows > FLOOD_FLOWS_PER_SOURCE * len(attackers):
        raise ValueError("too many flood flows for the attacker pool")
    rng = np.random.default_rng(seed)
    span_us = n_benign_flows / session_rate * 1e6
    starts = start_us + np.sort(rng.uniform(0, span_us, n_benign_flows))
    kinds = np.where(rng.random(n_benign_flows) < bulk_fraction, "bulk", "web").tolist()
    pool = _ClientPool(rng, clients)
    server_ip = ip_to_int(server)
    sessions, t0s = _benign(rng, kinds, starts.tolist(), pool, server_ip, 80)
    truth = [
        GroundTruth(
            FiveTuple(s.client, s.server, s.cport, s.sport, int(Proto.TCP)), s.events[0][0], 0
        )
        for s in sessions
    ]
    benign = _merge(sessions)

    floods = []
    remaining = n_malicious_flows
    child_seeds = rng.integers(0, 2**63, len(attackers))
    for attacker, child in zip(attackers, child_seeds.tolist()):
        if remaining == 0:
            break
        count = min(remaining, FLOOD_FLOWS_PER_SOURCE)
        remaining -= count
        rate = count / (span_us / 1e6)
        flood = generate(
            TrafficProfile(
                TrafficKind.SYN_FLOOD, rate, count / rate, attacker, server, child, start_us, 80
            )
        )
        if len(flood) != count:  # float rounding in rate * duration
            raise AssertionError(f"flood generated {len(flood)} packets, wanted {count}")
        floods.append(flood)
        truth.extend(GroundTruth(p.five_tuple, p.timestamp_us, 1) for p in flood)
    return Corpus(merge_streams(benign, *floods), truth)


# -- ground truth CSV --------------------------------------------------------

TRUTH_COLUMNS = ["Src IP", "Src Port", "Dst IP", "Dst Port", "Protocol", "Flow Start", "Label"]


def write_ground_truth(truth: Iterable[GroundTruth], path: str | os.PathLike) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(TRUTH_COLUMNS)
        for g in truth:
            t = g.five_tuple
            w.writerow(
                [int_to_ip(t.src_ip), t.src_port, int_to_ip(t.dst_ip), t.dst_port, t.protocol, g.flow_start_us, g.label]
            )


def read_ground_truth(path: str | os.PathLike) -> List[GroundTruth]:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(
                GroundTruth(
                    FiveTuple(
                        ip_to_int(row["Src IP"]),
                        ip_to_int(row["Dst IP"]),
                        int(row["Src Port"]),
                        int(row["Dst Port"]),
                        int(row["Protocol"]),
                    ),
                    int(row["Flow Start"]),
                    int(row["Label"]),
                )
            )
    return out


class TruthIndex:
    """Looks up the generated flow a metered flow (or flow segment) belongs to."""

    def __init__(self, truth: Iterable[GroundTruth]) -> None:
        self._by_key: Dict[FiveTuple, List[Tuple[int, int]]] = {}
        for g in truth:
            self._by_key.setdefault(g.five_tuple.canonical(), []).append((g.flow_start_us, g.label))
        for v in self._by_key.values():
            v.sort()

    def label_for(self, key: FiveTuple, start_us: int) -> int | None:
        cands = self._by_key.get(key.canonical())
        if not cands:
            return None
        label = None
        for t0, lab in cands:
            if t0 <= start_us:
                label = lab
            else:
                break
        return label
