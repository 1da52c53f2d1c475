"""Closed-loop capture -> meter -> classify -> block orchestration.

Time is cut into capture windows aligned to the source start ``t0``; window
``k`` (1-based) covers ``[t0 + (k-1)W, t0 + kW)``. Per window:

1. ingress: every source packet is checked against the drop table first;
2. survivors are metered, and all flows are force-flushed at window close;
3. flows are classified; any flow with P(malicious) >= threshold blocks its
   forward initiator's address, effective from the window boundary on.

In concurrent mode the next window's packets are fetched (and paced, for
replay) on a worker thread while the current window is classified. Verdicts
for a window are only taken after the previous window's blocks are applied,
so both modes emit identical reports.
"""

from __future__ import annotations

import enum
import json
import logging
import os
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .datapath import DropTable, HookMode
from .dataset import Dataset, from_flows
from .flowmeter import FEATURE_NAMES, FlowFeatures, FlowMeterConfig, FlowTable, meter
from .models.base import FeatureMismatch, TrainedModel, predict_proba
from .models.serialize import load_model
from .packets import FiveTuple, Packet, int_to_ip, read_pcap
from .traffic import Corpus, TrafficKind, TrafficProfile, TruthIndex, generate, merge_streams

log = logging.getLogger(__name__)

MAX_WINDOW_S = 10.0


class PipelineError(RuntimeError):
    pass


class SourceKind(str, enum.Enum):
    PCAP_REPLAY = "pcap_replay"
    SYNTHETIC = "synthetic"


@dataclass(frozen=True)
class PcapReplay:
    path: str
    # 0 replays as fast as possible; otherwise capture time / speed = wall time
    speed: float = 0.0

    kind = SourceKind.PCAP_REPLAY

    def load(self) -> List[Packet]:
        return read_pcap(self.path)


@dataclass(frozen=True)
class Synthetic:
    profiles: Tuple[TrafficProfile, ...]
    speed: float = 0.0

    kind = SourceKind.SYNTHETIC

    def load(self) -> List[Packet]:
        return merge_streams(*(generate(p) for p in self.profiles))


@dataclass(frozen=True)
class PipelineConfig:
    source: PcapReplay | Synthetic
    model_path: Optional[str] = None
    capture_window_s: float = 4.0
    block_threshold: float = 0.5
    meter: FlowMeterConfig = field(default_factory=FlowMeterConfig)
    hook_mode: HookMode = HookMode.NATIVE
    concurrent: bool = False
    origin_us: Optional[int] = None

    def __post_init__(self) -> None:
        if not 0 < self.capture_window_s <= MAX_WINDOW_S:
            raise ValueError(f"capture_window_s must be in (0, {MAX_WINDOW_S:g}], got {self.capture_window_s}")
        if not 0 < self.block_threshold <= 1:
            raise ValueError(f"block_threshold must be in (0, 1], got {self.block_threshold}")
        object.__setattr__(self, "hook_mode", HookMode(self.hook_mode))

    @property
    def window_us(self) -> int:
        return int(round(self.capture_window_s * 1e6))

    def to_dict(self) -> dict:
        src = self.source
        if isinstance(src, PcapReplay):
            sd = {"kind": src.kind.value, "path": src.path, "speed": src.speed}
        else:
            sd = {"kind": src.kind.value, "speed": src.speed, "profiles": [p.to_dict() for p in src.profiles]}
        return {
            "source": sd,
            "model_path": self.model_path,
            "capture_window_s": self.capture_window_s,
            "block_threshold": self.block_threshold,
            "meter": {
                "activity_timeout_us": self.meter.activity_timeout_us,
                "subflow_gap_us": self.meter.subflow_gap_us,
                "flow_timeout_us": self.meter.flow_timeout_us,
                "max_flows": self.meter.max_flows,
                "regression_tolerance_us": self.meter.regression_tolerance_us,
            },
            "hook_mode": self.hook_mode.value,
            "concurrent": self.concurrent,
            "origin_us": self.origin_us,
        }

    @classmethod
    def from_dict(cls, d: dict, base_dir: str | os.PathLike | None = None) -> "PipelineConfig":
        known = {"source", "model_path", "capture_window_s", "block_threshold", "meter", "hook_mode", "concurrent", "origin_us"}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        if "source" not in d:
            raise ValueError("config needs a 'source' section")

        def resolve(p: Optional[str]) -> Optional[str]:
            if p is None or base_dir is None or os.path.isabs(p):
                return p
            return os.path.join(base_dir, p)

        sd = dict(d["source"])
        kind = SourceKind(sd.pop("kind"))
        if kind is SourceKind.PCAP_REPLAY:
            source: PcapReplay | Synthetic = PcapReplay(resolve(sd["path"]), float(sd.get("speed", 0.0)))
        else:
            profiles = tuple(TrafficProfile.from_dict(p) for p in sd["profiles"])
            source = Synthetic(profiles, float(sd.get("speed", 0.0)))
        kw = {k: d[k] for k in ("capture_window_s", "block_threshold", "hook_mode", "concurrent", "origin_us") if k in d}
        return cls(
            source=source,
            model_path=resolve(d.get("model_path")),
            meter=FlowMeterConfig(**d.get("meter", {})),
            **kw,
        )

    @classmethod
    def load(cls, path: str | os.PathLike) -> "PipelineConfig":
        with open(path) as fh:
            return cls.from_dict(json.load(fh), base_dir=os.path.dirname(os.path.abspath(path)))

    def save(self, path: str | os.PathLike) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)
            fh.write("\n")


@dataclass(frozen=True)
class FlowVerdict:
    five_tuple: FiveTuple
    flow_start_us: int
    packet_count: int
    probability: float
    label: int

    def to_dict(self) -> dict:
        t = self.five_tuple
        return {
            "src": f"{int_to_ip(t.src_ip)}:{t.src_port}",
            "dst": f"{int_to_ip(t.dst_ip)}:{t.dst_port}",
            "protocol": t.protocol,
            "flow_start_us": self.flow_start_us,
            "packets": self.packet_count,
            "probability": self.probability,
            "label": self.label,
        }


@dataclass
class WindowReport:
    window_index: int
    start_us: int
    end_us: int
    packets_seen: int
    packets_dropped_at_ingress: int
    non_flow_packets: int
    flows_emitted: int
    verdicts: List[FlowVerdict]
    ips_blocked: List[str]
    source_exhausted: bool = False
    timings: Dict[str, float] = field(default_factory=dict)

    @property
    def malicious_flows(self) -> int:
        return sum(v.label for v in self.verdicts)

    def check_conservation(self) -> bool:
        metered = sum(v.packet_count for v in self.verdicts)
        return self.packets_seen == metered + self.non_flow_packets + self.packets_dropped_at_ingress

    def to_dict(self, include_timings: bool = False, include_flows: bool = True) -> dict:
        d = {
            "window_index": self.window_index,
            "start_us": self.start_us,
            "end_us": self.end_us,
            "packets_seen": self.packets_seen,
            "packets_dropped_at_ingress": self.packets_dropped_at_ingress,
            "non_flow_packets": self.non_flow_packets,
            "flows_emitted": self.flows_emitted,
            "malicious_flows": self.malicious_flows,
            "ips_blocked": self.ips_blocked,
            "source_exhausted": self.source_exhausted,
        }
        if include_flows:
            d["flows"] = [v.to_dict() for v in self.verdicts]
        if include_timings:
            d["timings"] = self.timings
        return d


def reports_to_jsonl(reports: Iterable[WindowReport], include_timings: bool = False, include_flows: bool = True) -> str:
    return "".join(
        json.dumps(r.to_dict(include_timings, include_flows), separators=(",", ":")) + "\n" for r in reports
    )


def check_schema(model: TrainedModel) -> None:
    unknown = [n for n in model.feature_names if n not in FEATURE_NAMES]
    if unknown:
        raise FeatureMismatch(f"model uses features the flow meter does not emit: {unknown}")


def classify(flows: Sequence[FlowFeatures], model: TrainedModel) -> np.ndarray:
    if not flows:
        return np.zeros(0)
    cols = [FEATURE_NAMES.index(n) for n in model.feature_names]
    X = np.array([f.values for f in flows], dtype=np.float64)[:, cols]
    return predict_proba(model, X)


def detect_once(
    packets: Sequence[Packet],
    model: TrainedModel,
    threshold: float = 0.5,
    config: FlowMeterConfig | None = None,
) -> List[Tuple[FiveTuple, float, int]]:
    """Meter, featurize and classify a packet list; touches no drop table."""
    if not packets:
        return []
    check_schema(model)
    flows = meter(packets, config)
    probs = classify(flows, model)
    return [(f.five_tuple, float(p), int(p >= threshold)) for f, p in zip(flows, probs)]


# -- windowed run -------------------------------------------------------------


@dataclass
class _Window:
    index: int
    start_us: int
    end_us: int
    packets: List[Packet]
    src: np.ndarray
    wire: np.ndarray
    exhausted: bool
    fetch_s: float


class _Source:
    """Hands out packets one capture window at a time."""

    def __init__(self, packets: List[Packet], origin_us: int, window_us: int, speed: float) -> None:
        self.packets = packets
        self.ts = np.fromiter((p.timestamp_us for p in packets), dtype=np.int64, count=len(packets))
        self.origin = origin_us
        self.window_us = window_us
        self.speed = speed
        self._wall0: Optional[float] = None

    def window(self, k: int) -> _Window:
        started = time.perf_counter()
        lo_us = self.origin + (k - 1) * self.window_us
        hi_us = lo_us + self.window_us
        lo, hi = np.searchsorted(self.ts, [lo_us, hi_us], side="left")
        pk = self.packets[lo:hi]
        if self.speed > 0:
            if self._wall0 is None:
                self._wall0 = started
            # the window is complete once its last instant has passed at replay speed
            due = self._wall0 + (hi_us - self.origin) / 1e6 / self.speed
            delay = due - time.perf_counter()
            if delay > 0:
                time.sleep(delay)
        src = np.fromiter((p.src_ip for p in pk), dtype=np.uint32, count=len(pk))
        wire = np.fromiter((p.wire_len for p in pk), dtype=np.int64, count=len(pk))
        exhausted = hi >= len(self.packets) and (len(self.ts) == 0 or self.ts[-1] < lo_us)
        return _Window(k, int(lo_us), int(hi_us), pk, src, wire, bool(exhausted), time.perf_counter() - started)


def _process(
    w: _Window,
    table: DropTable,
    flows: FlowTable,
    model: TrainedModel,
    threshold: float,
) -> WindowReport:
    t0 = time.perf_counter()
    drop = table.verdict_batch(w.src, w.wire)
    t1 = time.perf_counter()
    keep = np.flatnonzero(~drop).tolist()
    pk = w.packets
    before_nf = flows.non_flow_packets
    for i in keep:
        flows.ingest(pk[i])
    emitted = flows.flush_all()
    t2 = time.perf_counter()
    probs = classify(emitted, model)
    t3 = time.perf_counter()
    verdicts = [
        FlowVerdict(f.five_tuple, f.flow_start_us, f.packet_count, float(p), int(p >= threshold))
        for f, p in zip(emitted, probs)
    ]
    newly: List[str] = []
    for v in verdicts:
        if v.label and table.block(v.five_tuple.src_ip, now_us=w.end_us):
            newly.append(int_to_ip(v.five_tuple.src_ip))
    t4 = time.perf_counter()
    return WindowReport(
        window_index=w.index,
        start_us=w.start_us,
        end_us=w.end_us,
        packets_seen=len(pk),
        packets_dropped_at_ingress=int(drop.sum()),
        non_flow_packets=flows.non_flow_packets - before_nf,
        flows_emitted=len(emitted),
        verdicts=verdicts,
        ips_blocked=newly,
        source_exhausted=w.exhausted,
        timings={
            "fetch_s": w.fetch_s,
            "ingress_s": t1 - t0,
            "meter_s": t2 - t1,
            "classify_s": t3 - t2,
            "block_s": t4 - t3,
        },
    )


def run(
    config: PipelineConfig,
    total_duration_s: float,
    model: TrainedModel | None = None,
    table: DropTable | None = None,
    packets: Sequence[Packet] | None = None,
    on_window=None,
) -> List[WindowReport]:
    """Run the loop for ``ceil(total_duration_s / window)`` windows.

    ``model`` and ``packets`` override the config's model path and source;
    ``table`` lets the caller keep the drop table (it is mutated in place).
    """
    if total_duration_s <= 0:
        raise ValueError("total_duration_s must be positive")
    if model is None:
        if config.model_path is None:
            raise PipelineError("no model given and config has no model_path")
        model = load_model(config.model_path)
    check_schema(model)
    if table is None:
        table = DropTable(hook_mode=config.hook_mode)
    pk = list(config.source.load() if packets is None else packets)
    if any(pk[i].timestamp_us > pk[i + 1].timestamp_us for i in range(len(pk) - 1)):
        raise PipelineError("source packets are not timestamp-ordered")
    if config.origin_us is not None:
        origin = config.origin_us
    elif isinstance(config.source, Synthetic) and config.source.profiles:
        origin = min(p.start_us for p in config.source.profiles)
    else:
        origin = pk[0].timestamp_us if pk else 0
    wus = config.window_us
    n_windows = int(np.ceil(total_duration_s * 1e6 / wus - 1e-9))
    source = _Source(pk, origin, wus, config.source.speed)
    flows = FlowTable(config.meter)
    reports: List[WindowReport] = []

    def emit(rep: WindowReport) -> None:
        if rep.source_exhausted and not (reports and reports[-1].source_exhausted):
            log.warning("packet source exhausted before window %d", rep.window_index)
        reports.append(rep)
        if on_window is not None:
            on_window(rep)

    if not config.concurrent:
        for k in range(1, n_windows + 1):
            emit(_process(source.window(k), table, flows, model, config.block_threshold))
        return reports

    with ThreadPoolExecutor(max_workers=1, thread_name_prefix="capture") as pool:
        pending = pool.submit(source.window, 1)
        for k in range(1, n_windows + 1):
            w = pending.result()
            if k < n_windows:
                pending = pool.submit(source.window, k + 1)
            emit(_process(w, table, flows, model, config.block_threshold))
    return reports


# -- experiment helpers ---------------------------------------------------------

ATTACKER_IP = "10.46.0.1"
SERVER_IP = "10.46.0.10"
BENIGN_SUBNET = "10.46.2.0/24"
SCENARIO_START_US = 1_700_000_000_000_000


def mitigation_profiles(
    flood_rate_pps: float = 10_000.0,
    duration_s: float = 15.0,
    benign_rate_pps: float = 400.0,
    seed: int = 0,
    start_us: int = SCENARIO_START_US,
) -> Tuple[TrafficProfile, ...]:
    """SYN flood from the attacker address plus web background to the same server."""
    return (
        TrafficProfile(TrafficKind.SYN_FLOOD, flood_rate_pps, duration_s, ATTACKER_IP, SERVER_IP, seed, start_us),
        TrafficProfile(
            TrafficKind.BENIGN_WEB, benign_rate_pps, duration_s, BENIGN_SUBNET, SERVER_IP, seed + 1, start_us
        ),
    )


def mitigation_config(
    model_path: Optional[str] = None,
    window_s: float = 4.0,
    concurrent: bool = False,
    **profile_kw,
) -> PipelineConfig:
    return PipelineConfig(
        source=Synthetic(mitigation_profiles(**profile_kw)),
        model_path=model_path,
        capture_window_s=window_s,
        concurrent=concurrent,
    )


def expected_drops(flood: TrafficProfile, block_us: int) -> int:
    """Flood packets the generator emits at or after ``block_us``."""
    return sum(1 for p in generate(flood) if p.timestamp_us >= block_us)


def segment_dataset(
    corpus: Corpus,
    window_s: float | None = 4.0,
    config: FlowMeterConfig | None = None,
) -> Dataset:
    """Per-window flow segments of a corpus, labelled from its ground truth.

    This is the view the pipeline classifies, including the partial flows cut
    at window boundaries, so a model trained on it sees those fragments.
    ``window_s=None`` meters whole flows instead.
    """
    idx = TruthIndex(corpus.truth)
    window_us = None if window_s is None else int(round(window_s * 1e6))
    segs = meter(corpus.packets, config, window_us=window_us)
    labelled = []
    for f in segs:
        lab = idx.label_for(f.five_tuple, f.flow_start_us)
        if lab is None:
            raise PipelineError(f"segment {f.five_tuple} at {f.flow_start_us} has no ground truth")
        labelled.append(f.with_label(lab))
    return from_flows(labelled)


def with_window(config: PipelineConfig, window_s: float) -> PipelineConfig:
    return replace(config, capture_window_s=window_s)
