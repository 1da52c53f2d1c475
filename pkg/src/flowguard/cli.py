"""``flowguard`` command line.

Exit status: 0 success, 1 usage error, 2 runtime error. Diagnostics go to
stderr prefixed ``flowguard: usage error:`` or ``flowguard: error:``.

Every subcommand accepts ``--config FILE``, a JSON object of flag values
(keys are the long flag names with dashes or underscores); flags given on
the command line win. For ``run`` the file is instead a pipeline config.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import replace
from typing import Dict, Optional, Sequence

import numpy as np

from . import __version__

PROG = "flowguard"
MODEL_CHOICES = ["gnb", "lr", "dtree", "etrees", "mlp", "lstm", "bilstm"]


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse would exit(2)
        raise UsageError(f"{self.prog}: {message}")


def _write_json(obj, path: Optional[str]) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True) + "\n"
    if path is None or path == "-":
        sys.stdout.write(text)
    else:
        with open(path, "w") as fh:
            fh.write(text)


def _parse_hp(pairs: Sequence[str]) -> dict:
    out = {}
    for item in pairs or ():
        if "=" not in item:
            raise UsageError(f"--hp expects key=value, got {item!r}")
        k, v = item.split("=", 1)
        try:
            out[k] = json.loads(v)
        except json.JSONDecodeError:
            out[k] = v
    return out


# -- subcommands ---------------------------------------------------------------


def cmd_gen(a) -> int:
    from .packets import write_pcap
    from .traffic import TrafficKind, TrafficProfile, build_corpus, generate, write_ground_truth

    if a.profile:
        prof = TrafficProfile(TrafficKind(a.profile), a.rate, a.duration, a.src, a.dst, a.seed, a.start_us)
        pk = generate(prof)
        n = write_pcap(pk, a.out)
        print(f"wrote {len(pk)} packets ({n} bytes) to {a.out}")
        return 0
    corpus = build_corpus(a.benign, a.malicious, a.seed, session_rate=a.session_rate, bulk_fraction=a.bulk_fraction)
    n = write_pcap(corpus.packets, a.out)
    write_ground_truth(corpus.truth, a.labels)
    print(f"wrote {len(corpus.packets)} packets ({n} bytes) to {a.out}; {len(corpus.truth)} labels to {a.labels}")
    return 0


def cmd_meter(a) -> int:
    from .flowmeter import FlowMeterConfig, meter, write_features_csv
    from .packets import scan_pcap
    from .traffic import TruthIndex, read_ground_truth

    scan = scan_pcap(a.pcap)
    cfg = FlowMeterConfig(
        activity_timeout_us=int(a.activity_timeout * 1e6),
        subflow_gap_us=int(a.subflow_gap * 1e6),
        flow_timeout_us=int(a.flow_timeout * 1e6),
    )
    window = None if a.window is None else int(round(a.window * 1e6))
    flows = meter(scan.packets, cfg, window_us=window)
    unmatched = 0
    if a.labels:
        idx = TruthIndex(read_ground_truth(a.labels))
        joined = []
        for f in flows:
            lab = idx.label_for(f.five_tuple, f.flow_start_us)
            unmatched += lab is None
            joined.append(f.with_label(lab))
        flows = joined
    n = write_features_csv(flows, a.out)
    msg = f"wrote {n} flows to {a.out} ({scan.skipped} non-IPv4 frames skipped)"
    if a.labels:
        msg += f"; {unmatched} flows without ground truth"
    print(msg)
    return 0


def cmd_rank(a) -> int:
    from .dataset import f_score_rank, load_csv, train_test_split

    ds = load_csv(a.features, missing=a.missing)
    if a.test_fraction > 0:
        ds, _ = train_test_split(ds, a.test_fraction, a.seed)
    ranking = f_score_rank(ds)
    if a.json:
        _write_json([{"rank": i + 1, "feature": n, "F": None if np.isinf(f) else f} for i, (n, f) in enumerate(ranking)], a.json)
    top = a.k or len(ranking)
    print(f"{'rank':>4}  {'feature':<20}{'F':>18}")
    for i, (name, f) in enumerate(ranking[:top]):
        print(f"{i + 1:>4}  {name:<20}{('inf' if np.isinf(f) else f'{f:.6g}'):>18}")
    return 0


def _train_one(kind: str, train, test, a, out_model: str, out_metrics: str, roc_csv: Optional[str]):
    from .models.base import NEURAL_KINDS, ModelKind, evaluate, train as fit

    hp = _parse_hp(a.hp)
    if a.epochs is not None and ModelKind(kind) in NEURAL_KINDS:
        hp["epochs"] = a.epochs
    model = fit(kind, train, hp, seed=a.seed)
    size = model.save(out_model)
    rep = evaluate(model, test)
    meta = {k: v for k, v in model.meta.items() if k != "loss_history"}
    meta["wall_clock_s"] = model.train_seconds
    rep.write_json(out_metrics, model=kind, features=list(train.feature_names), training_meta=meta, model_bytes=size)
    if roc_csv:
        rep.write_roc_csv(roc_csv)
    print(f"{kind}: accuracy={rep.accuracy:.4f} f_score={rep.f_score:.4f} auc={rep.auc:.4f} -> {out_model}")
    return rep


def cmd_train(a) -> int:
    from .dataset import f_score_rank, load_csv, select_k_best, train_test_split

    ds = load_csv(a.features, missing=a.missing)
    train, test = train_test_split(ds, a.test_fraction, a.seed)
    if a.k is not None:
        ranking = f_score_rank(train)
        train = select_k_best(train, a.k, ranking)
        test = test.columns(train.feature_names)
    kinds = MODEL_CHOICES if a.model == "all" else [a.model]
    reports = {}
    if a.model == "all":
        out_dir = a.out or "models"
        os.makedirs(out_dir, exist_ok=True)
        for k in kinds:
            reports[k] = _train_one(
                k, train, test, a, os.path.join(out_dir, f"{k}.model"), os.path.join(out_dir, f"{k}.metrics.json"),
                os.path.join(out_dir, f"{k}.roc.csv"),
            )
        figure = a.figure or os.path.join(out_dir, "roc.png")
    else:
        out = a.out or f"{a.model}.model"
        metrics = a.metrics or os.path.splitext(out)[0] + ".metrics.json"
        reports[a.model] = _train_one(a.model, train, test, a, out, metrics, a.roc)
        figure = a.figure
    if figure:
        from .report import plot_roc

        plot_roc(reports, figure, title="ROC (test split)")
    return 0


def _read_scores(path: str):
    y, s = [], []
    with open(path, newline="") as fh:
        rd = csv.DictReader(fh)
        if rd.fieldnames is None or not {"label", "score"} <= set(rd.fieldnames):
            raise ValueError(f"{path}: scores CSV needs 'label' and 'score' columns")
        for line, row in enumerate(rd, start=2):
            try:
                y.append(int(row["label"]))
                s.append(float(row["score"]))
            except ValueError as e:
                raise ValueError(f"{path}:{line}: {e}") from None
    return np.array(y), np.array(s)


def cmd_eval(a) -> int:
    from .models.metrics import evaluate_scores

    if a.scores:
        if a.model or a.data:
            raise UsageError("eval: --scores excludes --model/--data")
        y, s = _read_scores(a.scores)
        rep = evaluate_scores(y, s, a.threshold)
        extra = {"source": os.path.basename(a.scores)}
    else:
        if not (a.model and a.data):
            raise UsageError("eval: give --model and --data, or --scores")
        from .dataset import load_csv
        from .models.base import predict_proba
        from .models.serialize import load_model

        model = load_model(a.model)
        ds = load_csv(a.data, missing=a.missing)
        ds = ds.columns(model.feature_names)
        rep = evaluate_scores(ds.y, predict_proba(model, ds), a.threshold)
        extra = {"model": model.kind.value}
    if a.out:
        rep.write_json(a.out, **extra)
    else:
        _write_json({**extra, **rep.to_dict()}, None)
    if a.roc:
        rep.write_roc_csv(a.roc)
    if a.figure:
        from .report import plot_roc

        plot_roc({extra.get("model", "scores"): rep}, a.figure)
    return 0


def cmd_run(a) -> int:
    from .datapath import DropTable, HookMode
    from .models.serialize import load_model
    from .pipeline import PipelineConfig, mitigation_config, reports_to_jsonl, run

    if a.scenario:
        cfg = mitigation_config(window_s=a.window or 4.0, seed=a.seed)
    elif a.config:
        cfg = PipelineConfig.load(a.config)
    else:
        raise UsageError("run: give --config or --scenario")
    if a.window is not None and not a.scenario:
        cfg = replace(cfg, capture_window_s=a.window)
    model_path = a.model or cfg.model_path
    if model_path is None:
        raise UsageError("run: no model (use --model or model_path in the config)")
    model = load_model(model_path)
    concurrent = a.concurrent or cfg.concurrent
    cfg = replace(cfg, concurrent=concurrent, model_path=model_path)
    if a.state and os.path.exists(a.state) and not a.fresh:
        table = DropTable.load(a.state)
    else:
        table = DropTable(hook_mode=HookMode(cfg.hook_mode))
    out = open(a.out, "w") if a.out and a.out != "-" else sys.stdout

    def stream(rep) -> None:
        out.write(reports_to_jsonl([rep], include_timings=a.timings, include_flows=not a.no_flows))
        out.flush()

    try:
        reports = run(cfg, a.duration, model=model, table=table, on_window=stream)
    finally:
        if out is not sys.stdout:
            out.close()
    if a.state:
        table.save(a.state)
    if a.figure:
        from .report import plot_windows

        plot_windows(reports, a.figure)
    print(table.status(), file=sys.stderr if out is sys.stdout else sys.stdout)
    return 0


def cmd_filter(a) -> int:
    from .datapath import DropTable

    if a.action == "status":
        if not os.path.exists(a.state):
            raise FileNotFoundError(f"no filter state at {a.state}")
        table = DropTable.load(a.state)
        if a.json:
            _write_json(table.status_json(), None)
        else:
            print(table.status())
        return 0
    if not a.ip:
        raise UsageError(f"filter {a.action}: an IPv4 address is required")
    table = DropTable.load(a.state) if os.path.exists(a.state) else DropTable()
    for ip in a.ip:
        changed = table.block(ip) if a.action == "block" else table.unblock(ip)
        print(f"{a.action} {ip}: {'ok' if changed else 'no change'}")
    table.save(a.state)
    return 0


def cmd_bench(a) -> int:
    from .datapath import HookMode, bench_modes

    results = {}
    for frac in a.blocked_fraction:
        res = bench_modes(a.packets, frac, a.batch, a.seed)
        modes = list(HookMode) if a.mode == "all" else [HookMode(a.mode)]
        for m in modes:
            r = res[m]
            results.setdefault(str(frac), []).append(r.to_dict())
            print(
                f"{m.value:<8} blocked={frac:<5g} packets={r.n_packets} measured={r.measured_pps / 1e6:8.2f} Mpps "
                f"adjusted={r.adjusted_pps / 1e6:8.2f} Mpps"
            )
    if a.json:
        _write_json(results, a.json)
    return 0


# -- parser -----------------------------------------------------------------------


def build_parser() -> Dict[str, argparse.ArgumentParser]:
    p = _Parser(prog=PROG, description="Flow-based DDoS detection with an XDP-style drop filter.")
    p.add_argument("--version", action="version", version=f"{PROG} {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr (default: off)")
    sub = p.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    subs: Dict[str, argparse.ArgumentParser] = {"": p}

    def add(name: str, help: str) -> argparse.ArgumentParser:
        sp = sub.add_parser(name, help=help, description=help, formatter_class=argparse.ArgumentDefaultsHelpFormatter)
        sp.add_argument("--config", help="JSON file of flag values", default=None)
        subs[name] = sp
        return sp

    g = add("gen", "generate a labelled corpus (or a single traffic profile) as pcap")
    g.add_argument("--out", default="corpus.pcap", help="pcap output path")
    g.add_argument("--labels", default="labels.csv", help="ground-truth CSV output path")
    g.add_argument("--benign", type=int, default=1000, help="benign flows")
    g.add_argument("--malicious", type=int, default=1000, help="SYN-flood flows")
    g.add_argument("--seed", type=int, default=0, help="RNG seed (numpy PCG64)")
    g.add_argument("--session-rate", type=float, default=20.0, help="benign sessions started per second")
    g.add_argument("--bulk-fraction", type=float, default=0.1, help="share of benign sessions that are bulk transfers")
    g.add_argument("--profile", choices=["benign_web", "benign_bulk", "syn_flood"], default=None,
                   help="emit one traffic profile instead of a corpus")
    g.add_argument("--rate", type=float, default=1000.0, help="profile packets per second")
    g.add_argument("--duration", type=float, default=10.0, help="profile duration in seconds")
    g.add_argument("--src", default="10.46.0.1", help="profile source address (or subnet for benign)")
    g.add_argument("--dst", default="10.46.0.10", help="profile destination address")
    g.add_argument("--start-us", type=int, default=0, help="profile start timestamp in microseconds")
    g.set_defaults(func=cmd_gen)

    m = add("meter", "meter a pcap into flow features CSV")
    m.add_argument("pcap", help="input pcap")
    m.add_argument("--out", default="features.csv", help="features CSV output path")
    m.add_argument("--labels", default=None, help="ground-truth CSV to join labels from")
    m.add_argument("--window", type=float, default=None, help="force-flush every WINDOW seconds (default: off)")
    m.add_argument("--activity-timeout", type=float, default=1.0, help="active/idle gap in seconds")
    m.add_argument("--subflow-gap", type=float, default=1.0, help="subflow gap in seconds")
    m.add_argument("--flow-timeout", type=float, default=120.0, help="flow idle timeout in seconds")
    m.set_defaults(func=cmd_meter)

    r = add("rank", "rank features by ANOVA F statistic")
    r.add_argument("features", help="features CSV")
    r.add_argument("--k", type=int, default=None, help="rows to print (default: all)")
    r.add_argument("--test-fraction", type=float, default=0.3, help="hold out this share before ranking (0: rank all)")
    r.add_argument("--seed", type=int, default=0, help="split seed")
    r.add_argument("--json", default=None, help="also write the ranking as JSON")
    r.add_argument("--missing", choices=["reject", "impute"], default="reject", help="missing-value policy")
    r.set_defaults(func=cmd_rank)

    t = add("train", "train a classifier on a stratified split and evaluate on the held-out part")
    t.add_argument("features", help="labelled features CSV")
    t.add_argument("--model", choices=MODEL_CHOICES + ["all"], default="bilstm", help="classifier kind")
    t.add_argument("--out", default=None, help="model file (directory with --model all)")
    t.add_argument("--metrics", default=None, help="metrics JSON path (default: next to the model)")
    t.add_argument("--roc", default=None, help="ROC points CSV path")
    t.add_argument("--figure", default=None, help="ROC figure path (default with --model all: OUT/roc.png)")
    t.add_argument("--epochs", type=int, default=None, help="override epochs for neural kinds")
    t.add_argument("--hp", action="append", default=[], help="hyperparameter override key=value (repeatable)")
    t.add_argument("--k", type=int, default=None, help="keep the top-K features ranked on the training split")
    t.add_argument("--test-fraction", type=float, default=0.3, help="held-out share")
    t.add_argument("--seed", type=int, default=0, help="split and training seed")
    t.add_argument("--missing", choices=["reject", "impute"], default="reject", help="missing-value policy")
    t.set_defaults(func=cmd_train)

    e = add("eval", "evaluate a model on labelled data, or a scores CSV")
    e.add_argument("--model", default=None, help="model file")
    e.add_argument("--data", default=None, help="labelled features CSV")
    e.add_argument("--scores", default=None, help="CSV with label,score columns")
    e.add_argument("--threshold", type=float, default=0.5, help="decision threshold")
    e.add_argument("--out", default=None, help="metrics JSON path (default: stdout)")
    e.add_argument("--roc", default=None, help="ROC points CSV path")
    e.add_argument("--figure", default=None, help="ROC figure path")
    e.add_argument("--missing", choices=["reject", "impute"], default="reject", help="missing-value policy")
    e.set_defaults(func=cmd_eval)

    u = add("run", "run the capture/detect/block loop")
    u.add_argument("--scenario", action="store_true", help="built-in SYN-flood mitigation scenario")
    u.add_argument("--seed", type=int, default=0, help="scenario traffic seed")
    u.add_argument("--model", default=None, help="model file (overrides the config)")
    u.add_argument("--duration", type=float, default=15.0, help="seconds of capture to process")
    u.add_argument("--window", type=float, default=None, help="capture window in seconds, at most 10")
    u.add_argument("--state", default=None, help="drop-table state file to load and save")
    u.add_argument("--fresh", action="store_true", help="ignore an existing state file")
    u.add_argument("--out", default=None, help="JSON-lines report path (default: stdout)")
    u.add_argument("--timings", action="store_true", help="include per-stage wall-clock times in reports")
    u.add_argument("--no-flows", action="store_true", help="omit per-flow verdicts from reports")
    u.add_argument("--concurrent", action="store_true", help="prefetch the next window while classifying")
    u.add_argument("--figure", default=None, help="per-window packets/drops figure path")
    u.set_defaults(func=cmd_run)

    f = add("filter", "inspect or edit a drop-table state file")
    f.add_argument("action", choices=["status", "block", "unblock"])
    f.add_argument("ip", nargs="*", help="IPv4 addresses for block/unblock")
    f.add_argument("--state", default="filter.json", help="state file")
    f.add_argument("--json", action="store_true", help="JSON status output")
    f.set_defaults(func=cmd_filter)

    b = add("bench", "measure verdict-loop throughput")
    b.add_argument("--packets", type=int, default=10_000_000, help="synthetic packets per run")
    b.add_argument("--blocked-fraction", type=float, nargs="+", default=[0.0, 0.5, 1.0],
                   help="share of packets from blocked sources")
    b.add_argument("--mode", choices=["all", "generic", "native", "offload"], default="all", help="hook mode")
    b.add_argument("--batch", type=int, default=65_536, help="packets per verdict batch")
    b.add_argument("--seed", type=int, default=0, help="synthetic stream seed")
    b.add_argument("--json", default=None, help="write results as JSON")
    b.set_defaults(func=cmd_bench)
    return subs


def _apply_config_file(sp: argparse.ArgumentParser, path: str) -> None:
    try:
        with open(path) as fh:
            values = json.load(fh)
    except (OSError, json.JSONDecodeError) as e:
        raise UsageError(f"--config {path}: {e}") from None
    if not isinstance(values, dict):
        raise UsageError(f"--config {path}: expected a JSON object")
    dests = {a.dest for a in sp._actions}
    norm = {}
    for k, v in values.items():
        d = k.lstrip("-").replace("-", "_")
        if d not in dests or d in ("config", "help"):
            raise UsageError(f"--config {path}: unknown option {k!r}")
        norm[d] = v
    sp.set_defaults(**norm)


def main(argv: Optional[Sequence[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        subs = build_parser()
        args = subs[""].parse_args(argv)
        if args.command is None:
            raise UsageError(f"{PROG}: a subcommand is required (see --help)")
        if args.config and args.command != "run":
            sp = subs[args.command]
            _apply_config_file(sp, args.config)
            args = subs[""].parse_args(argv)
        logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format=f"{PROG}: %(message)s")
        return args.func(args)
    except UsageError as e:
        print(f"{PROG}: usage error: {e}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        print(f"{PROG}: error: interrupted", file=sys.stderr)
        return 2
    except (OSError, ValueError, RuntimeError, KeyError) as e:
        print(f"{PROG}: error: {e}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
