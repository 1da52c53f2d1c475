import csv
import json
import shutil
import subprocess
from pathlib import Path

import jsonschema
import pytest

from flowguard.cli import main
from flowguard.flowmeter import csv_header
from flowguard.pipeline import ATTACKER_IP, expected_drops, mitigation_config

import schemas

FIXTURES = Path(__file__).parent / "fixtures"


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli")
    assert main(["gen", "--benign", "30", "--malicious", "30", "--seed", "2",
                 "--out", str(d / "c.pcap"), "--labels", str(d / "l.csv")]) == 0
    assert main(["meter", str(d / "c.pcap"), "--labels", str(d / "l.csv"), "--out", str(d / "f.csv")]) == 0
    return d


@pytest.fixture(scope="module")
def scenario_model(tmp_path_factory, segment_model):
    path = tmp_path_factory.mktemp("m") / "dtree.model"
    segment_model.save(path)
    return path


def test_gen_and_meter_outputs(corpus):
    with open(corpus / "f.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == csv_header()
    assert len(rows) == 61 and sorted(r[-1] for r in rows[1:]) == ["0"] * 30 + ["1"] * 30
    assert (corpus / "l.csv").read_text().startswith("Src IP,")


def test_gen_single_profile(tmp_path, capsys):
    assert main(["gen", "--profile", "syn_flood", "--rate", "10", "--duration", "2", "--out", str(tmp_path / "s.pcap")]) == 0
    assert "wrote 20 packets" in capsys.readouterr().out


def test_rank(corpus, capsys):
    assert main(["rank", str(corpus / "f.csv"), "--k", "3", "--json", str(corpus / "rank.json")]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0].split() == ["rank", "feature", "F"] and len(out) == 4
    ranking = json.loads((corpus / "rank.json").read_text())
    assert len(ranking) == 20 and [r["rank"] for r in ranking] == list(range(1, 21))


def test_train_dtree_and_eval_model(corpus, tmp_path, capsys):
    model = tmp_path / "dt.model"
    assert main(["train", str(corpus / "f.csv"), "--model", "dtree", "--out", str(model),
                 "--roc", str(tmp_path / "roc.csv"), "--figure", str(tmp_path / "roc.png")]) == 0
    metrics = json.loads((tmp_path / "dt.metrics.json").read_text())
    jsonschema.validate(metrics, schemas.METRICS)
    assert metrics["model"] == "dtree" and metrics["n"] == 18
    assert (tmp_path / "roc.png").stat().st_size > 0
    capsys.readouterr()
    assert main(["eval", "--model", str(model), "--data", str(corpus / "f.csv")]) == 0
    rep = json.loads(capsys.readouterr().out)
    jsonschema.validate(rep, schemas.METRICS)
    assert rep["n"] == 60


def test_train_bilstm_runs_fifty_epochs(corpus, tmp_path):
    assert main(["train", str(corpus / "f.csv"), "--model", "bilstm", "--epochs", "50", "--hp", "units=4",
                 "--out", str(tmp_path / "b.model")]) == 0
    metrics = json.loads((tmp_path / "b.metrics.json").read_text())
    assert metrics["training_meta"]["epochs"] == 50
    assert metrics["training_meta"]["wall_clock_s"] > 0


def test_eval_scores_fixture(tmp_path, capsys):
    assert main(["eval", "--scores", str(FIXTURES / "scores.csv"), "--roc", str(tmp_path / "r.csv")]) == 0
    text = capsys.readouterr().out
    assert '"accuracy": 0.7' in text
    rep = json.loads(text)
    jsonschema.validate(rep, schemas.METRICS)
    assert rep["confusion"] == {"tp": 3, "tn": 4, "fp": 1, "fn": 2}
    with open(tmp_path / "r.csv", newline="") as fh:
        rows = list(csv.DictReader(fh))
    assert rows[0] == {"fpr": "0.0", "tpr": "0.0", "threshold": "inf"} and rows[-1]["fpr"] == "1.0"


def test_run_scenario_reports_and_status(scenario_model, tmp_path, capsys):
    state, out = tmp_path / "filter.json", tmp_path / "run.jsonl"
    assert main(["run", "--scenario", "--model", str(scenario_model), "--state", str(state), "--out", str(out),
                 "--no-flows", "--figure", str(tmp_path / "w.png")]) == 0
    reports = [json.loads(line) for line in out.read_text().splitlines()]
    for r in reports:
        jsonschema.validate(r, schemas.WINDOW_REPORT)
    assert len(reports) == 4 and reports[0]["ips_blocked"] == [ATTACKER_IP]
    flood = mitigation_config().source.profiles[0]
    n = expected_drops(flood, reports[0]["end_us"])
    row = next(line for line in capsys.readouterr().out.splitlines() if line.startswith(ATTACKER_IP))
    assert row.split()[1:4] == ["src", "active", str(n)]
    assert (tmp_path / "w.png").stat().st_size > 0

    # the saved state is what `filter` operates on
    assert main(["filter", "status", "--state", str(state), "--json"]) == 0
    status = json.loads(capsys.readouterr().out)
    jsonschema.validate(status, schemas.FILTER_STATUS)
    assert status["total_dropped"] == n
    assert main(["filter", "unblock", ATTACKER_IP, "--state", str(state)]) == 0
    assert main(["filter", "status", "--state", str(state)]) == 0
    assert "inactive" in capsys.readouterr().out


def test_run_from_config_file(scenario_model, tmp_path, capsys):
    cfg = mitigation_config(model_path=str(scenario_model), duration_s=3.0, window_s=2.0)
    cfg.save(tmp_path / "cfg.json")
    assert main(["run", "--config", str(tmp_path / "cfg.json"), "--duration", "3", "--concurrent", "--timings"]) == 0
    lines = capsys.readouterr().out.splitlines()
    reports = [json.loads(x) for x in lines]
    assert [r["window_index"] for r in reports] == [1, 2]
    assert all("timings" in r for r in reports) and reports[0]["ips_blocked"] == [ATTACKER_IP]


def test_filter_block_and_unblock(tmp_path, capsys):
    state = str(tmp_path / "f.json")
    assert main(["filter", "block", "10.0.0.1", "10.0.0.2", "--state", state]) == 0
    assert main(["filter", "block", "10.0.0.1", "--state", state]) == 0
    assert capsys.readouterr().out.splitlines()[-1] == "block 10.0.0.1: no change"
    assert main(["filter", "status", "--state", state]) == 0
    rows = capsys.readouterr().out.splitlines()
    assert rows[0].startswith("xdp-filter status") and len(rows) == 4


def test_bench(tmp_path, capsys):
    assert main(["bench", "--packets", "100000", "--blocked-fraction", "0", "1", "--json", str(tmp_path / "b.json")]) == 0
    assert len(capsys.readouterr().out.splitlines()) == 6
    res = json.loads((tmp_path / "b.json").read_text())
    jsonschema.validate(res, schemas.BENCH)
    assert set(res) == {"0.0", "1.0"}


def test_config_file_supplies_flags(tmp_path, capsys):
    (tmp_path / "g.json").write_text(json.dumps({"profile": "syn_flood", "rate": 5, "duration": 2, "out": str(tmp_path / "x.pcap")}))
    assert main(["gen", "--config", str(tmp_path / "g.json")]) == 0
    assert "wrote 10 packets" in capsys.readouterr().out
    # command-line flags win over the file
    assert main(["gen", "--config", str(tmp_path / "g.json"), "--rate", "7"]) == 0
    assert "wrote 14 packets" in capsys.readouterr().out
    (tmp_path / "bad.json").write_text(json.dumps({"rte": 5}))
    assert main(["gen", "--config", str(tmp_path / "bad.json")]) == 1
    assert "unknown option 'rte'" in capsys.readouterr().err


@pytest.mark.parametrize(
    "argv,code,prefix",
    [
        ([], 1, "flowguard: usage error:"),
        (["train"], 1, "flowguard: usage error:"),
        (["run", "--scenario", "--window", "2", "--bogus"], 1, "flowguard: usage error:"),
        (["eval"], 1, "flowguard: usage error:"),
        (["filter", "block"], 1, "flowguard: usage error:"),
        (["meter", "/nonexistent.pcap"], 2, "flowguard: error:"),
        (["filter", "status", "--state", "/nonexistent.json"], 2, "flowguard: error:"),
        (["run", "--scenario", "--window", "12", "--model", "x"], 2, "flowguard: error:"),
    ],
)
def test_exit_codes(argv, code, prefix, capsys):
    assert main(argv) == code
    assert capsys.readouterr().err.startswith(prefix)


def test_runtime_error_on_corrupt_model(tmp_path, capsys):
    (tmp_path / "m.model").write_bytes(b"garbage")
    assert main(["run", "--scenario", "--model", str(tmp_path / "m.model")]) == 2
    assert "bad magic" in capsys.readouterr().err


@pytest.mark.skipif(shutil.which("flowguard") is None, reason="console script not installed")
def test_console_script(tmp_path):
    p = subprocess.run(["flowguard", "eval", "--scores", str(FIXTURES / "scores.csv")], capture_output=True, text=True)
    assert p.returncode == 0 and json.loads(p.stdout)["accuracy"] == 0.7
    p = subprocess.run(["flowguard", "nosuch"], capture_output=True, text=True)
    assert p.returncode == 1 and p.stderr.startswith("flowguard: usage error:")
