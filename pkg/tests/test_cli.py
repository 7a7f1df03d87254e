import json

import pytest

from gridsec.cli import main


@pytest.fixture(scope="module")
def scan_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("scan")
    assert main(["run", "--scenario", "scan", "--out", str(out)]) == 0
    return out


def test_run_writes_five_files(scan_run):
    names = sorted(p.name for p in scan_run.iterdir())
    assert names == ["alerts.jsonl", "events.jsonl", "incidents.txt", "metrics.json", "monitoring.jsonl"]


def test_bad_scenario_path(tmp_path, capsys):
    assert main(["run", "--scenario", str(tmp_path / "nope.yaml"), "--out", str(tmp_path)]) == 2
    assert "not found" in capsys.readouterr().err


def test_invalid_scenario(tmp_path):
    bad = tmp_path / "bad.yaml"
    bad.write_text("duration_ms: [\n")
    assert main(["run", "--scenario", str(bad), "--out", str(tmp_path / "o")]) == 2


def test_seed_override(tmp_path):
    assert main(["run", "--scenario", "scan", "--out", str(tmp_path), "--seed", "42", "--duration", "30000"]) == 0
    info = json.loads((tmp_path / "events.jsonl").read_text().splitlines()[0])
    assert info["kind"] == "run-info"
    assert info["payload"]["seed"] == 42 and info["payload"]["durationMs"] == 30000


def test_metrics(scan_run, capsys):
    capsys.readouterr()
    rc = main(["metrics", "--alerts", str(scan_run / "alerts.jsonl"), "--events", str(scan_run / "events.jsonl")])
    assert rc == 0
    m = json.loads(capsys.readouterr().out)
    assert m["recall"] == 1.0 and m["precision"] == 1.0


def test_benign_metrics_na(tmp_path, capsys):
    main(["run", "--scenario", "primary_fault", "--out", str(tmp_path)])
    capsys.readouterr()
    main(["metrics", "--alerts", str(tmp_path / "alerts.jsonl"), "--events", str(tmp_path / "events.jsonl")])
    m = json.loads(capsys.readouterr().out)
    assert (m["truePositives"], m["falsePositives"], m["recall"]) == (0, 0, "n/a")


def test_replay_identical(scan_run, tmp_path):
    out = tmp_path / "replayed.jsonl"
    assert main(["replay", "--events", str(scan_run / "events.jsonl"), "--out", str(out)]) == 0
    assert out.read_bytes() == (scan_run / "alerts.jsonl").read_bytes()


def test_replay_divergence(scan_run, tmp_path, capsys):
    lines = (scan_run / "events.jsonl").read_text().splitlines()
    idx = next(i for i, line in enumerate(lines) if '"kind":"packet"' in line and '"label":"scan"' in line)
    lines[idx] = lines[idx].replace('"srcL3":"10.1.0.66"', '"srcL3":"10.0.0.10"')
    (tmp_path / "events.jsonl").write_text("\n".join(lines) + "\n")
    (tmp_path / "alerts.jsonl").write_bytes((scan_run / "alerts.jsonl").read_bytes())
    rc = main(["replay", "--events", str(tmp_path / "events.jsonl"), "--out", str(tmp_path / "r.jsonl")])
    assert rc == 2
    assert "diverges" in capsys.readouterr().err


def test_replay_missing_file(tmp_path):
    assert main(["replay", "--events", str(tmp_path / "missing.jsonl")]) == 2


SCRIPT = """\
lookup MEAS implausible
start MEAS.01
do inspect-rtu LOG.01
do identify-source DEVICE.01
do inspect-rtu LOG.01 configuration changed outside the work plan
do escalate-security escalate
"""


def test_guide_script(tmp_path, capsys):
    script = tmp_path / "script.txt"
    script.write_text(SCRIPT)
    trace = tmp_path / "trace.txt"
    assert main(["guide", "--script", str(script), "--trace", str(trace)]) == 0
    out = capsys.readouterr().out
    assert "not accepted" in out  # the out-of-order action is re-prompted
    text = trace.read_text()
    assert "ESCALATE security-incident" in text
    assert '"escalated":true' in text


def test_guide_eof_saves(tmp_path):
    script = tmp_path / "script.txt"
    script.write_text("start MEAS.01\n")
    trace = tmp_path / "trace.txt"
    assert main(["guide", "--script", str(script), "--trace", str(trace)]) == 0
    assert "MEAS.01" in trace.read_text()


def test_guide_missing_file(tmp_path):
    assert main(["guide", "--file", str(tmp_path / "g.yaml")]) == 2


def test_guide_invalid_file(tmp_path):
    bad = tmp_path / "g.yaml"
    bad.write_text("observations:\n  MEAS.01: {category: MEAS, entry: true, description: x, actions: [nope]}\n")
    assert main(["guide", "--file", str(bad), "--trace", str(tmp_path / "t")]) == 2
