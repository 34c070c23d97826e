import json
import math
import signal
import socket
import subprocess
import sys
import threading
from pathlib import Path

import pytest

from bracelet.cli import main
from bracelet.cloud import CloudClient, CloudService, make_server
from bracelet.distance import CalibrationSample, write_calibration_csv

ROOT = Path(__file__).resolve().parents[1]
SCENARIOS = ROOT / "scenarios"
A, B = bytes([1]) * 16, bytes([2]) * 16


def test_simulate_writes_report(tmp_path, capsys):
    out = tmp_path / "report.json"
    code = main(["simulate", "--scenario", str(SCENARIOS / "cross_rotation_1200s.json"),
                 "--output", str(out)])
    assert code == 0
    report = json.loads(out.read_text())
    assert report["score"] == {"precision": 1.0, "recall": 1.0}
    assert "precision=1.0000 recall=1.0000" in capsys.readouterr().out


def test_simulate_is_byte_reproducible(tmp_path):
    outs = []
    for name in ("a.json", "b.json"):
        out = tmp_path / name
        assert main(["simulate", "--scenario", str(SCENARIOS / "office_day.json"),
                     "--output", str(out)]) == 0
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]


def test_simulate_mode_seed_and_csv(tmp_path):
    out = tmp_path / "timeline.csv"
    assert main(["simulate", "--scenario", str(SCENARIOS / "short_contact_840s.json"),
                 "--output", str(out), "--mode", "cloud", "--seed", "9",
                 "--format", "csv"]) == 0
    lines = out.read_text().splitlines()
    assert lines[0] == "agent,t_s,risk"
    assert "alice,800.0,NoRisk" in lines


def test_simulate_validation_names_agent(tmp_path, capsys):
    data = json.loads((SCENARIOS / "short_contact_840s.json").read_text())
    data["agents"][1]["trajectory"] = [[800, 1, 0], [800, 2, 0]]
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(data, indent=2))
    assert main(["simulate", "--scenario", str(path), "--output",
                 str(tmp_path / "r.json")]) == 2
    err = capsys.readouterr().err
    line = next(l for l in err.splitlines() if "agent 'bob'" in l)
    expected_line = path.read_text().splitlines().index('      "id": "bob",') + 1
    assert f"line {expected_line}:" in line
    assert not (tmp_path / "r.json").exists()


def test_simulate_missing_file(tmp_path):
    assert main(["simulate", "--scenario", str(tmp_path / "nope.json")]) == 1


def test_simulate_invalid_json(tmp_path, capsys):
    path = tmp_path / "broken.json"
    path.write_text('{\n  "seed": 1,\n  oops\n}')
    assert main(["simulate", "--scenario", str(path)]) == 2
    assert "line 3" in capsys.readouterr().err


def test_fit_model(tmp_path, capsys):
    csv_path = tmp_path / "cal.csv"
    write_calibration_csv(csv_path, [
        CalibrationSample(0.0, -(40 + 20 * math.log10(d)), float(d)) for d in (1, 2, 4, 8)])
    out = tmp_path / "model.json"
    assert main(["fit-model", "--calibration", str(csv_path), "--output", str(out)]) == 0
    model = json.loads(out.read_text())
    assert model["n"] == pytest.approx(2.0, abs=1e-9)
    assert model["pl0_db"] == pytest.approx(40.0, abs=1e-9)


def test_fit_model_degenerate(tmp_path):
    csv_path = tmp_path / "cal.csv"
    write_calibration_csv(csv_path, [CalibrationSample(0, -40, 1.0)] * 3)
    assert main(["fit-model", "--calibration", str(csv_path)]) == 2


def test_rfid_commands(capsys):
    assert main(["rfid", "encode", "NoRisk", "0"]) == 0
    assert capsys.readouterr().out.strip() == "524201000000000018"
    assert main(["rfid", "decode", "524201000000000018"]) == 0
    assert json.loads(capsys.readouterr().out) == {"risk": "NoRisk", "level": 0,
                                                   "issued_epoch": 0}
    assert main(["rfid", "access", "524201000000000018", "--now-epoch", "100"]) == 0
    verdict = json.loads(capsys.readouterr().out)
    assert verdict["granted"] is False and verdict["reason"] == "stale"
    assert main(["rfid", "decode", "524201000000000019"]) == 2
    assert main(["rfid", "encode", "Purple", "0"]) == 2


@pytest.fixture
def server_url(tmp_path):
    service = CloudService(tmp_path / "j.jsonl")
    server = make_server(service, "127.0.0.1", 0)
    threading.Thread(target=server.serve_forever, daemon=True).start()
    yield "127.0.0.1:%d" % server.server_address[1]
    server.shutdown()
    server.server_close()


def test_check_against_server(tmp_path, server_url, capsys):
    CloudClient(server_url).upload({"tags": [A.hex(), B.hex()]})
    contacts = tmp_path / "contacts.json"
    contacts.write_text(json.dumps({"contacts": [
        {"tag": A.hex(), "exposure_s": 480}, {"tag": B.hex(), "exposure_s": 480}]}))
    assert main(["check", "--contacts", str(contacts), "--server", server_url]) == 0
    assert json.loads(capsys.readouterr().out)["positive"] is True


def test_check_empty_server_negative(tmp_path, server_url, capsys):
    contacts = tmp_path / "contacts.json"
    contacts.write_text(json.dumps([{"tag": A.hex(), "exposure_s": 5000}]))
    assert main(["check", "--contacts", str(contacts), "--server", server_url]) == 0
    assert json.loads(capsys.readouterr().out)["positive"] is False


def test_check_server_rejects(tmp_path, server_url):
    contacts = tmp_path / "contacts.json"
    contacts.write_text(json.dumps([{"tag": A.hex(), "exposure_s": -1}]))
    assert main(["check", "--contacts", str(contacts), "--server", server_url]) == 2


def test_check_env_server(tmp_path, server_url, monkeypatch, capsys):
    monkeypatch.setenv("BRACELET_SERVER", server_url)
    contacts = tmp_path / "contacts.json"
    contacts.write_text("[]")
    assert main(["check", "--contacts", str(contacts)]) == 0


# -- serve as a real process ------------------------------------------------------

def start_serve(journal, listen="127.0.0.1:0"):
    proc = subprocess.Popen(
        [sys.executable, "-m", "bracelet.cli", "serve", "--listen", listen,
         "--journal", str(journal)],
        stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True)
    line = proc.stdout.readline()
    if not line:
        proc.wait(timeout=10)
        return proc, None
    return proc, line.split()[2]


def test_serve_upload_kill_restart_fetch(tmp_path):
    journal = tmp_path / "journal.jsonl"
    proc, addr = start_serve(journal)
    try:
        client = CloudClient(addr)
        client.upload({"tags": [A.hex()]})
        client.upload({"tags": [B.hex()]})
        before = client.fetch(0)
    finally:
        proc.send_signal(signal.SIGKILL)
        proc.wait(timeout=10)
    proc, addr = start_serve(journal)
    try:
        assert CloudClient(addr).fetch(0) == before
        assert before["new_cursor"] == 2
    finally:
        proc.terminate()
        proc.wait(timeout=10)


def test_serve_occupied_port(tmp_path):
    sock = socket.socket()
    sock.bind(("127.0.0.1", 0))
    sock.listen(1)
    try:
        proc, addr = start_serve(tmp_path / "j.jsonl",
                                 "127.0.0.1:%d" % sock.getsockname()[1])
        assert addr is None and proc.returncode == 1
    finally:
        sock.close()


def test_serve_unreadable_journal(tmp_path):
    journal = tmp_path / "j.jsonl"
    journal.write_text("not json\n")
    proc, addr = start_serve(journal)
    assert addr is None and proc.returncode == 1
    proc, addr = start_serve(tmp_path / "missing-dir" / "j.jsonl")
    assert addr is None and proc.returncode == 1
