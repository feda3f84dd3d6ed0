import hashlib
import subprocess
import sys
from collections import Counter

import orjson
import pytest

from provmon.cli import EXIT_ALARMS, EXIT_ERROR, EXIT_OK, main, parse_faults
from provmon.csr import read_csr
from provmon.ingest import open_stream
from provmon.policy import parse_alarm_line
from provmon.scenarios import GroundTruth, SpecError


@pytest.fixture
def bovia(tmp_path):
    assert main(["gen", "--scenario", "bovia", "--seed", "7", "--noise", "2000", "--out", str(tmp_path)]) == EXIT_OK
    return tmp_path / "bovia-7.jsonl"


def test_gen_writes_trace_and_sidecar(bovia):
    assert bovia.exists()
    truth = GroundTruth.from_json((bovia.parent / "bovia-7.truth.json").read_bytes())
    assert truth.scenario == "bovia" and truth.seed == 7


def test_gen_is_deterministic(tmp_path):
    digests = []
    for d in ("a", "b"):
        main(["gen", "--scenario", "pandex", "--seed", "3", "--noise", "500", "--out", str(tmp_path / d)])
        digests.append(hashlib.sha256((tmp_path / d / "pandex-3.jsonl").read_bytes()).hexdigest())
    assert digests[0] == digests[1]


def test_run_on_attack_exits_2(bovia, tmp_path, capsys):
    out = tmp_path / "out"
    code = main(["run", "--input", str(bovia), "--out", str(out)])
    assert code == EXIT_ALARMS
    lines = (out / "alarms.log").read_text().splitlines()
    truth = GroundTruth.from_json((bovia.parent / "bovia-7.truth.json").read_bytes())
    got = Counter(parse_alarm_line(ln).policy.value for ln in lines)
    assert {k: got.get(k, 0) for k in truth.expected_alarms} == truth.expected_alarms
    assert len((out / "alarms.jsonl").read_bytes().splitlines()) == len(lines)
    assert len(list(out.glob("*.dot"))) == len(lines)
    metrics = orjson.loads((out / "metrics.json").read_bytes())
    assert metrics["events_per_sec"] > 0 and metrics["alarms"] == len(lines)
    assert metrics["ingest"]["lines_read"] == metrics["records"]
    assert (out / "quarantine.jsonl").exists()
    assert "alarms" in capsys.readouterr().out


def test_run_on_noise_exits_0(tmp_path):
    main(["gen", "--scenario", "stretch", "--seed", "1", "--noise", "3000", "--noise-only", "--out", str(tmp_path)])
    out = tmp_path / "out"
    assert main(["run", "--input", str(tmp_path / "stretch-1.jsonl"), "--out", str(out)]) == EXIT_OK
    assert (out / "alarms.log").read_text() == ""


def test_missing_policy_file_exits_1(bovia, tmp_path, capsys):
    code = main(["run", "--input", str(bovia), "--tag-policy", str(tmp_path / "nope.json"), "--out", str(tmp_path / "o")])
    assert code == EXIT_ERROR
    assert "tag policy file not found" in capsys.readouterr().err


@pytest.mark.parametrize("flag, body", [("--tag-policy", b"[1]"), ("--detect", b'{"enabled": ["X"]}'),
                                        ("--filter", b"{not json"), ("--detect", b'{"bogus": 1}')])
def test_bad_configs_exit_1(bovia, tmp_path, flag, body, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_bytes(body)
    assert main(["run", "--input", str(bovia), flag, str(cfg), "--out", str(tmp_path / "o")]) == EXIT_ERROR
    assert capsys.readouterr().err.startswith("provmon: error:")


def test_configs_are_applied(bovia, tmp_path):
    det = tmp_path / "det.json"
    det.write_bytes(b'{"enabled": ["UntrustedLoad"]}')
    out = tmp_path / "o"
    assert main(["run", "--input", str(bovia), "--detect", str(det), "--out", str(out)]) == EXIT_ALARMS
    assert {parse_alarm_line(x).policy.value for x in (out / "alarms.log").read_text().splitlines()} == {"UntrustedLoad"}


def test_missing_input_and_corrupt_input(tmp_path, capsys):
    assert main(["run", "--input", str(tmp_path / "none.jsonl"), "--out", str(tmp_path / "o")]) == EXIT_ERROR
    bad = tmp_path / "bad.jsonl"
    bad.write_bytes(b"garbage\n")
    assert main(["run", "--input", str(bad), "--out", str(tmp_path / "o")]) == EXIT_ERROR
    regress = tmp_path / "r.jsonl"
    regress.write_bytes(b'{"def":"subject","uuid":"' + b"1" * 32 + b'","pid":1}\n'
                        b'{"seq":5,"ts":0,"kind":"close","subj":"' + b"1" * 32 + b'","obj":"' + b"1" * 32 + b'"}\n'
                        b'{"seq":4,"ts":0,"kind":"close","subj":"' + b"1" * 32 + b'","obj":"' + b"1" * 32 + b'"}\n')
    assert main(["run", "--input", str(regress), "--out", str(tmp_path / "o")]) == EXIT_ERROR
    assert "does not follow" in capsys.readouterr().err


def test_run_with_csr(bovia, tmp_path):
    out = tmp_path / "o"
    main(["run", "--input", str(bovia), "--out", str(out), "--csr"])
    assert read_csr(out / "trace.csr.gz") == list(open_stream(bovia))
    metrics = orjson.loads((out / "metrics.json").read_bytes())
    assert 0 < metrics["ingest"]["bytes_csr"] < metrics["ingest"]["bytes_in"]


def test_outputs_stay_under_out(bovia, tmp_path):
    before = set(tmp_path.rglob("*"))
    out = tmp_path / "nested" / "out"
    main(["run", "--input", str(bovia), "--out", str(out), "--csr"])
    new = set(tmp_path.rglob("*")) - before
    assert new and all(p == out.parent or out in p.parents or p == out for p in new)


def test_csr_round_trip(bovia, tmp_path, capsys):
    verbose = tmp_path / "back.jsonl"
    assert main(["csr", "--input", str(bovia), "--out", str(tmp_path / "t.csr.gz"), "--verbose-out", str(verbose)]) == EXIT_OK
    printed = capsys.readouterr().out
    ratio = float(printed.split("ratio=")[1])
    assert ratio <= 0.10
    assert list(open_stream(verbose)) == list(open_stream(bovia))


def test_csr_on_empty_input(tmp_path):
    empty = tmp_path / "e.jsonl"
    empty.write_bytes(b"")
    assert main(["csr", "--input", str(empty), "--out", str(tmp_path / "e.gz")]) == EXIT_OK
    assert read_csr(tmp_path / "e.gz") == []


def test_csr_missing_input_exits_1(tmp_path):
    assert main(["csr", "--input", str(tmp_path / "x"), "--out", str(tmp_path / "y")]) == EXIT_ERROR


def test_fault_spec_parsing(tmp_path):
    assert parse_faults("missing_ip=5, unconnected=2") == {"missing_ip": 5, "unconnected": 2}
    assert parse_faults('{"uuid_reuse": 1}') == {"uuid_reuse": 1}
    assert parse_faults(None) == {}
    for bad in ("gremlins=1", "missing_ip", "missing_ip=x", "[1]"):
        with pytest.raises(SpecError):
            parse_faults(bad)
    assert main(["gen", "--scenario", "bovia", "--faults", "gremlins=1", "--out", str(tmp_path)]) == EXIT_ERROR


def test_console_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "provmon", "gen", "--scenario", "bovia", "--out", str(tmp_path)],
                          capture_output=True, text=True, env={"PROVMON_LOG": "debug", "PATH": ""})
    assert proc.returncode == 0, proc.stderr
    proc = subprocess.run([sys.executable, "-m", "provmon", "run", "--input", str(tmp_path / "bovia-0.jsonl"),
                           "--out", str(tmp_path / "o")], capture_output=True, text=True,
                          env={"PROVMON_LOG": "info", "PATH": ""})
    assert proc.returncode == 2
    assert "provmon: INFO" in proc.stderr
