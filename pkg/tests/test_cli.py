import json
import subprocess
import sys

import pytest

from iotbed.cli import exit_code, main
from iotbed.demo import demo_document

from builders import document, small_config


@pytest.fixture
def demo4(tmp_path):
    p = tmp_path / "demo4.json"
    p.write_bytes(demo_document(4))
    return p


@pytest.fixture
def small(tmp_path):
    p = tmp_path / "small.json"
    p.write_bytes(document())
    return p


def write_suite(tmp_path, steps, name="s"):
    p = tmp_path / f"{name}.json"
    p.write_text(json.dumps({"name": name, "cases": [{"name": "c", "steps": steps}]}))
    return p


@pytest.mark.parametrize("verdict, code", [("Passed", 0), ("PassedWithWarnings", 0), ("Failed", 1), ("Broken", 2)])
def test_exit_code_table(verdict, code):
    assert exit_code(verdict) == code


def test_run_demo4_smoke(demo4, capsys):
    assert main(["run", "--config", str(demo4), "--suite", "builtin:smoke"]) == 0
    assert capsys.readouterr().out.strip() == "VERDICT Passed"


def test_run_failing_assert(small, tmp_path, capsys):
    suite = write_suite(tmp_path, [{"kind": "assert-state", "device": "door", "expected": "open"}])
    assert main(["run", "--config", str(small), "--suite", str(suite)]) == 1
    assert "VERDICT Failed" in capsys.readouterr().out


def test_missing_suite_is_usage_error(small, capsys):
    with pytest.raises(SystemExit) as ei:
        main(["run", "--config", str(small)])
    assert ei.value.code == 2
    assert "usage" in capsys.readouterr().err


def test_bad_config_exit_2(tmp_path, capsys):
    p = tmp_path / "bad.json"
    p.write_text("{")
    suite = write_suite(tmp_path, [])
    assert main(["run", "--config", str(p), "--suite", str(suite)]) == 2
    assert "error" in capsys.readouterr().err


def test_unknown_builtin_suite(small):
    assert main(["run", "--config", str(small), "--suite", "builtin:nope"]) == 2


def test_run_writes_log_and_reports(demo4, tmp_path):
    log, rj, rx = tmp_path / "run.plog", tmp_path / "r.json", tmp_path / "r.xml"
    code = main(["run", "--config", str(demo4), "--suite", "builtin:smoke", "--seed", "7",
                 "--log", str(log), "--report-json", str(rj), "--report-xml", str(rx)])
    assert code == 0
    assert json.loads(log.read_text().splitlines()[0])["seed"] == 7
    assert json.loads(rj.read_text())["verdict"] == "Passed"
    assert rx.read_text().startswith("<?xml")


def test_seed_precedence(small, tmp_path, monkeypatch):
    suite = write_suite(tmp_path, [{"kind": "sleep", "ms": 1}])
    log = tmp_path / "a.plog"

    def seed_of(*extra):
        main(["run", "--config", str(small), "--suite", str(suite), "--log", str(log), *extra])
        return json.loads(log.read_text().splitlines()[0])["seed"]

    monkeypatch.delenv("PATRIOT_SEED", raising=False)
    assert seed_of() == 0
    monkeypatch.setenv("PATRIOT_SEED", "77")
    assert seed_of() == 77
    assert seed_of("--seed", "5") == 5
    cfg = tmp_path / "seeded.json"
    cfg.write_bytes(document(small_config(seed=13)))
    monkeypatch.delenv("PATRIOT_SEED")
    main(["run", "--config", str(cfg), "--suite", str(suite), "--log", str(log)])
    assert json.loads(log.read_text().splitlines()[0])["seed"] == 13


def test_replay_round_trip_and_corruption(demo4, tmp_path, capsys):
    log = tmp_path / "run.plog"
    main(["run", "--config", str(demo4), "--suite", "builtin:smoke", "--log", str(log)])
    assert main(["replay", "--log", str(log), "--config", str(demo4)]) == 0
    assert "REPLAY identical" in capsys.readouterr().out

    lines = log.read_text().splitlines()
    rec = json.loads(lines[5])
    rec["body"]["tampered"] = 1
    lines[5] = json.dumps(rec)
    bad = tmp_path / "bad.plog"
    bad.write_text("\n".join(lines) + "\n")
    assert main(["replay", "--log", str(bad), "--config", str(demo4)]) == 1
    assert "first_divergence=4" in capsys.readouterr().out


def test_replay_wrong_config(demo4, small, tmp_path):
    log = tmp_path / "run.plog"
    main(["run", "--config", str(demo4), "--suite", "builtin:smoke", "--log", str(log)])
    assert main(["replay", "--log", str(log), "--config", str(small)]) == 2


def test_perf_echo(small, capsys):
    code = main(["perf", "--config", str(small), "--target", "echo.ping", "--rate", "50", "--duration", "1000"])
    assert code == 0
    m = json.loads(capsys.readouterr().out)
    assert m["sent"] == m["ok"] == 50 and m["latency_ms"]["p99"] == 20


@pytest.mark.parametrize("extra", [["--target", "echo.ping", "--rate", "0"], ["--target", "ghost.x", "--rate", "1"],
                                   ["--target", "echo.ping", "--rate", "1", "--fields", "[1]"]])
def test_perf_validation_errors(small, extra):
    assert main(["perf", "--config", str(small), "--duration", "100", *extra]) == 2


def test_demo_command(capsys):
    assert main(["demo", "--id", "4"]) == 0
    assert capsys.readouterr().out.encode() == demo_document(4)
    assert main(["demo", "--id", "9"]) == 2


def test_list_configs(tmp_path, capsys):
    two = tmp_path / "two.json"
    two.write_bytes(document(small_config(name="a"), small_config(name="b")))
    assert main(["list-configs", "--config", str(two)]) == 0
    assert capsys.readouterr().out.splitlines() == ["a", "b"]
    empty = tmp_path / "empty.json"
    empty.write_text('{"configs": []}')
    assert main(["list-configs", "--config", str(empty)]) == 0
    assert capsys.readouterr().out == ""
    broken = tmp_path / "broken.json"
    broken.write_text("[[")
    assert main(["list-configs", "--config", str(broken)]) == 2


def test_module_entry_point(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "iotbed", "demo", "--id", "2"], capture_output=True)
    assert proc.returncode == 0 and proc.stdout == demo_document(2)
