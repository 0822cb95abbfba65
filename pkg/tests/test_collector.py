import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

from iotbed.collector import (
    CollectorLog,
    Divergence,
    LogClosedError,
    LogFormatError,
    ReplayError,
    diff_logs,
    replay,
)
from iotbed.demo import builtin_suites, demo_document, load_demo
from iotbed.session import execute_run, suite_run


def test_first_record_seq_zero():
    log = CollectorLog.open(1, "h")
    assert log.record(0, "data", {}) == 0


def test_same_time_records_in_submission_order():
    log = CollectorLog.open(1, "h")
    assert [log.record(5, "data", {"i": i}) for i in range(2)] == [0, 1]
    assert [r.body["i"] for r in log.records] == [0, 1]


def test_record_after_finalize_rejected():
    log = CollectorLog.open(1, "h")
    log.finalize()
    with pytest.raises(LogClosedError):
        log.record(0, "data", {})


def test_record_rejects_bad_kind_and_time_travel():
    log = CollectorLog.open(1, "h")
    log.record(10, "data", {})
    with pytest.raises(ValueError):
        log.record(9, "data", {})
    with pytest.raises(ValueError):
        log.record(10, "gossip", {})


@given(st.lists(st.tuples(st.integers(0, 5), st.sampled_from(["data", "test-event"]),
                          st.dictionaries(st.text(max_size=4), st.integers()))))
def test_bytes_round_trip(items):
    log = CollectorLog.open(3, "abc", config_name="x")
    t = 0
    for dt, kind, body in items:
        t += dt
        log.record(t, kind, body)
    back = CollectorLog.from_bytes(log.to_bytes())
    assert back.header == log.header
    assert back.records == log.records
    assert diff_logs(log, back) == []


def test_header_first_line_and_json_lines():
    log = CollectorLog.open(7, "ff", config_name="x")
    log.record(1, "data", {"v": 1})
    lines = log.to_bytes().decode().splitlines()
    head = json.loads(lines[0])
    assert head["version"] == 1 and head["seed"] == 7 and head["config_hash"] == "ff"
    assert json.loads(lines[1]) == {"seq": 0, "t": 1, "kind": "data", "body": {"v": 1}}


@pytest.mark.parametrize("data", [b"", b"nope\n", b'{"seed":1}\n', b'{"version":1}\n{"seq":0}\n'])
def test_malformed_logs(data):
    with pytest.raises(LogFormatError):
        CollectorLog.from_bytes(data)


def test_diff_ignores_created_wall():
    a = CollectorLog.open(1, "h")
    b = CollectorLog.open(1, "h")
    b.created_wall = "1999-01-01T00:00:00+00:00"
    assert diff_logs(a, b) == []


def test_diff_version_mismatch():
    a = CollectorLog.open(1, "h")
    b = CollectorLog.open(1, "h")
    b.version = 2
    with pytest.raises(LogFormatError):
        diff_logs(a, b)


def test_diff_reports_field_and_extra_records():
    a = CollectorLog.open(1, "h")
    b = CollectorLog.open(1, "h")
    a.record(0, "data", {"v": {"x": 1}})
    b.record(0, "data", {"v": {"x": 2}})
    b.record(3, "data", {})
    divs = diff_logs(a, b)
    assert divs[0] == Divergence(0, "body.v.x", 1, 2)
    assert divs[1].seq == 1 and divs[1].field == "<record>" and divs[1].left is None


def test_diff_int_vs_float_is_a_divergence():
    a = CollectorLog.open(1, "h")
    b = CollectorLog.open(1, "h")
    a.record(0, "data", {"v": 1})
    b.record(0, "data", {"v": 1.0})
    assert diff_logs(a, b) == [Divergence(0, "body.v", 1, 1.0)]


# --- end-to-end replay ----------------------------------------------------


@pytest.fixture(scope="module")
def demo4_run():
    doc = demo_document(4)
    suites = builtin_suites(load_demo(4))
    smoke = [s for s in suites if s.name == "smoke"]
    out = execute_run(doc, None, 42, suite_run(smoke))
    return doc, out.log.to_bytes()


def run_with_seed(seed):
    doc = demo_document(4)
    smoke = [s for s in builtin_suites(load_demo(4)) if s.name == "smoke"]
    return execute_run(doc, None, seed, suite_run(smoke)).log


def test_seeds_1_vs_2_differ():
    assert diff_logs(run_with_seed(1), run_with_seed(2)) != []


def test_replay_identical(demo4_run):
    doc, data = demo4_run
    report = replay(data, doc)
    assert report.identical and report.first_divergence is None


def test_replay_refuses_edited_config(demo4_run):
    doc, data = demo4_run
    edited = doc.replace(b'"latency_ms": 10', b'"latency_ms": 11', 1)
    assert edited != doc
    with pytest.raises(ReplayError, match="hash mismatch"):
        replay(data, edited)


def test_replay_finds_corruption_at_seq_17(demo4_run):
    doc, data = demo4_run
    lines = data.decode().splitlines()
    rec = json.loads(lines[18])  # line 0 is the header
    assert rec["seq"] == 17
    rec["body"]["corrupted"] = True
    lines[18] = json.dumps(rec, separators=(",", ":"))
    report = replay(("\n".join(lines) + "\n").encode(), doc)
    assert not report.identical
    assert report.first_divergence == 17


def test_replay_without_run_descriptor(demo4_run):
    doc, _ = demo4_run
    log = CollectorLog.open(42, load_demo(4).config_hash)
    with pytest.raises(ReplayError, match="run descriptor"):
        replay(log.to_bytes(), doc)


def test_messages_resolved_exactly_once_in_completed_run(demo4_run):
    _, data = demo4_run
    log = CollectorLog.from_bytes(data)
    sent = [r.body["id"] for r in log.of_kind("message-sent")]
    ends = [r.body["id"] for r in log.records if r.kind in ("message-delivered", "message-dropped")]
    assert len(ends) == len(set(ends)) and set(ends) <= set(sent)
    seqs = [r.seq for r in log.records]
    assert seqs == list(range(len(seqs)))
    ts = [r.t for r in log.records]
    assert ts == sorted(ts)
