"""Report documents: JSON (lossless) and JUnit-compatible XML."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any
from xml.etree import ElementTree as ET

from iotbed.collector import CollectorLog
from iotbed.runner import BROKEN, FAILED, SKIPPED, WARNING, SuiteResult, aggregate_verdict, count_statuses


class ReportError(ValueError):
    pass


@dataclass
class ReportDocument:
    suite: str
    verdict: str
    seed: int
    config_hash: str
    counts: dict[str, int]
    case_counts: dict[str, int]
    cases: list[dict[str, Any]] = field(default_factory=list)

    def to_json(self) -> dict[str, Any]:
        return {
            "suite": self.suite,
            "verdict": self.verdict,
            "seed": self.seed,
            "config_hash": self.config_hash,
            "counts": self.counts,
            "case_counts": self.case_counts,
            "cases": self.cases,
        }

    @classmethod
    def from_json(cls, obj: dict[str, Any]) -> "ReportDocument":
        return cls(obj["suite"], obj["verdict"], obj["seed"], obj["config_hash"], obj["counts"],
                   obj["case_counts"], obj["cases"])


def _case_counts(cases: list[dict[str, Any]]) -> dict[str, int]:
    out = {"tests": len(cases), "failures": 0, "errors": 0, "skipped": 0, "warnings": 0}
    for c in cases:
        if c["verdict"] == BROKEN:
            out["errors"] += 1
        elif c["verdict"] == FAILED:
            out["failures"] += 1
        elif c["steps"] and all(s["status"] == SKIPPED for s in c["steps"]):
            out["skipped"] += 1
        elif c["verdict"] == "PassedWithWarnings":
            out["warnings"] += 1
    return out


def build_report(result: SuiteResult, log: CollectorLog) -> ReportDocument:
    """Join suite outcomes with the testbed records inside each case's time window."""
    if result.seed != log.seed or result.config_hash != log.config_hash:
        raise ReportError(
            f"suite result (seed={result.seed}, config={result.config_hash}) does not come from this log "
            f"(seed={log.seed}, config={log.config_hash})"
        )
    context_records = [r for r in log.records if r.kind != "test-event"]
    cases = []
    for case in result.cases:
        steps = [
            {"step": o.step, "kind": o.kind, "status": o.status, "detail": o.detail,
             "started_at": o.started_at, "ended_at": o.ended_at, "critical": o.critical}
            for o in case.outcomes
        ]
        context = [r.seq for r in context_records if case.started_at <= r.t <= case.ended_at]
        cases.append({
            "name": case.name,
            "verdict": case.verdict,
            "started_at": case.started_at,
            "ended_at": case.ended_at,
            "steps": steps,
            "context": context,
        })
    statuses = [o.status for o in result.outcomes]
    return ReportDocument(
        result.name, aggregate_verdict(statuses), result.seed, result.config_hash,
        count_statuses(statuses), _case_counts(cases), cases,
    )


def emit_json(report: ReportDocument) -> bytes:
    return (json.dumps(report.to_json(), indent=2, ensure_ascii=False) + "\n").encode("utf-8")


def parse_json(data: bytes) -> ReportDocument:
    return ReportDocument.from_json(json.loads(data.decode("utf-8")))


def _seconds(ms: int) -> str:
    return f"{ms / 1000:.3f}"


def emit_junit_xml(report: ReportDocument) -> bytes:
    cc = report.case_counts
    total_ms = sum(c["ended_at"] - c["started_at"] for c in report.cases)
    suite = ET.Element("testsuite", {
        "name": report.suite,
        "tests": str(cc["tests"]),
        "failures": str(cc["failures"]),
        "errors": str(cc["errors"]),
        "skipped": str(cc["skipped"]),
        "time": _seconds(total_ms),
    })
    props = ET.SubElement(suite, "properties")
    ET.SubElement(props, "property", {"name": "verdict", "value": report.verdict})
    ET.SubElement(props, "property", {"name": "seed", "value": str(report.seed)})
    ET.SubElement(props, "property", {"name": "config_hash", "value": report.config_hash})
    for k, v in report.counts.items():
        ET.SubElement(props, "property", {"name": f"steps.{k}", "value": str(v)})
    for c in report.cases:
        tc = ET.SubElement(suite, "testcase", {
            "name": c["name"], "classname": report.suite, "time": _seconds(c["ended_at"] - c["started_at"]),
        })
        bad = [s for s in c["steps"] if s["status"] in (BROKEN, FAILED)]
        lines = "\n".join(f"step {s['step']} ({s['kind']}): {s['status']}: {s['detail']}" for s in bad)
        if c["verdict"] == BROKEN:
            first = next(s for s in bad if s["status"] == BROKEN)
            ET.SubElement(tc, "error", {"message": first["detail"], "type": "Broken"}).text = lines
        elif c["verdict"] == FAILED:
            first = next(s for s in bad if s["status"] == FAILED)
            ET.SubElement(tc, "failure", {"message": first["detail"], "type": "Failed"}).text = lines
        elif c["steps"] and all(s["status"] == SKIPPED for s in c["steps"]):
            ET.SubElement(tc, "skipped")
        warnings = [s for s in c["steps"] if s["status"] == WARNING]
        if warnings:
            ET.SubElement(tc, "system-out").text = "\n".join(f"WARNING: {s['detail']}" for s in warnings)
    ET.indent(suite)
    return ET.tostring(suite, encoding="utf-8", xml_declaration=True) + b"\n"
