"""One run = load config, provision, execute, finalize the log.

The run descriptor stored in the log header is exactly what
:func:`execute_run` needs, which is how ``replay`` re-executes a run.
"""

from __future__ import annotations

from dataclasses import dataclass, field

from iotbed.collector import CollectorLog
from iotbed.config import load_config
from iotbed.runner import (
    CaseResult,
    PerfMetrics,
    PerfSpec,
    SuiteResult,
    TestSuite,
    aggregate_verdict,
    parse_suite,
    run_perf,
    run_suite,
    suite_to_json,
)
from iotbed.testbed import provision


@dataclass
class RunOutcome:
    log: CollectorLog
    results: list[SuiteResult] = field(default_factory=list)
    perf: PerfMetrics | None = None

    @property
    def verdict(self) -> str:
        return aggregate_verdict(o.status for r in self.results for o in r.outcomes)


def suite_run(suites: list[TestSuite], force_loopback: bool = False) -> dict:
    return {"mode": "suite", "force_loopback": force_loopback, "suites": [suite_to_json(s) for s in suites]}


def perf_run(spec: PerfSpec, force_loopback: bool = False) -> dict:
    return {
        "mode": "perf",
        "force_loopback": force_loopback,
        "perf": {"target": spec.target, "rate_per_s": spec.rate_per_s, "duration_ms": spec.duration_ms,
                 "fields": spec.fields},
    }


def execute_run(config_document: bytes, select: str | None, seed: int, run: dict) -> RunOutcome:
    config = load_config(config_document, select)
    tb = provision(config, seed, force_loopback=bool(run.get("force_loopback")), log_extra={"run": run})
    try:
        outcome = RunOutcome(tb.log)
        if run["mode"] == "suite":
            for raw in run["suites"]:
                outcome.results.append(run_suite(tb, parse_suite(raw)))
        elif run["mode"] == "perf":
            p = run["perf"]
            outcome.perf = run_perf(tb, PerfSpec(p["target"], p["rate_per_s"], p["duration_ms"], p.get("fields", {})))
        else:
            raise ValueError(f"unknown run mode {run['mode']!r}")
    finally:
        tb.log.finalize()
        tb.close()
    return outcome


def merge_results(results: list[SuiteResult]) -> SuiteResult:
    """Fold several suite results into one, prefixing case names with their suite."""
    if len(results) == 1:
        return results[0]
    cases = [
        CaseResult(f"{r.name}/{c.name}", c.outcomes, c.started_at, c.ended_at)
        for r in results
        for c in r.cases
    ]
    name = "+".join(r.name for r in results) or "empty"
    seed = results[0].seed if results else 0
    chash = results[0].config_hash if results else ""
    return SuiteResult(name, cases, seed, chash)
