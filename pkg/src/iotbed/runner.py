"""Integration and performance test execution over simulated time.

Steps run as generators that yield wait conditions; a small driver
resumes them in declaration order and advances the sim clock only when
every live step is blocked. That gives parallel branches deterministic
round-robin interleaving at step boundaries.
"""

from __future__ import annotations

import csv
import io
import json
import math
import re
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Any, Callable, Generator, Iterable

from iotbed.config import ConfigError, HubAction, parse_hub_action
from iotbed.devices import compare
from iotbed.netsim import TopologyError
from iotbed.testbed import Testbed, UnknownDeviceError

PASSED = "Passed"
WARNING = "Warning"
FAILED = "Failed"
BROKEN = "Broken"
SKIPPED = "Skipped"
STATUSES = (PASSED, WARNING, FAILED, BROKEN, SKIPPED)
PASSED_WITH_WARNINGS = "PassedWithWarnings"

RESPONSE_TIMEOUT_MS = 30_000
STEP_KINDS = (
    "invoke-actuator", "await-datapoint", "inject", "assert-state", "warn-if", "sleep", "parallel", "sync-point",
)
COMPARATOR_OPS = ("=", "!=", "<", ">", "<=", ">=")
PARAM_RE = re.compile(r"\$\{p\.([A-Za-z0-9_]+)\}")


class SuiteError(ValueError):
    pass


class DatatableError(ValueError):
    pass


class PerfSpecError(ValueError):
    pass


class RunnerStall(RuntimeError):
    pass


# --- model -------------------------------------------------------------


@dataclass
class TestStep:
    kind: str
    params: dict[str, Any] = field(default_factory=dict)
    critical: bool = True
    branches: list[list["TestStep"]] = field(default_factory=list)

    __test__ = False


@dataclass
class TestCase:
    name: str
    steps: list[TestStep]
    params_from: str | None = None
    rows: list[dict[str, Any]] | None = None
    datatable: str | None = None  # csv text behind ``rows``

    __test__ = False


@dataclass
class TestSuite:
    name: str
    cases: list[TestCase] = field(default_factory=list)

    __test__ = False


@dataclass
class StepOutcome:
    step: str
    kind: str
    status: str
    detail: str = ""
    started_at: int = 0
    ended_at: int = 0
    critical: bool = True

    def sort_key(self) -> tuple[int, ...]:
        return tuple(int(x) for x in self.step.split("."))


@dataclass
class CaseResult:
    name: str
    outcomes: list[StepOutcome]
    started_at: int
    ended_at: int

    @property
    def verdict(self) -> str:
        return aggregate_verdict(o.status for o in self.outcomes)


@dataclass
class SuiteResult:
    name: str
    cases: list[CaseResult]
    seed: int
    config_hash: str

    @property
    def outcomes(self) -> list[StepOutcome]:
        return [o for c in self.cases for o in c.outcomes]

    @property
    def verdict(self) -> str:
        return aggregate_verdict(o.status for o in self.outcomes)

    def counts(self) -> dict[str, int]:
        return count_statuses(o.status for o in self.outcomes)


def aggregate_verdict(statuses: Iterable[str]) -> str:
    seen = set(statuses)
    if BROKEN in seen:
        return BROKEN
    if FAILED in seen:
        return FAILED
    if WARNING in seen:
        return PASSED_WITH_WARNINGS
    return PASSED


def count_statuses(statuses: Iterable[str]) -> dict[str, int]:
    counts = {"passed": 0, "warnings": 0, "failed": 0, "broken": 0, "skipped": 0}
    key = {PASSED: "passed", WARNING: "warnings", FAILED: "failed", BROKEN: "broken", SKIPPED: "skipped"}
    for s in statuses:
        counts[key[s]] += 1
    return counts


# --- datatables --------------------------------------------------------


def _typed(cell: str) -> Any:
    low = cell.strip().lower()
    if low in ("true", "false"):
        return low == "true"
    try:
        return int(cell)
    except ValueError:
        pass
    try:
        f = float(cell)
    except ValueError:
        return cell
    return f if math.isfinite(f) else cell


def load_datatable(document: bytes | str) -> list[dict[str, Any]]:
    """Parse a CSV parameter table; cells are typed by lexical form."""
    text = document.decode("utf-8-sig") if isinstance(document, bytes) else document
    lines = list(csv.reader(io.StringIO(text)))
    while lines and not any(c.strip() for c in lines[-1]):
        lines.pop()
    if not lines or not any(c.strip() for c in lines[0]):
        raise DatatableError("datatable has no header row")
    header = [h.strip() for h in lines[0]]
    if len(set(header)) != len(header) or not all(header):
        raise DatatableError("row 1: header names must be unique and non-empty")
    rows = []
    for lineno, cells in enumerate(lines[1:], start=2):
        if len(cells) != len(header):
            raise DatatableError(f"row {lineno}: expected {len(header)} cells, got {len(cells)}")
        rows.append({h: _typed(c) for h, c in zip(header, cells)})
    return rows


# --- suite documents -----------------------------------------------------


def _parse_step(raw: Any, path: str) -> TestStep:
    if not isinstance(raw, dict) or not isinstance(raw.get("kind"), str):
        raise SuiteError(f"{path}: step object with a 'kind' expected")
    kind = raw["kind"]
    if kind not in STEP_KINDS:
        raise SuiteError(f"{path}.kind: unknown step kind {kind!r}")
    critical = raw.get("critical", True)
    if not isinstance(critical, bool):
        raise SuiteError(f"{path}.critical: bool expected")
    params = {k: v for k, v in raw.items() if k not in ("kind", "critical", "branches")}
    step = TestStep(kind, params, critical)

    def need(key: str, kinds) -> None:
        if key not in params or not isinstance(params[key], kinds):
            raise SuiteError(f"{path}.{key}: required")

    if kind == "invoke-actuator":
        need("device", str)
        need("endpoint", str)
        params.setdefault("fields", {})
    elif kind == "await-datapoint":
        need("device", str)
        need("label", str)
        need("timeout_ms", (int, str))
        if isinstance(params["timeout_ms"], int) and params["timeout_ms"] <= 0:
            raise SuiteError(f"{path}.timeout_ms: must be > 0")
        comp = params.get("comparator")
        if comp is not None and (not isinstance(comp, dict) or comp.get("op") not in COMPARATOR_OPS):
            raise SuiteError(f"{path}.comparator: {{op, literal}} with op in {COMPARATOR_OPS} expected")
    elif kind == "inject":
        need("action", dict)
        try:
            parse_hub_action(params["action"], f"{path}.action")
        except ConfigError as exc:
            if "${p." not in json.dumps(params["action"]):
                raise SuiteError(str(exc)) from None
    elif kind == "assert-state":
        need("device", str)
        need("expected", str)
    elif kind == "warn-if":
        if params.get("source", "datapoint") not in ("datapoint", "response"):
            raise SuiteError(f"{path}.source: 'datapoint' or 'response' expected")
        need("op", str)
        if params["op"] not in COMPARATOR_OPS:
            raise SuiteError(f"{path}.op: one of {COMPARATOR_OPS} expected")
        if "literal" not in params:
            raise SuiteError(f"{path}.literal: required")
    elif kind == "sleep":
        need("ms", (int, str))
    elif kind == "parallel":
        branches = raw.get("branches")
        if not isinstance(branches, list) or not branches:
            raise SuiteError(f"{path}.branches: non-empty list of step lists expected")
        for bi, br in enumerate(branches):
            if not isinstance(br, list) or not br:
                raise SuiteError(f"{path}.branches[{bi}]: non-empty step list expected")
            step.branches.append([_parse_step(s, f"{path}.branches[{bi}][{si}]") for si, s in enumerate(br)])
    return step


def parse_suite(data: dict, base_dir: Path | None = None) -> TestSuite:
    if not isinstance(data, dict) or not isinstance(data.get("name"), str):
        raise SuiteError("suite: object with a 'name' expected")
    suite = TestSuite(data["name"])
    names: set[str] = set()
    for ci, raw in enumerate(data.get("cases", [])):
        path = f"cases[{ci}]"
        if not isinstance(raw, dict) or not isinstance(raw.get("name"), str):
            raise SuiteError(f"{path}: case object with a 'name' expected")
        if raw["name"] in names:
            raise SuiteError(f"{path}.name: duplicate case name {raw['name']!r}")
        names.add(raw["name"])
        steps = [_parse_step(s, f"{path}.steps[{si}]") for si, s in enumerate(raw.get("steps", []))]
        case = TestCase(raw["name"], steps)
        ref = raw.get("params_from")
        if ref is not None:
            if isinstance(ref, dict) and isinstance(ref.get("csv"), str):
                text = ref["csv"]
            elif isinstance(ref, str):
                p = Path(ref) if base_dir is None else base_dir / ref
                try:
                    text = p.read_text(encoding="utf-8")
                except OSError as exc:
                    raise SuiteError(f"{path}.params_from: cannot read {p}: {exc}") from None
                case.params_from = ref
            else:
                raise SuiteError(f"{path}.params_from: file path or {{'csv': text}} expected")
            try:
                case.rows = load_datatable(text)
            except DatatableError as exc:
                raise SuiteError(f"{path}.params_from: {exc}") from None
            case.datatable = text
        suite.cases.append(case)
    return suite


def load_suites(document: bytes, base_dir: Path | None = None) -> list[TestSuite]:
    """A suite file holds one suite object or ``{"suites": [...]}``."""
    try:
        data = json.loads(document.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise SuiteError(f"suite document: syntax error: {exc}") from None
    if isinstance(data, dict) and "suites" in data:
        return [parse_suite(s, base_dir) for s in data["suites"]]
    return [parse_suite(data, base_dir)]


def step_to_json(step: TestStep) -> dict[str, Any]:
    out: dict[str, Any] = {"kind": step.kind, **step.params}
    if not step.critical:
        out["critical"] = False
    if step.branches:
        out["branches"] = [[step_to_json(s) for s in br] for br in step.branches]
    return out


def suite_to_json(suite: TestSuite) -> dict[str, Any]:
    cases = []
    for c in suite.cases:
        obj: dict[str, Any] = {"name": c.name}
        if c.datatable is not None:
            obj["params_from"] = {"csv": c.datatable}
        obj["steps"] = [step_to_json(s) for s in c.steps]
        cases.append(obj)
    return {"name": suite.name, "cases": cases}


def _substitute(obj: Any, row: dict[str, Any]) -> Any:
    if isinstance(obj, str):
        whole = PARAM_RE.fullmatch(obj)
        if whole and whole.group(1) in row:
            return row[whole.group(1)]
        return PARAM_RE.sub(lambda m: str(row.get(m.group(1), m.group(0))), obj)
    if isinstance(obj, dict):
        return {k: _substitute(v, row) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_substitute(v, row) for v in obj]
    return obj


def expand_cases(suite: TestSuite) -> list[tuple[str, list[TestStep]]]:
    """One instance per case, or one per datatable row for parameterized cases."""
    out = []
    for case in suite.cases:
        if case.rows is None:
            out.append((case.name, case.steps))
            continue
        for i, row in enumerate(case.rows):
            steps = [_parse_step(_substitute(step_to_json(s), row), f"{case.name}[{i}]") for s in case.steps]
            out.append((f"{case.name}[{i}]", steps))
    return out


# --- execution engine ----------------------------------------------------


@dataclass
class _Wait:
    pred: Callable[[], bool] | None
    deadline: int | None


class _Task:
    def __init__(self, gen: Generator):
        self.gen = gen
        self.wait: _Wait | None = None
        self.done = False

    def poll(self, now: int) -> tuple[bool, Any]:
        w = self.wait
        if w is None:
            return True, None
        if w.pred is not None and w.pred():
            return True, True
        if w.deadline is not None and now >= w.deadline:
            return True, False
        return False, None

    def resume(self, value: Any) -> None:
        try:
            self.wait = self.gen.send(value)
        except StopIteration:
            self.done = True


class _SyncGroup:
    def __init__(self, n: int):
        self.reached = [0] * n
        self.finished = [False] * n

    def released(self, k: int) -> bool:
        return all(f or r >= k for r, f in zip(self.reached, self.finished))


class _CaseContext:
    def __init__(self, runner: "_Runner", suite: str, case: str):
        self.runner = runner
        self.suite = suite
        self.case = case
        self.outcomes: list[StepOutcome] = []
        self.last_response: dict | None = None
        self.last_datapoint = None


class _Runner:
    def __init__(self, testbed: Testbed):
        self.tb = testbed
        self.tasks: list[_Task] = []

    @property
    def now(self) -> int:
        return self.tb.now

    def drive(self, gen: Generator) -> None:
        root = _Task(gen)
        self.tasks = [root]
        while not root.done:
            progressed = False
            for task in list(self.tasks):
                if task.done:
                    continue
                ready, value = task.poll(self.now)
                if ready:
                    task.resume(value)
                    progressed = True
            self.tasks = [t for t in self.tasks if not t.done]
            if progressed:
                continue
            self.tb.pump_external()
            candidates = [t.wait.deadline for t in self.tasks if t.wait and t.wait.deadline is not None]
            nxt = self.tb.scheduler.next_fire_time()
            if nxt is not None:
                candidates.append(nxt)
            if not candidates:
                raise RunnerStall("all steps are blocked and nothing is scheduled")
            self.tb.scheduler.run_until(max(min(candidates), self.now))

    def spawn(self, gen: Generator) -> _Task:
        task = _Task(gen)
        self.tasks.append(task)
        return task

    # recording ---------------------------------------------------------

    def _emit(self, ctx: _CaseContext, out: StepOutcome) -> None:
        ctx.outcomes.append(out)
        self.tb.log.record(
            self.now,
            "test-event",
            {"suite": ctx.suite, "case": ctx.case, "step": out.step, "kind": out.kind, "status": out.status,
             "detail": out.detail, "started_at": out.started_at, "ended_at": out.ended_at},
        )

    def _skip_all(self, ctx: _CaseContext, step: TestStep, sid: str) -> None:
        if step.kind == "parallel":
            for bi, br in enumerate(step.branches):
                for si, s in enumerate(br):
                    self._skip_all(ctx, s, f"{sid}.{bi}.{si}")
            return
        self._emit(ctx, StepOutcome(sid, step.kind, SKIPPED, "skipped after interruption", self.now, self.now,
                                    step.critical))

    # step sequencing -----------------------------------------------------

    def run_steps(self, ctx: _CaseContext, steps: list[TestStep], prefix: str,
                  group: _SyncGroup | None = None, branch: int = 0):
        halted = False
        synced = 0
        for idx, step in enumerate(steps):
            sid = f"{prefix}{idx}"
            if halted:
                self._skip_all(ctx, step, sid)
                continue
            yield None  # step boundary
            if step.kind == "sync-point" and group is not None:
                started = self.now
                synced += 1
                group.reached[branch] = synced
                k = synced
                yield _Wait(lambda: group.released(k), None)
                self._emit(ctx, StepOutcome(sid, step.kind, PASSED, f"released at sync {k}", started, self.now,
                                            step.critical))
                continue
            if step.kind == "parallel":
                halted = yield from self._parallel(ctx, step, sid)
                continue
            started = self.now
            status, detail = yield from self.execute_step(ctx, step)
            self._emit(ctx, StepOutcome(sid, step.kind, status, detail, started, self.now, step.critical))
            if status == BROKEN or (status == FAILED and step.critical):
                halted = True
        if group is not None:
            group.finished[branch] = True
        return halted

    def _parallel(self, ctx: _CaseContext, step: TestStep, sid: str):
        group = _SyncGroup(len(step.branches))
        halts: list[bool] = []

        def branch_gen(bi: int, br: list[TestStep]):
            halts.append((yield from self.run_steps(ctx, br, f"{sid}.{bi}.", group, bi)))

        children = [self.spawn(branch_gen(bi, br)) for bi, br in enumerate(step.branches)]
        yield _Wait(lambda: all(c.done for c in children), None)
        return any(halts)

    def execute_step(self, ctx: _CaseContext, step: TestStep):
        """Run one leaf step; returns ``(status, detail)``. Never raises on test failures."""
        p = step.params
        tb = self.tb
        kind = step.kind
        if kind == "sleep":
            ms = int(p["ms"])
            yield _Wait(None, self.now + ms)
            return PASSED, f"slept {ms} ms"
        if kind == "sync-point":
            return PASSED, "no enclosing parallel step"
        if kind == "invoke-actuator":
            got: dict[str, Any] = {}

            def on_response(resp: dict, t: int) -> None:
                got.setdefault("resp", resp)

            try:
                tb.request(p["device"], p["endpoint"], p.get("fields", {}), on_response)
            except UnknownDeviceError as exc:
                return BROKEN, str(exc)
            ok = yield _Wait(lambda: "resp" in got, self.now + RESPONSE_TIMEOUT_MS)
            if not ok:
                return BROKEN, f"no response from {p['device']} within {RESPONSE_TIMEOUT_MS} ms"
            resp = got["resp"]
            ctx.last_response = resp
            if resp.get("status") == "ok":
                return PASSED, f"state={resp.get('state')}"
            return FAILED, f"error response: {resp.get('data', {}).get('reason', '')}"
        if kind == "await-datapoint":
            device, label = p["device"], p["label"]
            try:
                tb.device_kind(device)
            except UnknownDeviceError as exc:
                return BROKEN, str(exc)
            comp = p.get("comparator")
            matches: list = []

            def listener(dp, node) -> None:
                if dp.device == device and dp.label == label:
                    if comp is None or compare(dp.value, comp["op"], comp["literal"]):
                        matches.append(dp)

            started = self.now
            timeout = int(p["timeout_ms"])
            tb.listeners.append(listener)
            try:
                ok = yield _Wait(lambda: bool(matches), started + timeout)
            finally:
                tb.listeners.remove(listener)
            if not ok:
                return FAILED, f"no matching {device}/{label} datapoint within {timeout} ms"
            ctx.last_datapoint = matches[0]
            waited = self.now - started
            warn_after = p.get("warn_after_ms")
            if warn_after is not None and waited > int(warn_after):
                return WARNING, f"datapoint arrived after {waited} ms (soft limit {warn_after} ms)"
            return PASSED, f"value={matches[0].value} after {waited} ms"
        if kind == "inject":
            try:
                action: HubAction = parse_hub_action(p["action"])
                tb.dispatch(action)
            except (ConfigError, UnknownDeviceError, TopologyError, ValueError) as exc:
                return BROKEN, f"hub action rejected: {exc}"
            return PASSED, action.kind
        if kind == "assert-state":
            try:
                actual = tb.device_state(p["device"])
            except UnknownDeviceError as exc:
                return BROKEN, str(exc)
            if actual == p["expected"]:
                return PASSED, f"state={actual}"
            return FAILED, f"expected state {p['expected']!r}, got {actual!r}"
        if kind == "warn-if":
            source = p.get("source", "datapoint")
            fld = p.get("field", "value")
            if source == "datapoint":
                if ctx.last_datapoint is None:
                    return BROKEN, "warn-if: no datapoint observed yet"
                value = getattr(ctx.last_datapoint, fld, None)
            else:
                if ctx.last_response is None:
                    return BROKEN, "warn-if: no response observed yet"
                value = ctx.last_response
                for part in fld.split("."):
                    value = value.get(part) if isinstance(value, dict) else None
            if compare(value, p["op"], p["literal"]):
                return WARNING, f"{source}.{fld}={value!r} {p['op']} {p['literal']!r}"
            return PASSED, f"{source}.{fld}={value!r}"
        raise SuiteError(f"unhandled step kind {kind!r}")


def run_suite(testbed: Testbed, suite: TestSuite) -> SuiteResult:
    runner = _Runner(testbed)
    results = []
    for name, steps in expand_cases(suite):
        ctx = _CaseContext(runner, suite.name, name)
        started = testbed.now
        testbed.log.record(started, "test-event", {"suite": suite.name, "case": name, "event": "case-start"})
        runner.drive(runner.run_steps(ctx, steps, ""))
        outcomes = sorted(ctx.outcomes, key=StepOutcome.sort_key)
        result = CaseResult(name, outcomes, started, testbed.now)
        testbed.log.record(
            testbed.now, "test-event",
            {"suite": suite.name, "case": name, "event": "case-end", "verdict": result.verdict},
        )
        results.append(result)
    return SuiteResult(suite.name, results, testbed.seed, testbed.config.config_hash)


def execute_step(testbed: Testbed, step: TestStep) -> StepOutcome:
    """Run a single step in a throwaway case context."""
    runner = _Runner(testbed)
    ctx = _CaseContext(runner, "", "")
    runner.drive(runner.run_steps(ctx, [step], ""))
    return ctx.outcomes[0]


# --- performance -------------------------------------------------------


@dataclass
class PerfSpec:
    target: str
    rate_per_s: float
    duration_ms: int
    fields: dict[str, Any] = field(default_factory=dict)

    def split_target(self) -> tuple[str, str]:
        if "." not in self.target:
            raise PerfSpecError(f"target {self.target!r} must be device.endpoint")
        device, endpoint = self.target.rsplit(".", 1)
        return device, endpoint


@dataclass
class PerfMetrics:
    sent: int
    ok: int
    error: int
    timeout: int
    throughput_ok_per_s: float
    latency_p50: int | None
    latency_p95: int | None
    latency_p99: int | None
    latency_max: int | None

    def to_json(self) -> dict[str, Any]:
        return {
            "sent": self.sent, "ok": self.ok, "error": self.error, "timeout": self.timeout,
            "throughput_ok_per_s": self.throughput_ok_per_s,
            "latency_ms": {"p50": self.latency_p50, "p95": self.latency_p95, "p99": self.latency_p99,
                           "max": self.latency_max},
        }


def percentile(samples: list[float], p: float) -> float:
    """Nearest-rank percentile: the ``ceil(p/100 * N)``-th smallest sample."""
    if not samples:
        raise ValueError("percentile of an empty sample list")
    if not 0 < p <= 100:
        raise ValueError(f"percentile rank must be in (0, 100], got {p}")
    ordered = sorted(samples)
    rank = math.ceil(Fraction(str(p)) * len(ordered) / 100)
    return ordered[max(rank, 1) - 1]


def send_times(start: int, rate_per_s: float, duration_ms: int) -> list[int]:
    """Open-loop schedule: request k goes out at the first tick >= k * 1000/rate."""
    interval = Fraction(1000) / Fraction(str(rate_per_s))
    times = []
    k = 0
    while k * interval < duration_ms:
        times.append(start + math.ceil(k * interval))
        k += 1
    return times


def run_perf(testbed: Testbed, spec: PerfSpec) -> PerfMetrics:
    if not spec.rate_per_s > 0:
        raise PerfSpecError("rate_per_s must be > 0")
    if not (isinstance(spec.duration_ms, int) and spec.duration_ms > 0):
        raise PerfSpecError("duration_ms must be a positive integer")
    device, endpoint = spec.split_target()
    if testbed.device_kind(device) == "provider":
        raise PerfSpecError(f"target {device!r} is a data provider, not an actuator")
    sched = testbed.scheduler
    start = testbed.now
    deadline = start + spec.duration_ms + RESPONSE_TIMEOUT_MS
    sent_at: dict[int, int] = {}
    latencies: list[int] = []
    tally = {"ok": 0, "error": 0}

    def fire(k: int) -> None:
        sent_at[k] = testbed.now

        def on_response(resp: dict, t: int) -> None:
            if t > deadline or k not in sent_at:
                return
            tally["ok" if resp.get("status") == "ok" else "error"] += 1
            latencies.append(t - sent_at.pop(k))

        testbed.request(device, endpoint, dict(spec.fields), on_response)

    times = send_times(start, spec.rate_per_s, spec.duration_ms)
    for k, t in enumerate(times):
        sched.schedule(t, lambda k=k: fire(k))
    while True:
        answered = tally["ok"] + tally["error"]
        if answered == len(times) and len(sent_at) == 0:
            break
        nxt = sched.next_fire_time()
        if nxt is None or nxt > deadline:
            sched.run_until(deadline)
            break
        testbed.pump_external()
        sched.run_until(nxt)
    sent = len(times)
    timeout = sent - tally["ok"] - tally["error"]
    ok = tally["ok"]
    pct = (lambda q: percentile(latencies, q)) if latencies else (lambda q: None)
    metrics = PerfMetrics(
        sent, ok, tally["error"], timeout, ok * 1000 / spec.duration_ms,
        pct(50), pct(95), pct(99), max(latencies) if latencies else None,
    )
    testbed.log.record(testbed.now, "test-event", {"event": "perf", "target": spec.target, **metrics.to_json()})
    return metrics
