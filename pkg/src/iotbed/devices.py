"""Simulated device building blocks.

Data providers chain a generator, a transformer and a connector.
Actuators chain an endpoint interface, a guarded state machine and a
connector. The pure pieces (sampling, formatting, transition handling)
live here as plain functions; the runtime objects that bind them to a
testbed are :class:`Provider` and :class:`Actuator`.
"""

from __future__ import annotations

import bisect
import json
import math
import re
from dataclasses import dataclass, field
from typing import Any, Union

from iotbed.kernel import RngStream

FORMATS = ("json-lines", "csv", "plain")
GUARD_OPS = ("=", "!=", "<", ">")
FIELD_TYPES = ("number", "string", "bool")
CONNECTOR_KINDS = ("in-sim", "external-tcp", "loopback")
IDENT_RE = re.compile(r"^[A-Za-z0-9_.\-]+$")
TOKEN_RE = re.compile(r"\$\{([^}]+)\}")

Value = Union[float, tuple[float, float]]


class DeviceSpecError(ValueError):
    pass


# --- generators --------------------------------------------------------


@dataclass(frozen=True)
class Constant:
    value: float
    kind = "constant"

    def validate(self) -> None:
        _need_number(self.value, "value")


@dataclass(frozen=True)
class Linear:
    start: float
    slope_per_sample: float
    kind = "linear"

    def validate(self) -> None:
        _need_number(self.start, "start")
        _need_number(self.slope_per_sample, "slope_per_sample")


@dataclass(frozen=True)
class RandomWalk:
    start: float
    step_stddev: float
    min: float
    max: float
    kind = "random_walk"

    def validate(self) -> None:
        for name in ("start", "step_stddev", "min", "max"):
            _need_number(getattr(self, name), name)
        if self.step_stddev < 0:
            raise DeviceSpecError("step_stddev: must be >= 0")
        if not self.min <= self.start <= self.max:
            raise DeviceSpecError("start: must satisfy min <= start <= max")


@dataclass(frozen=True)
class Sinusoid:
    mean: float
    amplitude: float
    period_samples: float
    noise_stddev: float = 0.0
    kind = "sinusoid"

    def validate(self) -> None:
        for name in ("mean", "amplitude", "period_samples", "noise_stddev"):
            _need_number(getattr(self, name), name)
        if self.period_samples < 1:
            raise DeviceSpecError("period_samples: must be >= 1")
        if self.noise_stddev < 0:
            raise DeviceSpecError("noise_stddev: must be >= 0")


@dataclass(frozen=True)
class Trajectory:
    waypoints: tuple[tuple[int, float, float], ...]
    kind = "trajectory"

    def validate(self) -> None:
        if not self.waypoints:
            raise DeviceSpecError("waypoints: at least one waypoint required")
        prev = None
        for i, wp in enumerate(self.waypoints):
            if len(wp) != 3:
                raise DeviceSpecError(f"waypoints[{i}]: expected [t_ms, lat, lon]")
            for x in wp:
                _need_number(x, f"waypoints[{i}]")
            if prev is not None and wp[0] <= prev:
                raise DeviceSpecError(f"waypoints[{i}]: t must be strictly increasing")
            prev = wp[0]

    def position(self, t: float) -> tuple[float, float]:
        wps = self.waypoints
        if t <= wps[0][0]:
            return (float(wps[0][1]), float(wps[0][2]))
        if t >= wps[-1][0]:
            return (float(wps[-1][1]), float(wps[-1][2]))
        i = bisect.bisect_right([w[0] for w in wps], t)
        (t0, la0, lo0), (t1, la1, lo1) = wps[i - 1], wps[i]
        f = (t - t0) / (t1 - t0)
        return (la0 + (la1 - la0) * f, lo0 + (lo1 - lo0) * f)


GeneratorSpec = Union[Constant, Linear, RandomWalk, Sinusoid, Trajectory]
GENERATORS = {g.kind: g for g in (Constant, Linear, RandomWalk, Sinusoid, Trajectory)}


def _need_number(x: Any, name: str) -> None:
    if isinstance(x, bool) or not isinstance(x, (int, float)) or not math.isfinite(x):
        raise DeviceSpecError(f"{name}: finite number expected, got {x!r}")


@dataclass
class ProviderState:
    """Mutable per-provider sampling state."""

    generator: GeneratorSpec
    index: int = 0
    last: float | None = None


def next_sample(state: ProviderState, k: int, stream: RngStream, t: int = 0) -> Value:
    """Value of sample ``k`` emitted at sim time ``t``; advances ``state``."""
    if k < 0:
        raise ValueError("sample index must be >= 0")
    g = state.generator
    if isinstance(g, Constant):
        value: Value = float(g.value)
    elif isinstance(g, Linear):
        value = float(g.start + g.slope_per_sample * k)
    elif isinstance(g, RandomWalk):
        if k == 0 or state.last is None:
            value = float(g.start)
        else:
            step = stream.gaussian(0.0, g.step_stddev)
            value = min(max(state.last + step, g.min), g.max)
    elif isinstance(g, Sinusoid):
        noise = stream.gaussian(0.0, g.noise_stddev)
        value = g.mean + g.amplitude * math.sin(2.0 * math.pi * k / g.period_samples) + noise
    elif isinstance(g, Trajectory):
        value = g.position(t)
    else:
        raise TypeError(f"unsupported generator {g!r}")
    state.last = value if not isinstance(value, tuple) else None
    state.index = k + 1
    return value


# --- data points and formats ------------------------------------------


@dataclass(frozen=True)
class DataPoint:
    device: str
    label: str
    t: int
    value: Value

    def __post_init__(self) -> None:
        if not self.label:
            raise ValueError("DataPoint.label must be non-empty")


def format_number(x: float) -> str:
    if isinstance(x, int) and not isinstance(x, bool):
        return str(x)
    if float(x).is_integer():
        return str(int(x))
    s = f"{x:.9f}".rstrip("0").rstrip(".")
    return "0" if s in ("-0", "") else s


def _render_value(value: Value, fmt: str) -> str:
    if isinstance(value, tuple):
        lat, lon = (format_number(v) for v in value)
        return f"[{lat},{lon}]" if fmt == "json-lines" else f"{lat};{lon}"
    return format_number(value)


def transform(dp: DataPoint, fmt: str) -> bytes:
    value = _render_value(dp.value, fmt)
    if fmt == "json-lines":
        line = (
            f'{{"device":{json.dumps(dp.device)},"label":{json.dumps(dp.label)},'
            f'"t":{dp.t},"value":{value}}}'
        )
    elif fmt == "csv":
        line = f"{dp.device},{dp.label},{dp.t},{value}"
    elif fmt == "plain":
        line = f"{dp.label}={value}@{dp.t}"
    else:
        raise ValueError(f"unknown format {fmt!r}")
    return (line + "\n").encode("utf-8")


def _parse_value(text: str) -> Value:
    if ";" in text:
        lat, lon = text.split(";")
        return (float(lat), float(lon))
    return float(text)


def parse(data: bytes, fmt: str, device: str = "") -> DataPoint:
    """Inverse of :func:`transform`. ``plain`` lines carry no device id."""
    line = data.decode("utf-8")
    if not line.endswith("\n"):
        raise ValueError("data line must end with a newline")
    line = line[:-1]
    if fmt == "json-lines":
        obj = json.loads(line)
        v = obj["value"]
        value: Value = (float(v[0]), float(v[1])) if isinstance(v, list) else float(v)
        return DataPoint(obj["device"], obj["label"], int(obj["t"]), value)
    if fmt == "csv":
        dev, label, t, v = line.split(",")
        return DataPoint(dev, label, int(t), _parse_value(v))
    if fmt == "plain":
        label, rest = line.split("=", 1)
        v, t = rest.rsplit("@", 1)
        return DataPoint(device, label, int(t), _parse_value(v))
    raise ValueError(f"unknown format {fmt!r}")


# --- connectors and device specs ----------------------------------------


@dataclass(frozen=True)
class ConnectorSpec:
    kind: str
    sink_node: str | None = None
    via_node: str | None = None
    host: str | None = None
    port: int | None = None

    def validate(self) -> None:
        if self.kind not in CONNECTOR_KINDS:
            raise DeviceSpecError(f"kind: {self.kind!r} is not one of {CONNECTOR_KINDS}")
        if self.kind == "in-sim" and not (self.sink_node and self.via_node):
            raise DeviceSpecError("in-sim connector needs sink_node and via_node")
        if self.kind == "external-tcp":
            if not self.host or not isinstance(self.port, int) or not 0 <= self.port <= 65535:
                raise DeviceSpecError("external-tcp connector needs host and port in 0..65535")


@dataclass
class ProviderSpec:
    device_id: str
    label: str
    generator: GeneratorSpec
    period_ms: int
    transformer: str
    connector: ConnectorSpec

    def validate(self) -> None:
        _check_ident(self.device_id, "device_id")
        _check_ident(self.label, "label")
        if isinstance(self.period_ms, bool) or not isinstance(self.period_ms, int) or self.period_ms <= 0:
            raise DeviceSpecError("period_ms: positive integer expected")
        if self.transformer not in FORMATS:
            raise DeviceSpecError(f"transformer: {self.transformer!r} is not one of {FORMATS}")
        self.generator.validate()
        self.connector.validate()


def _check_ident(s: Any, name: str) -> None:
    if not isinstance(s, str) or not IDENT_RE.match(s):
        raise DeviceSpecError(f"{name}: identifier of [A-Za-z0-9_.-] expected, got {s!r}")


@dataclass(frozen=True)
class Guard:
    field: str
    op: str
    literal: Any

    def holds(self, fields: dict[str, Any]) -> bool:
        if self.field not in fields:
            return False
        v = fields[self.field]
        return compare(v, self.op, self.literal)


def compare(v: Any, op: str, literal: Any) -> bool:
    if op in ("=", "=="):
        return v == literal and isinstance(v, bool) == isinstance(literal, bool)
    if op == "!=":
        return not compare(v, "=", literal)
    numeric = all(isinstance(x, (int, float)) and not isinstance(x, bool) for x in (v, literal))
    if not numeric:
        return False
    if op == "<":
        return v < literal
    if op == ">":
        return v > literal
    if op == "<=":
        return v <= literal
    if op == ">=":
        return v >= literal
    raise ValueError(f"unknown comparison operator {op!r}")


@dataclass(frozen=True)
class Transition:
    src: str
    endpoint: str
    to: str
    guard: Guard | None = None
    response: dict[str, Any] = field(default_factory=dict)


@dataclass
class StateMachineSpec:
    states: list[str]
    initial: str
    transitions: list[Transition]
    variables: dict[str, Any] = field(default_factory=dict)


@dataclass(frozen=True)
class EndpointSpec:
    name: str
    request_fields: tuple[tuple[str, str], ...] = ()


@dataclass
class ActuatorSpec:
    device_id: str
    endpoints: list[EndpointSpec]
    machine: StateMachineSpec
    connector: ConnectorSpec

    def endpoint(self, name: str) -> EndpointSpec | None:
        for ep in self.endpoints:
            if ep.name == name:
                return ep
        return None

    def validate(self) -> None:
        _check_ident(self.device_id, "device_id")
        m = self.machine
        if len(set(m.states)) != len(m.states) or not m.states:
            raise DeviceSpecError("machine.states: non-empty list of unique names expected")
        if m.initial not in m.states:
            raise DeviceSpecError(f"machine.initial: {m.initial!r} is not a declared state")
        names = [ep.name for ep in self.endpoints]
        if len(set(names)) != len(names):
            raise DeviceSpecError("endpoints: duplicate endpoint name")
        for ep in self.endpoints:
            for fname, ftype in ep.request_fields:
                if ftype not in FIELD_TYPES:
                    raise DeviceSpecError(f"endpoints.{ep.name}.{fname}: type {ftype!r} not in {FIELD_TYPES}")
        for i, tr in enumerate(m.transitions):
            where = f"machine.transitions[{i}]"
            for s in (tr.src, tr.to):
                if s not in m.states:
                    raise DeviceSpecError(f"{where}: state {s!r} is not declared")
            ep = self.endpoint(tr.endpoint)
            if ep is None:
                raise DeviceSpecError(f"{where}.endpoint: {tr.endpoint!r} is not a declared endpoint")
            declared = {f for f, _ in ep.request_fields}
            if tr.guard is not None:
                if tr.guard.op not in GUARD_OPS:
                    raise DeviceSpecError(f"{where}.guard.op: {tr.guard.op!r} not in {GUARD_OPS}")
                if tr.guard.field not in declared:
                    raise DeviceSpecError(
                        f"{where}.guard.field: {tr.guard.field!r} is not a request field of {ep.name!r}"
                    )
            for token in _template_tokens(tr.response):
                if token.startswith("req.") and token[4:] not in declared:
                    raise DeviceSpecError(f"{where}.response: ${{{token}}} is not a request field")
                if token.startswith("var.") and token[4:] not in m.variables:
                    raise DeviceSpecError(f"{where}.response: ${{{token}}} is not a declared variable")
                if token != "state" and not token.startswith(("req.", "var.")):
                    raise DeviceSpecError(f"{where}.response: unknown placeholder ${{{token}}}")
        self.connector.validate()


def _template_tokens(obj: Any):
    if isinstance(obj, str):
        yield from TOKEN_RE.findall(obj)
    elif isinstance(obj, dict):
        for v in obj.values():
            yield from _template_tokens(v)
    elif isinstance(obj, list):
        for v in obj:
            yield from _template_tokens(v)


def _lookup(token: str, state: str, fields: dict, variables: dict) -> Any:
    if token == "state":
        return state
    if token.startswith("req."):
        return fields.get(token[4:])
    if token.startswith("var."):
        return variables.get(token[4:])
    return "${" + token + "}"


def render_template(obj: Any, state: str, fields: dict, variables: dict) -> Any:
    if isinstance(obj, str):
        whole = TOKEN_RE.fullmatch(obj)
        if whole:
            return _lookup(whole.group(1), state, fields, variables)
        return TOKEN_RE.sub(
            lambda m: _stringify(_lookup(m.group(1), state, fields, variables)), obj
        )
    if isinstance(obj, dict):
        return {k: render_template(v, state, fields, variables) for k, v in obj.items()}
    if isinstance(obj, list):
        return [render_template(v, state, fields, variables) for v in obj]
    return obj


def _stringify(v: Any) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    if isinstance(v, (int, float)):
        return format_number(v)
    return str(v)


def _type_ok(value: Any, ftype: str) -> bool:
    if ftype == "bool":
        return isinstance(value, bool)
    if ftype == "number":
        return isinstance(value, (int, float)) and not isinstance(value, bool)
    return isinstance(value, str)


def error_response(state: str, reason: str) -> dict[str, Any]:
    return {"status": "error", "state": state, "data": {"reason": reason}}


def actuator_handle(spec: ActuatorSpec, state: str, request: dict) -> tuple[dict, str]:
    """Apply one request to the state machine; returns ``(response, new_state)``.

    Transitions out of ``state`` are scanned in declaration order and the
    first one whose endpoint matches and whose guard holds fires.
    """
    endpoint = request.get("endpoint")
    fields = request.get("fields", {})
    ep = spec.endpoint(endpoint) if isinstance(endpoint, str) else None
    if ep is None or not isinstance(fields, dict):
        return error_response(state, "bad-request"), state
    declared = dict(ep.request_fields)
    if set(fields) != set(declared):
        return error_response(state, "bad-request"), state
    if not all(_type_ok(fields[f], t) for f, t in declared.items()):
        return error_response(state, "bad-request"), state
    for tr in spec.machine.transitions:
        if tr.src != state or tr.endpoint != endpoint:
            continue
        if tr.guard is not None and not tr.guard.holds(fields):
            continue
        data = render_template(tr.response, tr.to, fields, spec.machine.variables)
        return {"status": "ok", "state": tr.to, "data": data}, tr.to
    return error_response(state, "no-transition"), state


def encode_request(endpoint: str, fields: dict) -> bytes:
    return json.dumps({"endpoint": endpoint, "fields": fields}, separators=(",", ":")).encode("utf-8")


def decode_request(payload: bytes) -> dict | None:
    try:
        obj = json.loads(payload.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        return None
    if not isinstance(obj, dict) or not isinstance(obj.get("endpoint"), str):
        return None
    if not isinstance(obj.get("fields", {}), dict):
        return None
    return obj


def encode_response(response: dict) -> bytes:
    ordered = {"status": response["status"], "state": response["state"], "data": response.get("data", {})}
    return json.dumps(ordered, separators=(",", ":")).encode("utf-8")


# --- runtime devices ---------------------------------------------------


class Provider:
    """A data provider spawned into a testbed."""

    def __init__(self, testbed, spec: ProviderSpec):
        self.testbed = testbed
        self.spec = spec
        self.state = ProviderState(spec.generator)
        self.rng = RngStream.derive(testbed.seed, spec.device_id)
        self.detached = False
        self.emissions = 0
        self.link = None  # TcpLink for external-tcp connectors

    @property
    def node(self) -> str | None:
        return self.spec.connector.via_node if self.spec.connector.kind == "in-sim" else None

    def start(self) -> None:
        self.testbed.scheduler.call_later(self.spec.period_ms, self.emit)

    def reconfigure(self, generator: GeneratorSpec) -> None:
        self.spec.generator = generator
        self.state = ProviderState(generator)

    def emit(self) -> None:
        tb = self.testbed
        now = tb.scheduler.now
        value = next_sample(self.state, self.state.index, self.rng, now)
        dp = DataPoint(self.spec.device_id, self.spec.label, now, value)
        payload = transform(dp, self.spec.transformer)
        self.emissions += 1
        body = {"device": dp.device, "label": dp.label, "index": self.state.index - 1,
                "value": list(value) if isinstance(value, tuple) else value}
        tb.log.record(now, "data", body)
        conn = self.spec.connector
        if conn.kind == "in-sim":
            from iotbed.netsim import MessageEnvelope

            tb.network.send(
                MessageEnvelope(conn.via_node, conn.sink_node, payload, meta={"kind": "data", "datapoint": dp})
            )
        elif not self.detached:
            if conn.kind == "external-tcp" and self.link is not None:
                self.link.send_line(payload)
            tb.datapoint_arrived(dp, None)
        tb.scheduler.call_later(self.spec.period_ms, self.emit)


class Actuator:
    """An actuator spawned into a testbed; owns its current state."""

    def __init__(self, testbed, spec: ActuatorSpec):
        self.testbed = testbed
        self.spec = spec
        self.state = spec.machine.initial
        self.detached = False
        self.handled = 0
        self.link = None

    @property
    def node(self) -> str | None:
        return self.spec.connector.via_node if self.spec.connector.kind == "in-sim" else None

    def handle_payload(self, payload: bytes) -> dict:
        request = decode_request(payload)
        if request is None:
            return error_response(self.state, "malformed")
        response, self.state = actuator_handle(self.spec, self.state, request)
        self.handled += 1
        return response
