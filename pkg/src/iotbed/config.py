"""Parsing and validation of testbed configuration documents.

A document is ``{"configs": [ ... ]}``; each entry describes one named
testbed. Every error message starts with the path of the offending
field, e.g. ``configs[0].topology.links[2].b``.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any

from iotbed import devices as dv
from iotbed.kernel import fnv1a64
from iotbed.netsim import (
    EVENT_KINDS,
    LinkSpec,
    NetworkEvent,
    NodeSpec,
    TopologyError,
    TopologySpec,
)

ADAPTER_KINDS = ("loopback", "external-tcp")
HUB_ACTION_KINDS = ("network-event", "reconfigure-provider", "detach-device", "attach-device")


class ConfigError(ValueError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path
        self.message = message


class ConfigSyntaxError(ConfigError):
    pass


@dataclass
class AdapterSpec:
    device_id: str
    kind: str = "loopback"
    node: str | None = None
    host: str | None = None
    port: int | None = None
    role: str = "device"


@dataclass
class TestbedConfig:
    name: str
    topology: TopologySpec
    providers: list[dv.ProviderSpec] = field(default_factory=list)
    actuators: list[dv.ActuatorSpec] = field(default_factory=list)
    adapters: list[AdapterSpec] = field(default_factory=list)
    seed: int | None = None
    config_hash: str = ""

    __test__ = False

    def device_ids(self) -> list[str]:
        return (
            [p.device_id for p in self.providers]
            + [a.device_id for a in self.actuators]
            + [a.device_id for a in self.adapters]
        )


@dataclass
class HubAction:
    kind: str
    event: NetworkEvent | None = None
    device_id: str | None = None
    generator: dv.GeneratorSpec | None = None

    def describe(self) -> dict[str, Any]:
        body: dict[str, Any] = {"kind": self.kind}
        if self.event is not None:
            body["event"] = self.event.describe()
        if self.device_id is not None:
            body["device_id"] = self.device_id
        if self.generator is not None:
            body["generator"] = generator_to_json(self.generator)
        return body


def config_hash(document: bytes) -> str:
    return f"{fnv1a64(document):016x}"


class _Obj:
    """A JSON object being read, with its path for error messages."""

    def __init__(self, data: Any, path: str):
        if not isinstance(data, dict):
            raise ConfigError(path, f"object expected, got {type(data).__name__}")
        self.data = data
        self.path = path
        self.used: set[str] = set()

    def sub(self, key: str) -> str:
        return f"{self.path}.{key}" if self.path else key

    def get(self, key: str, kind: type | tuple, default: Any = ..., *, nullable: bool = False) -> Any:
        self.used.add(key)
        if key not in self.data:
            if default is ...:
                raise ConfigError(self.sub(key), "required field missing")
            return default
        v = self.data[key]
        if v is None and nullable:
            return None
        kinds = kind if isinstance(kind, tuple) else (kind,)
        bad_bool = isinstance(v, bool) and bool not in kinds
        if not isinstance(v, kinds) or bad_bool:
            names = "/".join(k.__name__ for k in kinds)
            raise ConfigError(self.sub(key), f"{names} expected, got {json.dumps(v)}")
        return v

    def obj(self, key: str, default: Any = ...) -> "_Obj | None":
        v = self.get(key, dict, default)
        return None if v is None else _Obj(v, self.sub(key))

    def items(self, key: str, default: Any = ...) -> list[tuple[Any, str]]:
        lst = self.get(key, list, default)
        return [(x, f"{self.sub(key)}[{i}]") for i, x in enumerate(lst or [])]

    def done(self) -> None:
        extra = sorted(set(self.data) - self.used)
        if extra:
            raise ConfigError(self.sub(extra[0]), "unknown field")


NUM = (int, float)


def _wrap(path: str, fn, *args):
    try:
        return fn(*args)
    except (dv.DeviceSpecError, TopologyError) as exc:
        raise ConfigError(path, str(exc)) from None


def parse_generator(o: _Obj) -> dv.GeneratorSpec:
    kind = o.get("kind", str)
    if kind == "constant":
        g: dv.GeneratorSpec = dv.Constant(o.get("value", NUM))
    elif kind == "linear":
        g = dv.Linear(o.get("start", NUM), o.get("slope_per_sample", NUM))
    elif kind == "random_walk":
        g = dv.RandomWalk(o.get("start", NUM), o.get("step_stddev", NUM), o.get("min", NUM), o.get("max", NUM))
    elif kind == "sinusoid":
        g = dv.Sinusoid(
            o.get("mean", NUM), o.get("amplitude", NUM), o.get("period_samples", NUM), o.get("noise_stddev", NUM, 0.0)
        )
    elif kind == "trajectory":
        wps = []
        for wp, p in o.items("waypoints"):
            if not isinstance(wp, list) or len(wp) != 3 or not all(
                isinstance(x, NUM) and not isinstance(x, bool) for x in wp
            ):
                raise ConfigError(p, "[t_ms, lat, lon] expected")
            wps.append((wp[0], wp[1], wp[2]))
        g = dv.Trajectory(tuple(wps))
    else:
        raise ConfigError(o.sub("kind"), f"unknown generator kind {kind!r}")
    o.done()
    _wrap(o.path, g.validate)
    return g


def generator_to_json(g: dv.GeneratorSpec) -> dict[str, Any]:
    if isinstance(g, dv.Constant):
        return {"kind": "constant", "value": g.value}
    if isinstance(g, dv.Linear):
        return {"kind": "linear", "start": g.start, "slope_per_sample": g.slope_per_sample}
    if isinstance(g, dv.RandomWalk):
        return {"kind": "random_walk", "start": g.start, "step_stddev": g.step_stddev, "min": g.min, "max": g.max}
    if isinstance(g, dv.Sinusoid):
        return {"kind": "sinusoid", "mean": g.mean, "amplitude": g.amplitude,
                "period_samples": g.period_samples, "noise_stddev": g.noise_stddev}
    return {"kind": "trajectory", "waypoints": [list(w) for w in g.waypoints]}


def parse_connector(o: _Obj) -> dv.ConnectorSpec:
    kind = o.get("kind", str)
    if kind == "in-sim":
        c = dv.ConnectorSpec(kind, sink_node=o.get("sink_node", str), via_node=o.get("via_node", str))
    elif kind == "external-tcp":
        c = dv.ConnectorSpec(kind, host=o.get("host", str), port=o.get("port", int))
    elif kind == "loopback":
        c = dv.ConnectorSpec(kind)
    else:
        raise ConfigError(o.sub("kind"), f"unknown connector kind {kind!r}")
    o.done()
    _wrap(o.path, c.validate)
    return c


def parse_topology(o: _Obj) -> TopologySpec:
    nodes = []
    for raw, p in o.items("nodes"):
        n = _Obj(raw, p)
        nodes.append(NodeSpec(n.get("name", str), n.get("kind", str, "device")))
        n.done()
    links = []
    for raw, p in o.items("links", []):
        ln = _Obj(raw, p)
        links.append(
            LinkSpec(
                ln.get("a", str),
                ln.get("b", str),
                ln.get("latency_ms", int, 0),
                ln.get("loss_prob", NUM, 0.0),
                ln.get("bandwidth_bps", int, None, nullable=True),
                ln.get("up", bool, True),
            )
        )
        ln.done()
    o.done()
    spec = TopologySpec(nodes, links)
    try:
        spec.validate()
    except TopologyError as exc:
        raise ConfigError(o.path, str(exc)) from None
    return spec


def parse_provider(o: _Obj) -> dv.ProviderSpec:
    spec = dv.ProviderSpec(
        device_id=o.get("device_id", str),
        label=o.get("label", str),
        generator=parse_generator(o.obj("generator")),
        period_ms=o.get("period_ms", int),
        transformer=o.get("transformer", str, "json-lines"),
        connector=parse_connector(o.obj("connector")),
    )
    o.done()
    _wrap(o.path, spec.validate)
    return spec


def parse_actuator(o: _Obj) -> dv.ActuatorSpec:
    endpoints = []
    for raw, p in o.items("endpoints"):
        e = _Obj(raw, p)
        fields = []
        for fraw, fp in e.items("request_fields", []):
            f = _Obj(fraw, fp)
            fields.append((f.get("name", str), f.get("type", str)))
            f.done()
        endpoints.append(dv.EndpointSpec(e.get("name", str), tuple(fields)))
        e.done()
    m = o.obj("machine")
    transitions = []
    for raw, p in m.items("transitions"):
        t = _Obj(raw, p)
        graw = t.obj("guard", None)
        guard = None
        if graw is not None:
            guard = dv.Guard(graw.get("field", str), graw.get("op", str), graw.get("literal", (int, float, str, bool)))
            graw.done()
        transitions.append(
            dv.Transition(t.get("from", str), t.get("endpoint", str), t.get("to", str), guard, t.get("response", dict, {}))
        )
        t.done()
    machine = dv.StateMachineSpec(m.get("states", list), m.get("initial", str), transitions, m.get("variables", dict, {}))
    m.done()
    spec = dv.ActuatorSpec(o.get("device_id", str), endpoints, machine, parse_connector(o.obj("connector")))
    o.done()
    _wrap(o.path, spec.validate)
    return spec


def parse_adapter(o: _Obj) -> AdapterSpec:
    spec = AdapterSpec(
        device_id=o.get("device_id", str),
        kind=o.get("kind", str, "loopback"),
        node=o.get("node", str, None, nullable=True),
        host=o.get("host", str, None, nullable=True),
        port=o.get("port", int, None, nullable=True),
        role=o.get("role", str, "device"),
    )
    o.done()
    if spec.kind not in ADAPTER_KINDS:
        raise ConfigError(o.sub("kind"), f"{spec.kind!r} is not one of {ADAPTER_KINDS}")
    if spec.kind == "external-tcp" and (spec.host is None or spec.port is None):
        raise ConfigError(o.path, "external-tcp adapter needs host and port")
    _wrap(o.sub("device_id"), dv._check_ident, spec.device_id, "device_id")
    return spec


def parse_config(o: _Obj) -> TestbedConfig:
    name = o.get("name", str)
    seed = o.get("seed", int, None, nullable=True)
    topology = parse_topology(o.obj("topology"))
    providers = [parse_provider(_Obj(r, p)) for r, p in o.items("providers", [])]
    actuators = [parse_actuator(_Obj(r, p)) for r, p in o.items("actuators", [])]
    adapters = [parse_adapter(_Obj(r, p)) for r, p in o.items("adapters", [])]
    o.done()
    cfg = TestbedConfig(name, topology, providers, actuators, adapters, seed)
    _check_references(cfg, o.path)
    return cfg


def _check_references(cfg: TestbedConfig, path: str) -> None:
    nodes = {n.name for n in cfg.topology.nodes}
    seen: dict[str, str] = {}
    groups = (("providers", cfg.providers), ("actuators", cfg.actuators), ("adapters", cfg.adapters))
    for group, specs in groups:
        for i, s in enumerate(specs):
            where = f"{path}.{group}[{i}]"
            if s.device_id in seen:
                raise ConfigError(f"{where}.device_id", f"duplicate device id {s.device_id!r} (also in {seen[s.device_id]})")
            seen[s.device_id] = where
            conn = getattr(s, "connector", None)
            if conn is not None and conn.kind == "in-sim":
                for attr in ("sink_node", "via_node"):
                    if getattr(conn, attr) not in nodes:
                        raise ConfigError(f"{where}.connector.{attr}", f"unknown node {getattr(conn, attr)!r}")
            node = getattr(s, "node", None)
            if node is not None and node not in nodes:
                raise ConfigError(f"{where}.node", f"unknown node {node!r}")
    bound: dict[str, str] = {}
    for i, a in enumerate(cfg.actuators):
        if a.connector.kind == "in-sim":
            via = a.connector.via_node
            if via in bound:
                raise ConfigError(
                    f"{path}.actuators[{i}].connector.via_node",
                    f"node {via!r} already hosts actuator {bound[via]!r}",
                )
            bound[via] = a.device_id


def _decode(document: bytes) -> dict:
    if not document or not document.strip():
        raise ConfigSyntaxError("", "empty document")
    try:
        root = json.loads(document.decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ConfigSyntaxError("", f"syntax error: {exc}") from None
    return root


def load_configs(document: bytes) -> list[TestbedConfig]:
    root = _Obj(_decode(document), "")
    h = config_hash(document)
    configs = []
    names: set[str] = set()
    for raw, p in root.items("configs"):
        cfg = parse_config(_Obj(raw, p))
        if cfg.name in names:
            raise ConfigError(f"{p}.name", f"duplicate config name {cfg.name!r}")
        names.add(cfg.name)
        cfg.config_hash = h
        configs.append(cfg)
    root.done()
    return configs


def config_names(document: bytes) -> list[str]:
    root = _Obj(_decode(document), "")
    out = []
    for raw, p in root.items("configs"):
        out.append(_Obj(raw, p).get("name", str))
    return out


def load_config(document: bytes, select: str | None = None) -> TestbedConfig:
    configs = load_configs(document)
    if select is None:
        if len(configs) != 1:
            raise ConfigError("configs", f"document holds {len(configs)} configs; select one by name")
        return configs[0]
    for cfg in configs:
        if cfg.name == select:
            return cfg
    raise ConfigError("configs", f"no config named {select!r}")


def parse_network_event(o: _Obj) -> NetworkEvent:
    kind = o.get("kind", str)
    if kind not in EVENT_KINDS:
        raise ConfigError(o.sub("kind"), f"unknown network event {kind!r}")
    if kind.startswith("node-"):
        target: Any = o.get("node", str)
    else:
        pair = o.get("link", list)
        if len(pair) != 2 or not all(isinstance(x, str) for x in pair):
            raise ConfigError(o.sub("link"), "[a, b] node pair expected")
        target = (pair[0], pair[1])
    value = None
    if kind in ("set-latency", "set-loss"):
        value = o.get("value", NUM)
    o.done()
    return NetworkEvent(kind, target, value)


def parse_hub_action(data: Any, path: str = "action") -> HubAction:
    o = _Obj(data, path)
    kind = o.get("kind", str)
    if kind == "network-event":
        act = HubAction(kind, event=parse_network_event(o.obj("event")))
    elif kind == "reconfigure-provider":
        act = HubAction(kind, device_id=o.get("device_id", str), generator=parse_generator(o.obj("generator")))
    elif kind in ("detach-device", "attach-device"):
        act = HubAction(kind, device_id=o.get("device_id", str))
    else:
        raise ConfigError(o.sub("kind"), f"unknown hub action {kind!r}")
    o.done()
    return act


# --- serialization back to documents ----------------------------------


def connector_to_json(c: dv.ConnectorSpec) -> dict[str, Any]:
    if c.kind == "in-sim":
        return {"kind": c.kind, "sink_node": c.sink_node, "via_node": c.via_node}
    if c.kind == "external-tcp":
        return {"kind": c.kind, "host": c.host, "port": c.port}
    return {"kind": c.kind}


def config_to_json(cfg: TestbedConfig) -> dict[str, Any]:
    out: dict[str, Any] = {"name": cfg.name}
    if cfg.seed is not None:
        out["seed"] = cfg.seed
    out["topology"] = {
        "nodes": [{"name": n.name, "kind": n.kind} for n in cfg.topology.nodes],
        "links": [
            {k: v for k, v in (("a", ln.a), ("b", ln.b), ("latency_ms", ln.latency_ms), ("loss_prob", ln.loss_prob),
                               ("bandwidth_bps", ln.bandwidth_bps), ("up", ln.up)) if v is not None}
            for ln in cfg.topology.links
        ],
    }
    out["providers"] = [
        {"device_id": p.device_id, "label": p.label, "generator": generator_to_json(p.generator),
         "period_ms": p.period_ms, "transformer": p.transformer, "connector": connector_to_json(p.connector)}
        for p in cfg.providers
    ]
    out["actuators"] = [
        {
            "device_id": a.device_id,
            "endpoints": [
                {"name": e.name, "request_fields": [{"name": f, "type": t} for f, t in e.request_fields]}
                for e in a.endpoints
            ],
            "machine": {
                "states": list(a.machine.states),
                "initial": a.machine.initial,
                "variables": dict(a.machine.variables),
                "transitions": [
                    {"from": t.src, "endpoint": t.endpoint, "to": t.to,
                     **({"guard": {"field": t.guard.field, "op": t.guard.op, "literal": t.guard.literal}} if t.guard else {}),
                     "response": t.response}
                    for t in a.machine.transitions
                ],
            },
            "connector": connector_to_json(a.connector),
        }
        for a in cfg.actuators
    ]
    out["adapters"] = [
        {k: v for k, v in (("device_id", a.device_id), ("kind", a.kind), ("node", a.node), ("host", a.host),
                           ("port", a.port), ("role", a.role)) if v is not None}
        for a in cfg.adapters
    ]
    return out


def dump_document(configs: list[TestbedConfig]) -> bytes:
    return (json.dumps({"configs": [config_to_json(c) for c in configs]}, indent=2) + "\n").encode("utf-8")
