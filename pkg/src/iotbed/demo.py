"""Built-in smart-street testbeds and sample suites.

Four configurations scale from an all-physical house (every device an
adapter slot) to two fully simulated houses plus a simulated street
server. Sensor parameters below are demo choices, not measured values.
"""

from __future__ import annotations

from iotbed import devices as dv
from iotbed.config import AdapterSpec, TestbedConfig, config_hash, dump_document, load_configs
from iotbed.netsim import LinkSpec, NodeSpec, TopologySpec
from iotbed.runner import TestSuite, parse_suite

DAY_MS = 24 * 60 * 60 * 1000
STREET_SERVER = "street.server"
STREET_ROUTER = "street.router"
STREET_OPS = "street.ops"

PHYSICAL_ACTUATORS = ("heating", "air_conditioning", "lights", "sound_system", "garage_door", "windows")
PHYSICAL_SENSORS = ("room_temp", "humidity", "rfid")
EXTRA_ACTUATORS = ("curtains", "gate", "coffee_machine")

DESCRIPTIONS = {
    1: "One smart house, all devices physical, physical gateway (purely physical testbed)",
    2: "One smart house, all devices physical, simulated gateway (mixed testbed)",
    3: "House A physical with physical gateway; house B, its gateway and the street server simulated (mixed testbed)",
    4: "Two smart houses and the street server, everything simulated (purely simulated testbed)",
}
# ports an external gateway would connect to when adapters are not forced to loopback
GATEWAY_PORTS = {1: 47101, 3: 47103}


def _provider(dev, label, gen, period, fmt, house, loopback=False) -> dv.ProviderSpec:
    conn = dv.ConnectorSpec("loopback") if loopback else dv.ConnectorSpec("in-sim", sink_node=STREET_SERVER, via_node=dev)
    return dv.ProviderSpec(dev, label, gen, period, fmt, conn)


def house_providers(h: str) -> list[dv.ProviderSpec]:
    rfid_path = dv.Trajectory(((0, 50.07550, 14.43780), (60_000, 50.07600, 14.43850), (120_000, 50.07550, 14.43900)))
    return [
        _provider(f"{h}.motion", "motion", dv.RandomWalk(0.0, 0.4, 0.0, 1.0), 1000, "json-lines", h, loopback=True),
        _provider(f"{h}.light", "light_level", dv.Sinusoid(400.0, 350.0, DAY_MS / 1000, 20.0), 1000, "plain", h),
        _provider(f"{h}.co", "co_ppm", dv.RandomWalk(1.0, 0.2, 0.0, 50.0), 1000, "csv", h),
        _provider(f"{h}.co2", "co2_ppm", dv.RandomWalk(450.0, 15.0, 400.0, 2000.0), 1000, "csv", h),
        _provider(f"{h}.outside_temp", "temperature_outside", dv.Sinusoid(15.0, 10.0, DAY_MS / 1000, 0.5), 1000,
                  "json-lines", h),
        _provider(f"{h}.fire", "fire", dv.Constant(0), 500, "json-lines", h),
        _provider(f"{h}.room_temp", "temperature", dv.Constant(21.5), 100, "json-lines", h),
        _provider(f"{h}.humidity", "humidity", dv.Linear(45.0, 0.001), 1000, "plain", h),
        _provider(f"{h}.rfid", "rfid_position", rfid_path, 1000, "json-lines", h),
    ]


def _status_transitions(states) -> list[dv.Transition]:
    return [dv.Transition(s, "status", s, None, {"state": "${state}"}) for s in states]


def _toggle(dev: str, off: str, on: str, ep_on: str, ep_off: str) -> dv.ActuatorSpec:
    states = [off, on]
    transitions = [
        dv.Transition(off, ep_on, on, None, {"result": f"{ep_on} done"}),
        dv.Transition(on, ep_off, off, None, {"result": f"{ep_off} done"}),
        *_status_transitions(states),
    ]
    endpoints = [dv.EndpointSpec(ep_on), dv.EndpointSpec(ep_off), dv.EndpointSpec("status")]
    return dv.ActuatorSpec(dev, endpoints, dv.StateMachineSpec(states, off, transitions), _sim_conn(dev))


def _sim_conn(dev: str) -> dv.ConnectorSpec:
    return dv.ConnectorSpec("in-sim", sink_node=STREET_OPS, via_node=dev)


def garage_door(dev: str) -> dv.ActuatorSpec:
    return _toggle(dev, "closed", "open", "open", "close")


def coffee_machine(dev: str) -> dv.ActuatorSpec:
    states = ["idle", "brewing"]
    transitions = [
        dv.Transition("idle", "brew", "brewing", dv.Guard("cups", ">", 0), {"cups": "${req.cups}", "state": "${state}"}),
        dv.Transition("brewing", "done", "idle", None, {"served": True}),
        *_status_transitions(states),
    ]
    endpoints = [dv.EndpointSpec("brew", (("cups", "number"),)), dv.EndpointSpec("done"), dv.EndpointSpec("status")]
    return dv.ActuatorSpec(dev, endpoints, dv.StateMachineSpec(states, "idle", transitions, {"max_cups": 4}),
                           _sim_conn(dev))


def heating(dev: str) -> dv.ActuatorSpec:
    states = ["off", "heating"]
    transitions = [
        dv.Transition("off", "set", "heating", dv.Guard("target", ">", 5), {"target": "${req.target}"}),
        dv.Transition("heating", "set", "heating", dv.Guard("target", ">", 5), {"target": "${req.target}"}),
        dv.Transition("heating", "off", "off", None, {}),
        *_status_transitions(states),
    ]
    endpoints = [dv.EndpointSpec("set", (("target", "number"),)), dv.EndpointSpec("off"), dv.EndpointSpec("status")]
    return dv.ActuatorSpec(dev, endpoints, dv.StateMachineSpec(states, "off", transitions), _sim_conn(dev))


def sound_system(dev: str) -> dv.ActuatorSpec:
    states = ["stopped", "playing"]
    transitions = [
        dv.Transition("stopped", "play", "playing", None, {"track": "${req.track}"}),
        dv.Transition("playing", "play", "playing", None, {"track": "${req.track}"}),
        dv.Transition("playing", "stop", "stopped", None, {}),
        *_status_transitions(states),
    ]
    endpoints = [dv.EndpointSpec("play", (("track", "string"),)), dv.EndpointSpec("stop"), dv.EndpointSpec("status")]
    return dv.ActuatorSpec(dev, endpoints, dv.StateMachineSpec(states, "stopped", transitions), _sim_conn(dev))


def street_server() -> dv.ActuatorSpec:
    states = ["normal", "alarm"]
    transitions = [
        dv.Transition("normal", "alert", "alarm", None, {"source": "${req.source}", "state": "${state}"}),
        dv.Transition("alarm", "alert", "alarm", None, {"source": "${req.source}", "state": "${state}"}),
        dv.Transition("alarm", "reset", "normal", None, {}),
        *_status_transitions(states),
    ]
    endpoints = [dv.EndpointSpec("alert", (("source", "string"),)), dv.EndpointSpec("reset"),
                 dv.EndpointSpec("status")]
    return dv.ActuatorSpec(STREET_SERVER, endpoints, dv.StateMachineSpec(states, "normal", transitions),
                           _sim_conn(STREET_SERVER))


def house_actuators(h: str) -> list[dv.ActuatorSpec]:
    return [
        heating(f"{h}.heating"),
        _toggle(f"{h}.air_conditioning", "off", "cooling", "cool", "off"),
        _toggle(f"{h}.lights", "off", "on", "on", "off"),
        sound_system(f"{h}.sound_system"),
        garage_door(f"{h}.garage_door"),
        _toggle(f"{h}.windows", "closed", "open", "open", "close"),
        _toggle(f"{h}.curtains", "open", "closed", "close", "open"),
        _toggle(f"{h}.gate", "closed", "open", "open", "close"),
        coffee_machine(f"{h}.coffee_machine"),
    ]


def _simulated_house(h: str, uplink: str, nodes: list, links: list) -> tuple[list, list]:
    providers = house_providers(h)
    actuators = house_actuators(h)
    gw = f"{h}.gw"
    nodes.append(NodeSpec(gw, "gateway"))
    links.append(LinkSpec(gw, uplink, 10, 0.0, None, True))
    for dev in [p.connector.via_node for p in providers if p.connector.kind == "in-sim"] + [
        a.device_id for a in actuators
    ]:
        nodes.append(NodeSpec(dev, "device"))
        links.append(LinkSpec(dev, gw, 2, 0.0, 250_000, True))
    return providers, actuators


def _physical_house(h: str, uplink: str | None, nodes: list, links: list, gateway: str, cid: int) -> list[AdapterSpec]:
    gw = f"{h}.gw"
    adapters = []
    if gateway == "physical":
        nodes.append(NodeSpec(gw, "external"))
        port = GATEWAY_PORTS[cid]
        adapters.append(AdapterSpec(gw, "external-tcp", gw, "127.0.0.1", port, "gateway"))
    else:
        nodes.append(NodeSpec(gw, "gateway"))
    if uplink is not None:
        links.append(LinkSpec(gw, uplink, 10, 0.0, None, True))
    for name in PHYSICAL_ACTUATORS + PHYSICAL_SENSORS:
        dev = f"{h}.{name}"
        nodes.append(NodeSpec(dev, "external"))
        links.append(LinkSpec(dev, gw, 2, 0.0, None, True))
        role = "actuator" if name in PHYSICAL_ACTUATORS else "sensor"
        adapters.append(AdapterSpec(dev, "loopback", dev, None, None, role))
    return adapters


def _street(nodes: list, links: list) -> None:
    nodes += [NodeSpec(STREET_ROUTER, "router"), NodeSpec(STREET_SERVER, "device"), NodeSpec(STREET_OPS, "external")]
    links += [LinkSpec(STREET_SERVER, STREET_ROUTER, 1, 0.0, None, True),
              LinkSpec(STREET_OPS, STREET_ROUTER, 1, 0.0, None, True)]


def builtin_config(cid: int) -> TestbedConfig:
    """Configuration for one of the four sample testbeds."""
    if cid not in DESCRIPTIONS:
        raise ValueError(f"demo config id must be 1..4, got {cid!r}")
    nodes: list[NodeSpec] = []
    links: list[LinkSpec] = []
    providers: list = []
    actuators: list = []
    adapters: list = []
    if cid in (1, 2):
        adapters = _physical_house("houseA", None, nodes, links, "physical" if cid == 1 else "simulated", cid)
    else:
        _street(nodes, links)
        if cid == 3:
            adapters = _physical_house("houseA", STREET_ROUTER, nodes, links, "physical", cid)
        else:
            p, a = _simulated_house("houseA", STREET_ROUTER, nodes, links)
            providers += p
            actuators += a
        p, a = _simulated_house("houseB", STREET_ROUTER, nodes, links)
        providers += p
        actuators += a
        actuators.append(street_server())
    return TestbedConfig(f"demo{cid}", TopologySpec(nodes, links), providers, actuators, adapters)


def demo_document(cid: int) -> bytes:
    """The standalone config document for demo ``cid``, normalized through the loader."""
    doc = dump_document([builtin_config(cid)])
    load_configs(doc)
    return doc


def load_demo(cid: int) -> TestbedConfig:
    doc = demo_document(cid)
    cfg = load_configs(doc)[0]
    cfg.config_hash = config_hash(doc)
    return cfg


# --- suites ------------------------------------------------------------


def _smoke(cfg: TestbedConfig) -> dict:
    cases = []
    if cfg.actuators:
        cases.append({"name": "actuators-respond", "steps": [
            {"kind": "invoke-actuator", "device": a.device_id, "endpoint": "status", "fields": {}}
            for a in cfg.actuators
        ]})
    if cfg.providers:
        cases.append({"name": "providers-emit", "steps": [
            {"kind": "await-datapoint", "device": p.device_id, "label": p.label, "timeout_ms": 3 * p.period_ms + 100}
            for p in cfg.providers
        ]})
    if cfg.adapters:
        cases.append({"name": "adapter-slots-respond", "steps": [
            {"kind": "invoke-actuator", "device": a.device_id, "endpoint": "ping", "fields": {}}
            for a in cfg.adapters
        ]})
    return {"name": "smoke", "cases": cases}


def _scenario(cfg: TestbedConfig) -> dict:
    ids = set(cfg.device_ids())
    if "houseB.garage_door" not in ids:
        # physical-only testbeds: exercise each slot twice, as a controller would
        return {"name": "scenario", "cases": [{"name": "slot-round-trip", "steps": [
            step for a in cfg.adapters for step in (
                {"kind": "invoke-actuator", "device": a.device_id, "endpoint": "status", "fields": {}},
                {"kind": "warn-if", "source": "response", "field": "status", "op": "!=", "literal": "ok"},
            )
        ]}]}
    b = "houseB"
    return {"name": "scenario", "cases": [
        {"name": "fire-alert", "steps": [
            {"kind": "inject", "action": {"kind": "reconfigure-provider", "device_id": f"{b}.fire",
                                          "generator": {"kind": "constant", "value": 1}}},
            {"kind": "await-datapoint", "device": f"{b}.fire", "label": "fire",
             "comparator": {"op": ">", "literal": 0}, "timeout_ms": 2000},
            {"kind": "invoke-actuator", "device": STREET_SERVER, "endpoint": "alert",
             "fields": {"source": f"{b}.fire"}},
            {"kind": "assert-state", "device": STREET_SERVER, "expected": "alarm"},
            {"kind": "invoke-actuator", "device": STREET_SERVER, "endpoint": "reset", "fields": {}},
            {"kind": "assert-state", "device": STREET_SERVER, "expected": "normal"},
            {"kind": "inject", "action": {"kind": "reconfigure-provider", "device_id": f"{b}.fire",
                                          "generator": {"kind": "constant", "value": 0}}},
        ]},
        {"name": "garage-door-cycle", "steps": [
            {"kind": "invoke-actuator", "device": f"{b}.garage_door", "endpoint": "open", "fields": {}},
            {"kind": "assert-state", "device": f"{b}.garage_door", "expected": "open"},
            {"kind": "invoke-actuator", "device": f"{b}.garage_door", "endpoint": "close", "fields": {}},
            {"kind": "assert-state", "device": f"{b}.garage_door", "expected": "closed"},
        ]},
        {"name": "room-temperature", "steps": [
            {"kind": "await-datapoint", "device": f"{b}.room_temp", "label": "temperature",
             "comparator": {"op": ">", "literal": 20}, "timeout_ms": 1000, "warn_after_ms": 500},
            {"kind": "warn-if", "source": "datapoint", "field": "value", "op": ">", "literal": 28},
        ]},
        {"name": "coffee", "steps": [
            {"kind": "invoke-actuator", "device": f"{b}.coffee_machine", "endpoint": "brew", "fields": {"cups": 2}},
            {"kind": "assert-state", "device": f"{b}.coffee_machine", "expected": "brewing"},
            {"kind": "invoke-actuator", "device": f"{b}.coffee_machine", "endpoint": "done", "fields": {}},
            {"kind": "assert-state", "device": f"{b}.coffee_machine", "expected": "idle"},
        ]},
        {"name": "evening-routine", "steps": [
            {"kind": "parallel", "branches": [
                [{"kind": "invoke-actuator", "device": f"{b}.lights", "endpoint": "on", "fields": {}},
                 {"kind": "sync-point"},
                 {"kind": "assert-state", "device": f"{b}.lights", "expected": "on"}],
                [{"kind": "invoke-actuator", "device": f"{b}.curtains", "endpoint": "close", "fields": {}},
                 {"kind": "sync-point"},
                 {"kind": "assert-state", "device": f"{b}.curtains", "expected": "closed"}],
            ]},
            {"kind": "invoke-actuator", "device": f"{b}.sound_system", "endpoint": "play",
             "fields": {"track": "evening"}},
        ]},
    ]}


def _resilience(cfg: TestbedConfig) -> dict | None:
    if "houseB.co2" not in set(cfg.device_ids()):
        return None
    gw = "houseB.gw"
    await_co2 = {"kind": "await-datapoint", "device": "houseB.co2", "label": "co2_ppm", "timeout_ms": 3000}
    return {"name": "resilience", "cases": [{"name": "gateway-outage", "steps": [
        {"kind": "inject", "action": {"kind": "network-event", "event": {"kind": "node-detach", "node": gw}}},
        {**await_co2, "critical": False},
        {"kind": "inject", "action": {"kind": "network-event", "event": {"kind": "node-attach", "node": gw}}},
        await_co2,
        {"kind": "invoke-actuator", "device": "houseB.garage_door", "endpoint": "status", "fields": {}},
    ]}]}


def builtin_suite_documents(cfg: TestbedConfig) -> list[dict]:
    docs = [_smoke(cfg), _scenario(cfg)]
    res = _resilience(cfg)
    if res is not None:
        docs.append(res)
    return docs


def builtin_suites(cfg: TestbedConfig) -> list[TestSuite]:
    """Smoke, scenario and (where a simulated gateway exists) resilience suites for ``cfg``."""
    return [parse_suite(d) for d in builtin_suite_documents(cfg)]
