"""Provisioner and hub: turns a validated config into a live testbed."""

from __future__ import annotations

import copy
import json
import logging
from dataclasses import dataclass, field
from typing import Any, Callable

from iotbed import devices as dv
from iotbed.collector import CollectorLog
from iotbed.config import AdapterSpec, HubAction, TestbedConfig
from iotbed.kernel import RngStream, Scheduler
from iotbed.netsim import NETWORK_STREAM, MessageEnvelope, Network, NetworkEvent
from iotbed.tcp import TcpLink

log = logging.getLogger(__name__)

EXTERNAL_REPLY_TIMEOUT_S = 5.0


class ProvisionError(RuntimeError):
    pass


class UnknownDeviceError(KeyError):
    def __str__(self) -> str:
        return f"unknown device {self.args[0]!r}"


@dataclass(frozen=True)
class TestbedState:
    sim_time: int
    devices: dict[str, dict[str, Any]]
    links: list[dict[str, Any]]
    sent: int
    delivered: int
    dropped: int
    drop_reasons: dict[str, int] = field(default_factory=dict)

    __test__ = False


class Adapter:
    """Stand-in slot for a physical device.

    In loopback mode a request is answered in-process with the request
    fields echoed back; in external-tcp mode it is forwarded to whatever
    peer connected to the slot's listening socket.
    """

    def __init__(self, spec: AdapterSpec):
        self.spec = spec
        self.detached = False
        self.link: TcpLink | None = None
        self.stash: list[bytes] = []

    @property
    def state(self) -> str:
        if self.detached:
            return "detached"
        if self.link is not None:
            return "connected" if self.link.connected else "waiting"
        return "loopback"

    def exchange(self, endpoint: str, fields: dict) -> dict | None:
        if self.link is None:
            return {"status": "ok", "state": "loopback", "data": dict(fields)}
        reply = self.link.request(dv.encode_request(endpoint, fields), EXTERNAL_REPLY_TIMEOUT_S)
        while reply is not None:
            try:
                obj = json.loads(reply.decode("utf-8"))
            except (UnicodeDecodeError, json.JSONDecodeError):
                obj = None
            if isinstance(obj, dict) and "status" in obj:
                return {"status": obj["status"], "state": obj.get("state", ""), "data": obj.get("data", {})}
            self.stash.append(reply)
            try:
                reply = self.link.frames.get(timeout=EXTERNAL_REPLY_TIMEOUT_S)
            except Exception:
                reply = None
        return None


class Testbed:
    """A provisioned testbed: network, devices, collector and hub."""

    __test__ = False

    def __init__(self, config: TestbedConfig, seed: int, log_extra: dict | None = None):
        self.config = config
        self.seed = seed
        self.scheduler = Scheduler()
        self.log = CollectorLog.open(seed, config.config_hash, config_name=config.name, **(log_extra or {}))
        self.network = Network(
            config.topology, self.scheduler, RngStream.derive(seed, NETWORK_STREAM), self.log
        )
        self.providers: dict[str, dv.Provider] = {}
        self.actuators: dict[str, dv.Actuator] = {}
        self.adapters: dict[str, Adapter] = {}
        self.listeners: list[Callable[[dv.DataPoint, str | None], None]] = []
        self.last_datapoint: dict[str, dv.DataPoint] = {}
        self._pending: dict[int, Callable[[dict, int], None]] = {}
        self._next_request = 0
        self._actuator_at: dict[str, dv.Actuator] = {}

    @property
    def now(self) -> int:
        return self.scheduler.now

    # devices ----------------------------------------------------------

    def device_kind(self, device_id: str) -> str:
        if device_id in self.providers:
            return "provider"
        if device_id in self.actuators:
            return "actuator"
        if device_id in self.adapters:
            return "adapter"
        raise UnknownDeviceError(device_id)

    def device_state(self, device_id: str) -> str:
        kind = self.device_kind(device_id)
        if kind == "actuator":
            return self.actuators[device_id].state
        if kind == "adapter":
            return self.adapters[device_id].state
        return "detached" if self._provider_detached(device_id) else "emitting"

    def _provider_detached(self, device_id: str) -> bool:
        p = self.providers[device_id]
        return p.detached or (p.node is not None and p.node in self.network.detached)

    # traffic ----------------------------------------------------------

    def _on_envelope(self, env: MessageEnvelope) -> None:
        kind = env.meta.get("kind")
        if kind == "data":
            self.datapoint_arrived(env.meta["datapoint"], env.dst)
        elif kind == "response":
            cb = self._pending.pop(env.meta["request_id"], None)
            if cb is not None:
                cb(json.loads(env.payload.decode("utf-8")), self.now)
        else:
            act = self._actuator_at.get(env.dst)
            if act is None:
                return
            response = act.handle_payload(env.payload)
            reply = MessageEnvelope(
                env.dst, env.src, dv.encode_response(response),
                meta={"kind": "response", "request_id": env.meta.get("request_id")},
            )
            self.network.send(reply)

    def datapoint_arrived(self, dp: dv.DataPoint, node: str | None) -> None:
        self.last_datapoint[dp.device] = dp
        for fn in list(self.listeners):
            fn(dp, node)

    def request(
        self, device_id: str, endpoint: str, fields: dict, on_response: Callable[[dict, int], None]
    ) -> int:
        """Send a request to an actuator or adapter slot.

        ``on_response(response, t)`` fires on the loop when a reply
        arrives; nothing fires if the request or its reply is lost.
        """
        kind = self.device_kind(device_id)
        if kind == "provider":
            raise UnknownDeviceError(device_id)
        rid = self._next_request
        self._next_request += 1
        if kind == "adapter":
            adapter = self.adapters[device_id]
            if adapter.detached:
                return rid
            response = adapter.exchange(endpoint, fields)
            if response is not None:
                self.scheduler.schedule(self.now, lambda: on_response(response, self.now))
            return rid
        act = self.actuators[device_id]
        conn = act.spec.connector
        payload = dv.encode_request(endpoint, fields)
        if conn.kind == "in-sim":
            self._pending[rid] = on_response
            self.network.send(
                MessageEnvelope(conn.sink_node, conn.via_node, payload, meta={"kind": "request", "request_id": rid})
            )
        elif not act.detached:
            response = act.handle_payload(payload)
            self.scheduler.schedule(self.now, lambda: on_response(response, self.now))
        return rid

    def pump_external(self) -> None:
        """Ingest frames that external peers pushed since the last call."""
        self.scheduler.drain_submissions()
        for adapter in self.adapters.values():
            frames = adapter.stash
            adapter.stash = []
            if adapter.link is not None:
                while not adapter.link.frames.empty():
                    frames.append(adapter.link.frames.get_nowait())
            for frame in frames:
                try:
                    dp = dv.parse(frame + b"\n", "json-lines")
                except (ValueError, KeyError, TypeError):
                    log.warning("adapter %s: ignoring unparsable frame %r", adapter.spec.device_id, frame)
                    continue
                if not adapter.detached:
                    self.datapoint_arrived(dv.DataPoint(dp.device, dp.label, self.now, dp.value), None)

    # hub --------------------------------------------------------------

    def dispatch(self, action: HubAction) -> None:
        """Apply a hub action at the current sim time and record it."""
        if action.kind == "network-event":
            self.log.record(self.now, "hub-action", action.describe())
            self.network.apply_event(action.event)
            return
        device = action.device_id
        if action.kind == "reconfigure-provider":
            if device not in self.providers:
                raise UnknownDeviceError(device)
            action.generator.validate()
            self.log.record(self.now, "hub-action", action.describe())
            self.providers[device].reconfigure(action.generator)
            return
        detach = action.kind == "detach-device"
        known = device in self.providers or device in self.actuators or device in self.adapters
        if not known and device not in self.network.nodes:
            raise UnknownDeviceError(device)
        self.log.record(self.now, "hub-action", action.describe())
        if not known:
            node: str | None = device
        else:
            obj = self.providers.get(device) or self.actuators.get(device) or self.adapters[device]
            obj.detached = detach
            node = getattr(obj, "node", None)
        if node is not None:
            self.network.apply_event(NetworkEvent("node-detach" if detach else "node-attach", node))

    def snapshot(self) -> TestbedState:
        devices: dict[str, dict[str, Any]] = {}
        for did, p in self.providers.items():
            devices[did] = {"kind": "provider", "sample_index": p.state.index,
                            "attached": not self._provider_detached(did)}
        for did, a in self.actuators.items():
            attached = not a.detached and (a.node is None or a.node not in self.network.detached)
            devices[did] = {"kind": "actuator", "state": a.state, "attached": attached}
        for did, ad in self.adapters.items():
            devices[did] = {"kind": "adapter", "state": ad.state, "attached": not ad.detached}
        links = [
            {"a": ln.a, "b": ln.b, "up": self.network.link_usable(ln), "latency_ms": ln.latency_ms,
             "loss_prob": ln.loss_prob}
            for ln in self.network.links.values()
        ]
        return TestbedState(
            self.now, devices, links, self.network.sent, self.network.delivered, self.network.dropped,
            dict(self.network.drop_reasons),
        )

    def close(self) -> None:
        for obj in [*self.providers.values(), *self.actuators.values(), *self.adapters.values()]:
            if obj.link is not None:
                obj.link.close()


def provision(
    config: TestbedConfig, seed: int, *, force_loopback: bool = False, log_extra: dict | None = None
) -> Testbed:
    """Instantiate a config. Nothing stays open if provisioning fails."""
    config = copy.deepcopy(config)
    tb = Testbed(config, seed, log_extra)
    try:
        for spec in config.providers:
            p = dv.Provider(tb, spec)
            if spec.connector.kind == "external-tcp" and not force_loopback:
                p.link = _dial(spec.device_id, spec.connector)
            tb.providers[spec.device_id] = p
        for spec in config.actuators:
            a = dv.Actuator(tb, spec)
            tb.actuators[spec.device_id] = a
            if spec.connector.kind == "in-sim":
                tb._actuator_at[spec.connector.via_node] = a
            elif spec.connector.kind == "external-tcp" and not force_loopback:
                a.link = _dial(spec.device_id, spec.connector, lambda line, a=a: _serve_external(tb, a, line))
        for spec in config.adapters:
            ad = Adapter(spec)
            if spec.kind == "external-tcp" and not force_loopback:
                ad.link = TcpLink()
                try:
                    ad.link.listen(spec.host, spec.port)
                except OSError as exc:
                    raise ProvisionError(f"adapter {spec.device_id}: cannot bind {spec.host}:{spec.port}: {exc}") from exc
            tb.adapters[spec.device_id] = ad
    except Exception:
        tb.close()
        raise
    for node in tb.network.nodes:
        tb.network.attach_handler(node, tb._on_envelope)
    for p in tb.providers.values():
        p.start()
    return tb


def _dial(device_id: str, conn: dv.ConnectorSpec, on_frame=None) -> TcpLink:
    link = TcpLink(on_frame)
    try:
        link.connect(conn.host, conn.port)
    except OSError as exc:
        raise ProvisionError(f"device {device_id}: cannot connect to {conn.host}:{conn.port}: {exc}") from exc
    return link


def _serve_external(tb: Testbed, act: dv.Actuator, line: bytes) -> None:
    def handle() -> None:
        response = act.handle_payload(line)
        act.link.send_line(dv.encode_response(response))

    tb.scheduler.submit(handle)


def hub_dispatch(testbed: Testbed, action: HubAction) -> None:
    testbed.dispatch(action)


def monitor_snapshot(testbed: Testbed) -> TestbedState:
    return testbed.snapshot()
