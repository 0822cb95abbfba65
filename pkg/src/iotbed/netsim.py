"""In-process virtual network: nodes, impaired links, routing, topology events."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field
from typing import Any, Callable

from iotbed.collector import CollectorLog
from iotbed.kernel import RngStream, Scheduler

NODE_KINDS = ("device", "router", "gateway", "external")
EVENT_KINDS = ("link-up", "link-down", "node-detach", "node-attach", "set-latency", "set-loss")
NETWORK_STREAM = "netsim"


class TopologyError(ValueError):
    pass


class DuplicateNodeError(TopologyError):
    pass


class DanglingLinkError(TopologyError):
    pass


class SelfLoopError(TopologyError):
    pass


class UnknownTargetError(TopologyError):
    pass


@dataclass
class NodeSpec:
    name: str
    kind: str = "device"


@dataclass
class LinkSpec:
    a: str
    b: str
    latency_ms: int = 0
    loss_prob: float = 0.0
    bandwidth_bps: int | None = None
    up: bool = True

    @property
    def key(self) -> tuple[str, str]:
        return link_key(self.a, self.b)


@dataclass
class TopologySpec:
    nodes: list[NodeSpec] = field(default_factory=list)
    links: list[LinkSpec] = field(default_factory=list)

    def validate(self) -> None:
        names: set[str] = set()
        for i, n in enumerate(self.nodes):
            if not n.name:
                raise TopologyError(f"nodes[{i}].name: must be non-empty")
            if n.name in names:
                raise DuplicateNodeError(f"nodes[{i}].name: duplicate node {n.name!r}")
            if n.kind not in NODE_KINDS:
                raise TopologyError(f"nodes[{i}].kind: {n.kind!r} is not one of {NODE_KINDS}")
            names.add(n.name)
        seen: set[tuple[str, str]] = set()
        for i, ln in enumerate(self.links):
            for end in ("a", "b"):
                if getattr(ln, end) not in names:
                    raise DanglingLinkError(f"links[{i}].{end}: unknown node {getattr(ln, end)!r}")
            if ln.a == ln.b:
                raise SelfLoopError(f"links[{i}]: self-loop on {ln.a!r}")
            if ln.key in seen:
                raise TopologyError(f"links[{i}]: duplicate link {ln.a}-{ln.b}")
            seen.add(ln.key)
            _check_latency(ln.latency_ms, f"links[{i}].latency_ms")
            _check_loss(ln.loss_prob, f"links[{i}].loss_prob")
            if ln.bandwidth_bps is not None and (
                not isinstance(ln.bandwidth_bps, int) or ln.bandwidth_bps <= 0
            ):
                raise TopologyError(f"links[{i}].bandwidth_bps: must be a positive integer")


def _check_latency(value, where: str) -> None:
    if isinstance(value, bool) or not isinstance(value, int) or value < 0:
        raise TopologyError(f"{where}: latency must be an integer >= 0, got {value!r}")


def _check_loss(value, where: str) -> None:
    if isinstance(value, bool) or not isinstance(value, (int, float)) or not 0.0 <= value <= 1.0:
        raise TopologyError(f"{where}: loss probability must be in [0, 1], got {value!r}")


def link_key(a: str, b: str) -> tuple[str, str]:
    return (a, b) if a <= b else (b, a)


@dataclass
class MessageEnvelope:
    src: str
    dst: str
    payload: bytes
    sent_at: int = 0
    size_bytes: int | None = None
    # in-process metadata, never serialized onto the wire
    meta: dict[str, Any] = field(default_factory=dict, compare=False)
    msg_id: int | None = None

    def __post_init__(self) -> None:
        if self.size_bytes is None:
            self.size_bytes = len(self.payload)
        if self.size_bytes < 0:
            raise ValueError("size_bytes must be >= 0")


@dataclass(frozen=True)
class Delivered:
    delivered_at: int
    msg_id: int


@dataclass(frozen=True)
class Dropped:
    reason: str
    msg_id: int


@dataclass
class NetworkEvent:
    kind: str
    target: str | tuple[str, str]  # node name or (a, b) link endpoints
    value: float | None = None

    def describe(self) -> dict[str, Any]:
        target = list(self.target) if isinstance(self.target, tuple) else self.target
        body: dict[str, Any] = {"kind": self.kind, "target": target}
        if self.value is not None:
            body["value"] = self.value
        return body


def shortest_route(adj: dict[str, list[str]], src: str, dst: str) -> list[str] | None:
    """Hop-count shortest path from ``src`` to ``dst``.

    Among equal-length paths the lexicographically smallest name sequence
    is chosen, read from the lexicographically smaller endpoint, so that
    ``route(b, a)`` is always the reverse of ``route(a, b)``.
    """
    if src == dst:
        return [src]
    lo, hi = (src, dst) if src < dst else (dst, src)
    dist = {hi: 0}
    frontier = deque([hi])
    while frontier:
        u = frontier.popleft()
        for v in adj[u]:
            if v not in dist:
                dist[v] = dist[u] + 1
                frontier.append(v)
    if lo not in dist:
        return None
    path = [lo]
    cur = lo
    while cur != hi:
        cur = min(v for v in adj[cur] if dist.get(v, -1) == dist[cur] - 1)
        path.append(cur)
    return path if src == lo else path[::-1]


class Network:
    """A built topology bound to a scheduler.

    Per hop a message draws one uniform from the network stream and is
    dropped when it falls below the link's loss probability; latencies
    and serialization delays add up along the path.
    """

    def __init__(
        self,
        spec: TopologySpec,
        scheduler: Scheduler | None = None,
        rng: RngStream | None = None,
        log: CollectorLog | None = None,
    ):
        spec.validate()
        self.scheduler = scheduler or Scheduler()
        self.rng = rng or RngStream.derive(0, NETWORK_STREAM)
        self.log = log
        self.nodes: dict[str, NodeSpec] = {n.name: NodeSpec(n.name, n.kind) for n in spec.nodes}
        self.links: dict[tuple[str, str], LinkSpec] = {}
        for ln in spec.links:
            copy = LinkSpec(ln.a, ln.b, ln.latency_ms, float(ln.loss_prob), ln.bandwidth_bps, ln.up)
            self.links[ln.key] = copy
        self.detached: set[str] = set()
        self.handlers: dict[str, Callable[[MessageEnvelope], None]] = {}
        self.sent = 0
        self.delivered = 0
        self.dropped = 0
        self.drop_reasons: dict[str, int] = {}
        self._next_id = 0
        self._routes: dict[tuple[str, str], list[str] | None] = {}
        self.recompute_routes()

    # topology ---------------------------------------------------------

    def link_usable(self, ln: LinkSpec) -> bool:
        return ln.up and ln.a not in self.detached and ln.b not in self.detached

    def adjacency(self) -> dict[str, list[str]]:
        adj: dict[str, list[str]] = {n: [] for n in self.nodes}
        for ln in self.links.values():
            if self.link_usable(ln):
                adj[ln.a].append(ln.b)
                adj[ln.b].append(ln.a)
        for v in adj.values():
            v.sort()
        return adj

    def recompute_routes(self) -> None:
        adj = self.adjacency()
        names = sorted(self.nodes)
        self._routes = {}
        for i, a in enumerate(names):
            for b in names[i + 1:]:
                path = shortest_route(adj, a, b)
                self._routes[(a, b)] = path
                self._routes[(b, a)] = None if path is None else path[::-1]

    def route(self, src: str, dst: str) -> list[str] | None:
        for n in (src, dst):
            if n not in self.nodes:
                raise UnknownTargetError(f"unknown node {n!r}")
        if src == dst:
            return None if src in self.detached else [src]
        return self._routes[(src, dst)]

    def link(self, a: str, b: str) -> LinkSpec:
        try:
            return self.links[link_key(a, b)]
        except KeyError:
            raise UnknownTargetError(f"unknown link {a}-{b}") from None

    def apply_event(self, ev: NetworkEvent) -> None:
        if ev.kind not in EVENT_KINDS:
            raise TopologyError(f"unknown network event kind {ev.kind!r}")
        if ev.kind in ("node-detach", "node-attach"):
            if not isinstance(ev.target, str) or ev.target not in self.nodes:
                raise UnknownTargetError(f"unknown node {ev.target!r}")
            if ev.kind == "node-detach":
                self.detached.add(ev.target)
            else:
                self.detached.discard(ev.target)
        else:
            if isinstance(ev.target, str):
                raise UnknownTargetError(f"event {ev.kind} needs a link target, got node {ev.target!r}")
            ln = self.link(*ev.target)
            if ev.kind == "link-up":
                ln.up = True
            elif ev.kind == "link-down":
                ln.up = False
            elif ev.kind == "set-latency":
                if ev.value is None or float(ev.value) != int(ev.value):
                    raise TopologyError("set-latency needs an integer value")
                _check_latency(int(ev.value), "set-latency")
                ln.latency_ms = int(ev.value)
            else:
                if ev.value is None:
                    raise TopologyError("set-loss needs a value")
                _check_loss(ev.value, "set-loss")
                ln.loss_prob = float(ev.value)
        self.recompute_routes()
        self._record("network-event", ev.describe())

    # traffic ----------------------------------------------------------

    def attach_handler(self, node: str, handler: Callable[[MessageEnvelope], None]) -> None:
        if node not in self.nodes:
            raise UnknownTargetError(f"unknown node {node!r}")
        self.handlers[node] = handler

    def _record(self, kind: str, body: dict[str, Any]) -> None:
        if self.log is not None:
            self.log.record(self.scheduler.now, kind, body)

    def send(self, env: MessageEnvelope) -> Delivered | Dropped:
        for n in (env.src, env.dst):
            if n not in self.nodes:
                raise UnknownTargetError(f"unknown node {n!r}")
        env.sent_at = self.scheduler.now
        env.msg_id = self._next_id
        self._next_id += 1
        self.sent += 1
        path = self.route(env.src, env.dst)
        self._record(
            "message-sent",
            {"id": env.msg_id, "src": env.src, "dst": env.dst, "size": env.size_bytes,
             "path": path},
        )
        if path is None:
            return self._drop(env, "unroutable")
        delay = 0
        for a, b in zip(path, path[1:]):
            ln = self.links[link_key(a, b)]
            if self.rng.uniform() < ln.loss_prob:
                return self._drop(env, "loss")
            delay += ln.latency_ms
            if ln.bandwidth_bps:
                delay += math.ceil(env.size_bytes * 8000 / ln.bandwidth_bps)
        when = env.sent_at + delay
        self.scheduler.schedule(when, lambda: self._deliver(env))
        return Delivered(when, env.msg_id)

    def _drop(self, env: MessageEnvelope, reason: str) -> Dropped:
        self.dropped += 1
        self.drop_reasons[reason] = self.drop_reasons.get(reason, 0) + 1
        self._record("message-dropped", {"id": env.msg_id, "reason": reason})
        return Dropped(reason, env.msg_id)

    def _deliver(self, env: MessageEnvelope) -> None:
        self.delivered += 1
        self._record("message-delivered", {"id": env.msg_id, "dst": env.dst})
        handler = self.handlers.get(env.dst)
        if handler is not None:
            handler(env)


def build_topology(spec: TopologySpec, **kwargs) -> Network:
    return Network(spec, **kwargs)
