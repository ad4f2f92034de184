"""Seeded discrete-event network simulator.

One virtual clock (microsecond resolution), unicast and multicast channels
with per-channel latency/jitter/loss, scripted churn and device signals, a
complete traffic log, and post-run protocol invariant checks.  A scenario
plus a seed fully determines every emitted byte.
"""
from __future__ import annotations

import heapq
import random
import shlex
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

from .classify import DomainTaxonomy, load_taxonomy
from .node import (
    ConsumerNode,
    NavigatorNode,
    Node,
    OwnedService,
    ProbeTask,
    ProtocolConfig,
    ProviderNode,
    _Membership,
)
from .registry import Availability, GroupEntry, RegistryStore, ServiceEntry
from .stanza import (
    Identifier,
    Stanza,
    StanzaKind,
    decode,
    encode,
    parse_identifier,
    render_identifier,
)


class ScenarioError(ValueError):
    """The scenario is internally inconsistent or malformed."""


@dataclass
class ChannelSpec:
    latency_ms: float = 10.0
    jitter_ms: float = 5.0
    loss: float = 0.0

    def validate(self) -> None:
        if not 0.0 <= self.loss <= 1.0:
            raise ScenarioError(f"loss {self.loss} not in [0, 1]")
        if self.latency_ms < 0 or self.jitter_ms < 0:
            raise ScenarioError("latencies must be >= 0")


@dataclass
class ChannelModel:
    default: ChannelSpec = field(default_factory=ChannelSpec)
    overrides: dict[str, ChannelSpec] = field(default_factory=dict)

    def for_route(self, route: str) -> ChannelSpec:
        return self.overrides.get(route, self.default)

    def validate(self) -> None:
        self.default.validate()
        for spec in self.overrides.values():
            spec.validate()


@dataclass
class NavigatorSpec:
    node_id: str


@dataclass
class ProviderSpec:
    node_id: str
    battery: float = 100.0
    network: float = 100.0
    hardware: int = 50
    willing: bool = True
    navigator: str | None = None
    services: list[OwnedService] = field(default_factory=list)


@dataclass
class ConsumerSpec:
    node_id: str
    navigator: str | None = None


@dataclass
class ProbeSpec:
    consumer: str
    group_id: str
    service_id: str
    period: float
    start: float = 0.0


@dataclass
class PreloadSpec:
    provider: str
    group_id: str
    count: int
    prefix: str = "entry"


@dataclass
class ScriptEvent:
    time: float
    action: str
    args: tuple


@dataclass
class Scenario:
    seed: int = 0
    duration: float = 60.0
    drain: float = 60.0
    net_id: str = "local"
    taxonomy: DomainTaxonomy = field(default_factory=DomainTaxonomy)
    channels: ChannelModel = field(default_factory=ChannelModel)
    navigators: list[NavigatorSpec] = field(default_factory=list)
    providers: list[ProviderSpec] = field(default_factory=list)
    consumers: list[ConsumerSpec] = field(default_factory=list)
    events: list[ScriptEvent] = field(default_factory=list)
    probes: list[ProbeSpec] = field(default_factory=list)
    preloads: list[PreloadSpec] = field(default_factory=list)
    config: ProtocolConfig = field(default_factory=ProtocolConfig)


class TrafficRecord(NamedTuple):
    index: int
    time_us: int
    kind: str        # send | deliver | drop
    frm: str
    to: str
    data: bytes


class MetricSample(NamedTuple):
    metric: str
    time_s: float
    node: str
    key: str
    value: object


class Verdict(NamedTuple):
    name: str
    passed: bool
    detail: str
    event_index: int | None


METRICS_HEADER = "metric,time_s,node,key,value"


@dataclass
class RunReport:
    metrics: list[MetricSample]
    traffic: list[TrafficRecord]

    def metrics_csv(self) -> bytes:
        lines = [METRICS_HEADER]
        for sample in self.metrics:
            value = sample.value
            text = f"{value:.6f}" if isinstance(value, float) else str(value)
            lines.append(
                f"{sample.metric},{sample.time_s:.6f},{sample.node},"
                f"{sample.key},{text}"
            )
        return ("\n".join(lines) + "\n").encode("utf-8")

    def traffic_log(self) -> bytes:
        lines = [
            f"{r.time_us}\t{r.kind}\t{r.frm}\t{r.to}\t{r.data.hex()}"
            for r in self.traffic
        ]
        return ("\n".join(lines) + "\n").encode("utf-8") if lines else b""


class NodeContext:
    """The only surface a node sees: clock, wire, timers, RNG, metrics."""

    def __init__(self, sim: "Simulator", node: Node):
        self._sim = sim
        self._node = node

    @property
    def now(self) -> float:
        return self._sim.now_us / 1e6

    def send(self, stanza: Stanza) -> None:
        self._sim.transmit(self._node, stanza)

    def set_timer(self, name: str, delay_s: float) -> None:
        self._sim.set_timer(self._node, name, delay_s)

    def cancel_timer(self, name: str) -> None:
        self._sim.cancel_timer(self._node, name)

    def random(self) -> float:
        return self._sim.rng.random()

    def uniform(self, low: float, high: float) -> float:
        return self._sim.rng.uniform(low, high)

    def metric(self, metric: str, key: str, value) -> None:
        self._sim.metrics.append(
            MetricSample(metric, self.now, self._node.node_id, key, value))

    def bind(self, address: str) -> None:
        self._sim.binds[address] = self._node.node_id

    def subscribe(self, channel: str) -> None:
        self._sim.subs.setdefault(channel, set()).add(self._node.node_id)

    def unsubscribe(self, channel: str) -> None:
        self._sim.subs.get(channel, set()).discard(self._node.node_id)

    def observe_probe(self, service_id: str, reported: str) -> None:
        self._sim.observe_probe(self._node, service_id, reported)


_PROVIDER_ACTIONS = {"register", "pdiscover", "presence", "update",
                     "unregister", "share"}
_CONSUMER_ACTIONS = {"discover", "binding"}


def build_synthetic_store(count: int, group_id: str, net_id: str,
                          provider: str, prefix: str = "entry") -> RegistryStore:
    """Service store filled with fixed-width synthetic entries; entry i is
    matched uniquely by the substring ``{prefix}-{i:06d}``."""
    store = RegistryStore("service")
    for i in range(count):
        store.upsert(ServiceEntry(
            service_name=f"{prefix}-{i:06d}",
            access_point=Identifier(group_id, net_id, f"x{i:06d}"),
            service_id=f"x{i:06d}",
            description=f"synthetic {prefix} number {i}",
            service_groups=[group_id],
            availability=Availability.AVAILABLE,
            provider=provider,
        ))
    return store


class Simulator:
    def __init__(self, scenario: Scenario):
        self.scenario = scenario
        self.rng = random.Random(scenario.seed)
        self.now_us = 0
        self._seq = 0
        self._heap: list[tuple[int, int, tuple]] = []
        self.traffic: list[TrafficRecord] = []
        self.metrics: list[MetricSample] = []
        self.binds: dict[str, str] = {}
        self.subs: dict[str, set[str]] = {}
        self.nodes: dict[str, Node] = {}
        self._timer_tokens: dict[tuple[str, str], int] = {}
        self._token_seq = 0
        self.bytes_sent: Counter = Counter()
        self.bytes_recv: Counter = Counter()
        self._ran = False
        self._build()

    # -- construction -------------------------------------------------------

    def _build(self) -> None:
        sc = self.scenario
        sc.channels.validate()
        try:
            sc.config.validate()
        except ValueError as exc:
            raise ScenarioError(str(exc)) from None
        default_nav = sc.navigators[0].node_id if sc.navigators else None
        for spec in sc.navigators:
            self._add_node(NavigatorNode(spec.node_id, sc.net_id, sc.config,
                                         sc.taxonomy))
        for spec in sc.providers:
            navigator = spec.navigator or default_nav
            if navigator is None:
                raise ScenarioError(
                    f"provider {spec.node_id!r} has no navigator")
            node = ProviderNode(spec.node_id, sc.net_id, sc.config,
                                spec.services, navigator, spec.willing)
            node.capability.battery_pct = spec.battery
            node.capability.network_strength = spec.network
            node.capability.hardware_score = spec.hardware
            self._add_node(node)
        for spec in sc.consumers:
            navigator = spec.navigator or default_nav
            if navigator is None:
                raise ScenarioError(
                    f"consumer {spec.node_id!r} has no navigator")
            self._add_node(ConsumerNode(spec.node_id, sc.net_id, sc.config,
                                        navigator))
        self._validate_script()
        for probe in sc.probes:
            consumer = self.nodes.get(probe.consumer)
            if not isinstance(consumer, ConsumerNode):
                raise ScenarioError(f"probe consumer {probe.consumer!r} unknown")
            consumer.probes.append(ProbeTask(probe.group_id, probe.service_id,
                                             probe.period, probe.start))
        for event in sc.events:
            self._push(int(round(event.time * 1e6)), ("script", event))

    def _add_node(self, node: Node) -> None:
        if node.node_id in self.nodes:
            raise ScenarioError(f"duplicate node id {node.node_id!r}")
        node.ctx = NodeContext(self, node)
        self.nodes[node.node_id] = node

    def _validate_script(self) -> None:
        sc = self.scenario
        for event in sc.events:
            if event.time < 0 or event.time > sc.duration:
                raise ScenarioError(
                    f"event at {event.time}s is outside the scenario "
                    f"duration {sc.duration}s")
            node = self.nodes.get(event.args[0]) if event.args else None
            if node is None:
                raise ScenarioError(
                    f"event {event.action!r} references unknown node "
                    f"{event.args[0] if event.args else '?'!r}")
            if event.action in _PROVIDER_ACTIONS and not isinstance(
                    node, ProviderNode):
                raise ScenarioError(
                    f"{event.action!r} targets non-provider {node.node_id!r}")
            if event.action in _CONSUMER_ACTIONS and not isinstance(
                    node, ConsumerNode):
                raise ScenarioError(
                    f"{event.action!r} targets non-consumer {node.node_id!r}")
            if event.action in ("register", "presence", "update",
                                "unregister"):
                key = event.args[1]
                if key not in node.services:
                    raise ScenarioError(
                        f"unknown service {key!r} on {node.node_id!r}")
            if event.action not in ("up", "down", "signal", "chaos",
                                    *_PROVIDER_ACTIONS, *_CONSUMER_ACTIONS):
                raise ScenarioError(f"unknown action {event.action!r}")
        for preload in sc.preloads:
            if not isinstance(self.nodes.get(preload.provider), ProviderNode):
                raise ScenarioError(
                    f"preload provider {preload.provider!r} unknown")

    def _push(self, time_us: int, item: tuple) -> None:
        self._seq += 1
        heapq.heappush(self._heap, (time_us, self._seq, item))

    # -- node-facing services -------------------------------------------------

    def transmit(self, node: Node, stanza: Stanza) -> None:
        data = encode(stanza)
        route = render_identifier(stanza.to)
        frm = render_identifier(stanza.from_)
        self._log("send", frm, route, data)
        self.bytes_sent[node.node_id] += len(data)
        drop_all = node.chaos_drop_next_send
        node.chaos_drop_next_send = False
        if route in self.binds:
            targets = [self.binds[route]]
        elif route in self.subs:
            targets = sorted(self.subs[route] - {node.node_id})
        else:
            targets = []
        spec = self.scenario.channels.for_route(route)
        for target in targets:
            peer = self.nodes[target]
            if not peer.up:
                continue
            if drop_all or (spec.loss > 0.0 and self.rng.random() < spec.loss):
                self._log("drop", frm,
                          render_identifier(peer.address), data)
                continue
            delay_ms = spec.latency_ms
            if spec.jitter_ms > 0.0:
                delay_ms += self.rng.uniform(0.0, spec.jitter_ms)
            self._push(self.now_us + max(int(delay_ms * 1000), 1),
                       ("deliver", target, data, frm))

    def set_timer(self, node: Node, name: str, delay_s: float) -> None:
        self._token_seq += 1
        token = self._token_seq
        self._timer_tokens[(node.node_id, name)] = token
        self._push(self.now_us + max(int(delay_s * 1e6), 0),
                   ("timer", node.node_id, name, token))

    def cancel_timer(self, node: Node, name: str) -> None:
        self._timer_tokens.pop((node.node_id, name), None)

    def observe_probe(self, node: Node, service_id: str,
                      reported: str) -> None:
        truth = "missing"
        for node_id in sorted(self.nodes):
            peer = self.nodes[node_id]
            if isinstance(peer, ProviderNode):
                for state in peer.services.values():
                    if state.service_id == service_id:
                        truth = state.availability.value
        now = self.now_us / 1e6
        self.metrics.append(MetricSample("probe_reported", now, node.node_id,
                                         service_id, reported))
        self.metrics.append(MetricSample("probe_stale", now, node.node_id,
                                         service_id,
                                         0 if reported == truth else 1))

    def _log(self, kind: str, frm: str, to: str, data: bytes) -> None:
        self.traffic.append(
            TrafficRecord(len(self.traffic), self.now_us, kind, frm, to, data))

    # -- execution -------------------------------------------------------------

    def run(self) -> RunReport:
        if self._ran:
            raise RuntimeError("simulator can only run once")
        self._ran = True
        sc = self.scenario
        for node_id in sorted(self.nodes):
            self.nodes[node_id].on_start(0.0)
        self._apply_preloads()
        end_us = int(round((sc.duration + sc.drain) * 1e6))
        while self._heap:
            time_us, _, item = heapq.heappop(self._heap)
            if time_us > end_us:
                break
            assert time_us >= self.now_us, "virtual clock moved backwards"
            self.now_us = time_us
            self._dispatch(item)
        self.now_us = max(self.now_us, end_us)
        for node_id in sorted(self.bytes_sent | self.bytes_recv):
            now = self.now_us / 1e6
            self.metrics.append(MetricSample(
                "bytes_sent", now, node_id, "", self.bytes_sent[node_id]))
            self.metrics.append(MetricSample(
                "bytes_recv", now, node_id, "", self.bytes_recv[node_id]))
        return RunReport(self.metrics, self.traffic)

    def _apply_preloads(self) -> None:
        for preload in self.scenario.preloads:
            provider = self.nodes[preload.provider]
            entry = GroupEntry(
                group_name=preload.group_id,
                group_domain="preload",
                group_description=f"{preload.prefix} services",
                registrant=preload.provider,
                group_id=preload.group_id,
                group_access_point=Identifier(preload.group_id,
                                              self.scenario.net_id),
            )
            for node_id in sorted(self.nodes):
                node = self.nodes[node_id]
                if isinstance(node, NavigatorNode):
                    node.groups.upsert(entry)
                    node.group_last_alive[preload.group_id] = 0.0
            store = build_synthetic_store(preload.count, preload.group_id,
                                          self.scenario.net_id,
                                          preload.provider, preload.prefix)
            member = _Membership(info=entry, store=store)
            provider.memberships[preload.group_id] = member
            provider.ctx.subscribe(
                render_identifier(entry.group_access_point))
            provider._become_registry(preload.group_id, 0.0)

    def _dispatch(self, item: tuple) -> None:
        kind = item[0]
        now = self.now_us / 1e6
        if kind == "deliver":
            _, target, data, frm = item
            node = self.nodes[target]
            if not node.up:
                self._log("drop", frm, render_identifier(node.address), data)
                return
            self._log("deliver", frm, render_identifier(node.address), data)
            self.bytes_recv[target] += len(data)
            node.handle_stanza(decode(data), now)
        elif kind == "timer":
            _, node_id, name, token = item
            if self._timer_tokens.get((node_id, name)) != token:
                return
            del self._timer_tokens[(node_id, name)]
            node = self.nodes[node_id]
            if node.up:
                node.handle_timer(name, now)
        elif kind == "script":
            self._run_script(item[1], now)

    def _run_script(self, event: ScriptEvent, now: float) -> None:
        node = self.nodes[event.args[0]]
        action = event.action
        if action == "down":
            if node.up:
                for key in [k for k in self._timer_tokens
                            if k[0] == node.node_id]:
                    del self._timer_tokens[key]
                node.on_down(now)
        elif action == "up":
            if not node.up:
                node.on_up(now)
        elif action == "signal":
            node.handle_device_signal(event.args[1], float(event.args[2]), now)
        elif action == "register":
            node.register_service(event.args[1])
        elif action == "discover" or action == "pdiscover":
            node.discover(event.args[1])
        elif action == "presence":
            availability = (Availability.AVAILABLE
                            if event.args[2] == "available"
                            else Availability.UNAVAILABLE)
            cause = event.args[3] if len(event.args) > 3 else "manual"
            node.set_presence(event.args[1], availability, cause)
        elif action == "update":
            node.update_service(event.args[1],
                                {event.args[2]: event.args[3]})
        elif action == "unregister":
            node.unregister_service(event.args[1])
        elif action == "share":
            node.registry_share(event.args[1], "explicit")
        elif action == "binding":
            node.request_binding(parse_identifier(event.args[1]))
        elif action == "chaos":
            if event.args[1] == "duplicate-reply":
                node.chaos_duplicate_reply = True
            elif event.args[1] == "drop-next-send":
                node.chaos_drop_next_send = True
            else:
                raise ScenarioError(f"unknown chaos kind {event.args[1]!r}")


# ---------------------------------------------------------------------------
# Invariant checking


def _decode_all(traffic: list[TrafficRecord]) -> dict[int, Stanza]:
    decoded = {}
    for record in traffic:
        decoded[record.index] = decode(record.data)
    return decoded


def assert_invariants(sim: Simulator) -> list[Verdict]:
    """Mechanized protocol invariants over the traffic log + final states."""
    decoded = _decode_all(sim.traffic)
    verdicts = [
        _check_reply_correlation(sim, decoded),
        _check_single_responder(sim, decoded),
        _check_log_completeness(sim),
        _check_election_safety(sim),
        _check_replica_convergence(sim),
    ]
    return verdicts


def _check_reply_correlation(sim: Simulator, decoded) -> Verdict:
    delivered: dict[tuple[str, str], set[str]] = {}
    replies_seen: Counter = Counter()
    for record in sim.traffic:
        stanza = decoded[record.index]
        if stanza.kind is not StanzaKind.IQ:
            continue
        if record.kind == "deliver" and stanza.type_attr in ("get", "set"):
            delivered.setdefault(
                (stanza.id, record.frm), set()).add(record.to)
        elif record.kind == "send" and stanza.type_attr in ("result", "error"):
            key = (stanza.id, record.to, record.frm)
            targets = delivered.get((stanza.id, record.to), set())
            if record.frm not in targets:
                return Verdict(
                    "reply-correlation", False,
                    f"reply id={stanza.id!r} from {record.frm} has no "
                    f"delivered request", record.index)
            replies_seen[key] += 1
            if replies_seen[key] > 1:
                return Verdict(
                    "reply-correlation", False,
                    f"duplicate reply id={stanza.id!r} from {record.frm}",
                    record.index)
    return Verdict("reply-correlation", True, "", None)


def _check_single_responder(sim: Simulator, decoded) -> Verdict:
    channel_requests: dict[tuple[str, str], int] = {}
    responders: dict[tuple[str, str], set[str]] = {}
    for record in sim.traffic:
        stanza = decoded[record.index]
        if stanza.kind is not StanzaKind.IQ:
            continue
        if (record.kind == "send" and stanza.type_attr in ("get", "set")
                and record.to in sim.subs):
            channel_requests[(stanza.id, record.frm)] = record.index
        elif record.kind == "send" and stanza.type_attr in ("result", "error"):
            key = (stanza.id, record.to)
            if key in channel_requests:
                devices = responders.setdefault(key, set())
                devices.add(record.frm)
                if len(devices) > 1:
                    return Verdict(
                        "single-responder", False,
                        f"group request id={stanza.id!r} answered by "
                        f"{sorted(devices)}", record.index)
    return Verdict("single-responder", True, "", None)


def _check_log_completeness(sim: Simulator) -> Verdict:
    sent: set[tuple[str, bytes]] = set()
    for record in sim.traffic:
        if record.kind == "send":
            sent.add((record.frm, record.data))
        elif record.kind in ("deliver", "drop"):
            if (record.frm, record.data) not in sent:
                return Verdict(
                    "log-completeness", False,
                    f"{record.kind} at {record.time_us} without a prior send",
                    record.index)
    return Verdict("log-completeness", True, "", None)


def _groups_in_play(sim: Simulator) -> dict[str, list[ProviderNode]]:
    groups: dict[str, list[ProviderNode]] = {}
    for node_id in sorted(sim.nodes):
        node = sim.nodes[node_id]
        if isinstance(node, ProviderNode):
            for group_id in node.memberships:
                groups.setdefault(group_id, []).append(node)
    return groups


def _check_election_safety(sim: Simulator) -> Verdict:
    for group_id, members in sorted(_groups_in_play(sim).items()):
        registries = [
            p.node_id for p in members
            if p.up and p.memberships[group_id].is_registry
        ]
        if len(registries) > 1:
            return Verdict(
                "election-safety", False,
                f"group {group_id!r} has registries {registries}", None)
    return Verdict("election-safety", True, "", None)


def _check_replica_convergence(sim: Simulator) -> Verdict:
    for group_id, members in sorted(_groups_in_play(sim).items()):
        registries = [p for p in members
                      if p.up and p.memberships[group_id].is_registry]
        if len(registries) != 1:
            continue
        authority = registries[0].memberships[group_id].store
        for peer in members:
            if peer is registries[0] or not peer.up:
                continue
            replica = peer.memberships[group_id].store
            if not replica.state_equal(authority):
                return Verdict(
                    "replica-convergence", False,
                    f"{peer.node_id} replica of {group_id!r} at version "
                    f"{replica.store_version} != registry version "
                    f"{authority.store_version}", None)
    return Verdict("replica-convergence", True, "", None)


# ---------------------------------------------------------------------------
# Scenario file format


def _kv(parts: list[str], context: str) -> dict[str, str]:
    result = {}
    for part in parts:
        if "=" not in part:
            raise ScenarioError(f"{context}: expected key=value, got {part!r}")
        key, _, value = part.partition("=")
        result[key] = value
    return result


def _channel_spec(kv: dict[str, str], context: str) -> ChannelSpec:
    spec = ChannelSpec()
    for key, value in kv.items():
        try:
            if key == "latency":
                spec.latency_ms = float(value)
            elif key == "jitter":
                spec.jitter_ms = float(value)
            elif key == "loss":
                spec.loss = float(value)
            else:
                raise ScenarioError(f"{context}: unknown channel field {key!r}")
        except ValueError:
            raise ScenarioError(f"{context}: bad number {value!r}") from None
    return spec


def parse_scenario(text: str, base_dir: Path | None = None) -> Scenario:
    scenario = Scenario()
    base_dir = base_dir or Path.cwd()
    providers: dict[str, ProviderSpec] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        context = f"line {lineno}"
        try:
            parts = shlex.split(line)
        except ValueError as exc:
            raise ScenarioError(f"{context}: {exc}") from None
        word, args = parts[0], parts[1:]
        if word == "seed":
            scenario.seed = int(args[0])
        elif word == "duration":
            scenario.duration = float(args[0])
        elif word == "drain":
            scenario.drain = float(args[0])
        elif word == "net":
            scenario.net_id = args[0]
        elif word == "taxonomy":
            scenario.taxonomy = load_taxonomy(base_dir / args[0])
        elif word == "config":
            for key, value in _kv(args, context).items():
                if not hasattr(scenario.config, key):
                    raise ScenarioError(
                        f"{context}: unknown config field {key!r}")
                current = getattr(scenario.config, key)
                try:
                    if isinstance(current, bool):
                        parsed = value.lower() in ("1", "true", "yes")
                    elif isinstance(current, int):
                        parsed = int(value)
                    else:
                        parsed = float(value)
                except ValueError:
                    raise ScenarioError(
                        f"{context}: bad value {value!r} for {key}") from None
                setattr(scenario.config, key, parsed)
        elif word == "channel":
            name, spec = args[0], _channel_spec(_kv(args[1:], context), context)
            if name == "default":
                scenario.channels.default = spec
            else:
                scenario.channels.overrides[name] = spec
        elif word == "navigator":
            scenario.navigators.append(NavigatorSpec(args[0]))
        elif word == "provider":
            kv = _kv(args[1:], context)
            spec = ProviderSpec(args[0])
            if "battery" in kv:
                spec.battery = float(kv["battery"])
            if "network" in kv:
                spec.network = float(kv["network"])
            if "hardware" in kv:
                spec.hardware = int(kv["hardware"])
            if "willing" in kv:
                spec.willing = kv["willing"] not in ("0", "no", "false")
            if "navigator" in kv:
                spec.navigator = kv["navigator"]
            providers[spec.node_id] = spec
            scenario.providers.append(spec)
        elif word == "service":
            if args[0] not in providers:
                raise ScenarioError(
                    f"{context}: service before provider {args[0]!r}")
            kv = _kv(args[2:], context)
            providers[args[0]].services.append(OwnedService(
                key=args[1],
                name=kv.get("name", args[1]),
                description=kv.get("description", ""),
                endpoint=kv.get("endpoint", ""),
                params=kv.get("params", ""),
                returns=kv.get("returns", ""),
                wsdl_url=kv.get("wsdl", ""),
                location=kv.get("location"),
            ))
        elif word == "consumer":
            kv = _kv(args[1:], context)
            scenario.consumers.append(
                ConsumerSpec(args[0], kv.get("navigator")))
        elif word == "probe":
            kv = _kv(args[1:], context)
            scenario.probes.append(ProbeSpec(
                consumer=args[0],
                group_id=kv["group"],
                service_id=kv["service"],
                period=float(kv["period"]),
                start=float(kv.get("start", "0")),
            ))
        elif word == "preload":
            kv = _kv(args[1:], context)
            scenario.preloads.append(PreloadSpec(
                provider=args[0],
                group_id=kv["group"],
                count=int(kv["count"]),
                prefix=kv.get("prefix", "entry"),
            ))
        elif word == "at":
            time_s = float(args[0])
            scenario.events.append(
                ScriptEvent(time_s, args[1], tuple(args[2:])))
        else:
            raise ScenarioError(f"{context}: unknown directive {word!r}")
    return scenario


def load_scenario(path: str | Path) -> Scenario:
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ScenarioError(f"cannot read scenario {path}: {exc}") from None
    return parse_scenario(text, path.parent)
