"""Protocol roles: navigator, registry node, service provider, consumer.

Each node is a single-threaded state machine.  It owns its stores, never
shares memory, and interacts with the world only through its context: a
clock, stanza send, named timers, seeded randomness, and metric emission.
The simulator (or any other harness) supplies the context.

Wire vocabulary (payload child elements) defined here:

  group-query, group-lookup      -> navigator; text is the description/query
  group-entry, registry-node     <- navigator result (base64 entry + grant)
  ping / pong                    navigator liveness probe of a group channel
  service-register               -> registry node (name/description/provider/
                                    proposed-id/location children)
  service-id, access             <- registration result
  service-query                  -> registry node; attr by=name|id
  entry, total                   <- query result (base64 entries, id attr)
  registry-pull, since           -> registry node; selective update request
  change, version                <- pull result (one change record per child)
  snapshot-request               -> registry node; full sync
  snapshot-page                  <- chunked snapshot (xfer/seq/total/lineage)
  member-joined                  -> group channel on join
  registry-version               <- share push carrying the store version
  heartbeat, version, score, lineage  in registry heartbeat presence
  service                        member heartbeat reply, per-service status
  status, cause                  per-service presence payload
  candidate                      election announcement (device/score attrs)
  binding-request                -> provider (service attr)
  endpoint, params, returns, wsdl-url, error   binding reply payload
  error                          error payloads (text is the condition)
"""
from __future__ import annotations

import base64
import time
from dataclasses import dataclass, field, replace

from . import classify
from .classify import DomainTaxonomy, EmptyDescription
from .registry import (
    Availability,
    ChangeOp,
    ChangeRecord,
    GroupEntry,
    NotFound,
    Query,
    RegistryStore,
    ServiceEntry,
    VersionTooOld,
    InvariantViolation,
    restore,
)
from .stanza import (
    Child,
    Identifier,
    Stanza,
    StanzaKind,
    iq,
    message,
    presence,
    render_identifier,
)

DEVICE_GROUP = "_dev"
NAVIGATOR_CHANNEL = "_navigators"


@dataclass
class ProtocolConfig:
    """Timers and thresholds; scenario-configurable, defaults per the design."""

    heartbeat_period: float = 5.0       # T
    miss_threshold: int = 3             # k
    election_jitter_ms: float = 500.0
    election_window: float = 2.0        # W
    request_timeout: float = 2.0
    request_attempts: int = 3
    pull_period: float = 10.0
    registration_retry: float = 5.0
    battery_low_pct: float = 15.0
    network_weak_pct: float = 20.0
    load_high_pct: float = 90.0
    request_capacity_per_s: int = 100
    query_page: int = 50
    diff_page: int = 50
    snapshot_chunk: int = 30_000
    # Wall-clock lookup timing is real measurement, not simulation; it is
    # off by default so (scenario, seed) fully determines every output byte.
    measure_lookup_wall: bool = False

    def validate(self) -> None:
        if self.heartbeat_period <= 0:
            raise ValueError("heartbeat_period must be > 0")
        if self.miss_threshold < 1:
            raise ValueError("miss_threshold must be >= 1")

    @property
    def liveness_window(self) -> float:
        return self.miss_threshold * self.heartbeat_period

    @property
    def group_drop_after(self) -> float:
        # A silent group gets one full failure-detection plus election span
        # before the navigator forgets it.
        return (2 * self.liveness_window + self.election_window
                + self.election_jitter_ms / 1000.0 + 1.0)


@dataclass
class CapabilityReport:
    """Device self-assessment used to rank election candidates."""

    battery_pct: float = 100.0
    network_strength: float = 100.0
    hardware_score: int = 50
    uptime_s: float = 0.0

    def score(self) -> float:
        clamp = lambda v: min(max(v, 0.0), 100.0)
        return (
            0.4 * clamp(self.battery_pct)
            + 0.3 * clamp(self.network_strength)
            + 0.2 * clamp(float(self.hardware_score))
            + 0.1 * min(max(self.uptime_s, 0.0), 86400.0) / 864.0
        )


def wire_score(value: float) -> float:
    """Capability score as transmitted: fixed 4-decimal resolution."""
    return float(f"{value:.4f}")


def device_address(node_id: str, net_id: str) -> Identifier:
    return Identifier(DEVICE_GROUP, net_id, node_id)


def _b64(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


def _unb64(text: str) -> bytes:
    return base64.b64decode(text.encode("ascii"), validate=True)


@dataclass
class _Pending:
    stanza: Stanza
    attempts_left: int
    on_reply: object
    on_timeout: object


class Node:
    """Event-driven base: request correlation, retries, load shedding."""

    role = "node"

    def __init__(self, node_id: str, net_id: str, config: ProtocolConfig):
        self.node_id = node_id
        self.net_id = net_id
        self.config = config
        self.ctx = None  # supplied by the harness before on_start
        self.up = False
        self.up_since = 0.0
        self.capability = CapabilityReport()
        self.load_pct = 0.0
        self._seq = 0
        self._pending: dict[str, _Pending] = {}
        self._shed_second = -1
        self._shed_count = 0
        self.chaos_duplicate_reply = False
        self.chaos_drop_next_send = False

    # -- identity ---------------------------------------------------------

    @property
    def address(self) -> Identifier:
        return device_address(self.node_id, self.net_id)

    def next_id(self) -> str:
        self._seq += 1
        return f"{self.node_id}-{self._seq}"

    # -- lifecycle (called by the harness) ---------------------------------

    def on_start(self, now: float) -> None:
        self.up = True
        self.up_since = now
        self.ctx.bind(render_identifier(self.address))

    def on_up(self, now: float) -> None:
        self.up = True
        self.up_since = now
        self._pending.clear()

    def on_down(self, now: float) -> None:
        self.up = False
        self._pending.clear()

    def handle_device_signal(self, kind: str, value: float, now: float) -> None:
        if kind == "battery":
            self.capability.battery_pct = value
        elif kind == "network":
            self.capability.network_strength = value
        elif kind == "load":
            self.load_pct = value
        else:
            raise ValueError(f"unknown device signal {kind!r}")

    def current_capability(self, now: float) -> CapabilityReport:
        return replace(self.capability, uptime_s=now - self.up_since)

    # -- stanza plumbing ----------------------------------------------------

    def handle_stanza(self, stanza: Stanza, now: float) -> None:
        if self._shed(stanza, now):
            return
        pending = self._pending.get(stanza.id)
        if pending is not None and self._is_reply(stanza):
            del self._pending[stanza.id]
            self.ctx.cancel_timer(f"iq:{stanza.id}")
            if pending.on_reply is not None:
                pending.on_reply(stanza)
            return
        self.on_stanza(stanza, now)

    @staticmethod
    def _is_reply(stanza: Stanza) -> bool:
        if stanza.kind is StanzaKind.IQ:
            return stanza.type_attr in ("result", "error")
        if stanza.kind is StanzaKind.MESSAGE:
            # binding replies correlate by id; they carry no binding-request
            return (stanza.type_attr == "binding"
                    and stanza.child("binding-request") is None)
        return False

    def _shed(self, stanza: Stanza, now: float) -> bool:
        if stanza.kind is not StanzaKind.IQ or stanza.type_attr not in ("get", "set"):
            return False
        second = int(now)
        if second != self._shed_second:
            self._shed_second = second
            self._shed_count = 0
        self._shed_count += 1
        if self._shed_count > self.config.request_capacity_per_s:
            self.ctx.metric("shed", stanza.type_attr, 1)
            return True
        return False

    def on_stanza(self, stanza: Stanza, now: float) -> None:
        pass

    def handle_timer(self, name: str, now: float) -> None:
        if name.startswith("iq:"):
            self._request_timed_out(name[3:], now)
            return
        self.on_timer(name, now)

    def on_timer(self, name: str, now: float) -> None:
        pass

    # -- requests with retries ---------------------------------------------

    def send_request(self, stanza: Stanza, on_reply=None, on_timeout=None,
                     attempts: int | None = None) -> None:
        attempts = attempts if attempts is not None else self.config.request_attempts
        self._pending[stanza.id] = _Pending(stanza, attempts - 1, on_reply,
                                            on_timeout)
        self.ctx.send(stanza)
        self.ctx.set_timer(f"iq:{stanza.id}", self.config.request_timeout)

    def send_iq(self, type_attr: str, to: Identifier, payload, on_reply=None,
                on_timeout=None, attempts: int | None = None) -> None:
        self.send_request(
            iq(self.next_id(), type_attr, to, self.address, payload),
            on_reply, on_timeout, attempts,
        )

    def _request_timed_out(self, stanza_id: str, now: float) -> None:
        pending = self._pending.pop(stanza_id, None)
        if pending is None:
            return
        if pending.attempts_left > 0:
            # A fresh id per retry keeps every (id, responder) pair unique.
            retry = replace(pending.stanza, id=self.next_id())
            self._pending[retry.id] = _Pending(
                retry, pending.attempts_left - 1,
                pending.on_reply, pending.on_timeout,
            )
            self.ctx.send(retry)
            self.ctx.set_timer(f"iq:{retry.id}", self.config.request_timeout)
        elif pending.on_timeout is not None:
            pending.on_timeout()

    def reply_to(self, request: Stanza, type_attr: str, payload) -> None:
        reply = iq(request.id, type_attr, request.from_, self.address, payload)
        self.ctx.send(reply)
        if self.chaos_duplicate_reply:
            self.chaos_duplicate_reply = False
            self.ctx.send(replace(reply, payload=list(reply.payload)))

    def reply_error(self, request: Stanza, condition: str) -> None:
        self.reply_to(request, "error", [Child("error", condition)])


# ---------------------------------------------------------------------------
# Navigator


class NavigatorNode(Node):
    """Entry point: holds the group registry, classifies and routes."""

    role = "navigator"

    def __init__(self, node_id: str, net_id: str, config: ProtocolConfig,
                 taxonomy: DomainTaxonomy):
        super().__init__(node_id, net_id, config)
        self.taxonomy = taxonomy
        self.groups = RegistryStore("group")
        self.group_last_alive: dict[str, float] = {}

    @property
    def shared_channel(self) -> Identifier:
        return Identifier(NAVIGATOR_CHANNEL, self.net_id)

    def on_start(self, now: float) -> None:
        super().on_start(now)
        self.ctx.subscribe(render_identifier(self.shared_channel))
        self.ctx.set_timer("group-ping", self.config.heartbeat_period)

    def on_up(self, now: float) -> None:
        super().on_up(now)
        self.ctx.set_timer("group-ping", self.config.heartbeat_period)

    def on_stanza(self, stanza: Stanza, now: float) -> None:
        if stanza.kind is StanzaKind.IQ and stanza.type_attr == "get":
            if stanza.child("group-query") is not None:
                self.handle_group_query(stanza, now)
            elif stanza.child("group-lookup") is not None:
                self.handle_group_lookup(stanza, now)
        elif stanza.kind is StanzaKind.MESSAGE and stanza.type_attr == "push":
            shared = stanza.child("group-entry")
            if shared is not None:
                self._absorb_shared_group(shared, now)

    def _group_reply(self, entry: GroupEntry, grant: bool) -> list[Child]:
        return [
            Child("group-entry", _b64(entry.to_element())),
            Child("registry-node", "yes" if grant else "no"),
        ]

    def handle_group_query(self, request: Stanza, now: float) -> None:
        """Registration path: match the description or found a new group."""
        query = request.child("group-query")
        description = query.text.strip() if query is not None else ""
        if not description:
            self.reply_error(request, "bad-request")
            return
        result = classify.match_group(self.taxonomy, description)
        if result.best_group is not None:
            group_id = result.best_group
            domain = self.taxonomy.groups[group_id].domain
        else:
            try:
                existing = set(self.groups.entries) | set(self.taxonomy.groups)
                group_id = classify.propose_group_id(description, existing)
            except EmptyDescription:
                self.reply_error(request, "bad-request")
                return
            domain = ""
        entry = self.groups.get(group_id)
        if entry is not None:
            self.reply_to(request, "result", self._group_reply(entry, False))
            return
        registrant = request.from_.service_id or request.from_.group_id
        entry = GroupEntry(
            group_name=group_id,
            group_domain=domain,
            group_description=description,
            registrant=registrant,
            group_id=group_id,
            group_access_point=Identifier(group_id, self.net_id),
        )
        self.groups.upsert(entry)
        self.group_last_alive[group_id] = now
        self._learn_group_terms(group_id, domain, description)
        stored = self.groups.get(group_id)
        self.ctx.send(message(
            self.next_id(), "push", self.shared_channel, self.address,
            [Child("group-entry", _b64(stored.to_element()))],
        ))
        self.reply_to(request, "result", self._group_reply(stored, True))

    def _learn_group_terms(self, group_id: str, domain: str,
                           description: str) -> None:
        """Founding a group extends the classification taxonomy, so later
        descriptions in the same vein map to it instead of splintering."""
        if group_id in self.taxonomy.groups:
            return
        terms = frozenset(sorted(classify.tokenize(description))[:12])
        if not terms:
            return
        groups = dict(self.taxonomy.groups)
        groups[group_id] = classify.GroupTerms(domain, terms)
        self.taxonomy = DomainTaxonomy(groups, self.taxonomy.threshold)

    def handle_group_lookup(self, request: Stanza, now: float) -> None:
        """Discovery path: read-only group resolution."""
        query = request.child("group-lookup")
        text = query.text.strip() if query is not None else ""
        if not text:
            self.reply_error(request, "bad-request")
            return
        result = classify.match_group(self.taxonomy, text)
        if result.best_group is not None:
            entry = self.groups.get(result.best_group)
            if entry is not None:
                self.reply_to(request, "result", self._group_reply(entry, False))
                return
        needle = text.lower()
        hits = self.groups.lookup(Query.by_name(text))
        if not hits:
            hits = [
                e for e in self.groups.lookup(Query.by_id(needle))
            ] or [
                e for gid, e in sorted(self.groups.entries.items())
                if needle in gid or needle in e.group_domain.lower()
            ]
        if hits:
            self.reply_to(request, "result", self._group_reply(hits[0], False))
        else:
            self.reply_error(request, "item-not-found")

    def _absorb_shared_group(self, shared: Child, now: float) -> None:
        try:
            entry = GroupEntry.from_element(_unb64(shared.text))
        except Exception:
            return
        if self.groups.get(entry.group_id) is None:
            self.groups.upsert(entry)
            self.group_last_alive[entry.group_id] = now
            self._learn_group_terms(entry.group_id, entry.group_domain,
                                    entry.group_description)

    def on_timer(self, name: str, now: float) -> None:
        if name != "group-ping":
            return
        for group_id in sorted(self.groups.entries):
            alive = self.group_last_alive.get(group_id, now)
            if now - alive > self.config.group_drop_after:
                self.groups.remove(group_id)
                self.group_last_alive.pop(group_id, None)
                self.ctx.metric("group_dropped", group_id, now)
                continue
            entry = self.groups.entries[group_id]
            self.send_iq(
                "get", entry.group_access_point, [Child("ping", self.node_id)],
                on_reply=lambda s, g=group_id: self._pong(g),
                on_timeout=None, attempts=1,
            )
        self.ctx.set_timer("group-ping", self.config.heartbeat_period)

    def _pong(self, group_id: str) -> None:
        if group_id in self.groups.entries:
            self.group_last_alive[group_id] = self.ctx.now


# ---------------------------------------------------------------------------
# Provider (member and registry-node roles)


@dataclass
class OwnedService:
    key: str                     # scenario handle, doubles as the proposed id
    name: str
    description: str
    endpoint: str = ""
    params: str = ""
    returns: str = ""
    wsdl_url: str = ""
    location: str | None = None


@dataclass
class _ServiceState:
    spec: OwnedService
    availability: Availability = Availability.AVAILABLE
    auto_cause: str | None = None
    group_id: str | None = None
    service_id: str | None = None
    registered: bool = False
    propose: bool = True
    wanted: bool = False
    in_flight: bool = False
    intent_started: float | None = None


@dataclass
class _MemberInfo:
    last_seen: float
    marked_down: bool = False


@dataclass
class _Election:
    candidates: dict[str, float] = field(default_factory=dict)
    window_open: float | None = None
    announced: bool = False
    started: float = 0.0


@dataclass
class _Membership:
    info: GroupEntry
    store: RegistryStore
    is_registry: bool = False
    lineage: str | None = None           # registry role: my lineage token
    store_lineage: str | None = None     # member role: lineage replica follows
    registry_device: str | None = None
    advertised_version: int = 0
    last_heartbeat: float = float("-inf")
    members: dict[str, _MemberInfo] = field(default_factory=dict)
    election: _Election | None = None
    needs_full_sync: bool = True
    pull_inflight: bool = False
    snapshot_deadline: float = 0.0
    snapshot_parts: dict[str, dict] = field(default_factory=dict)
    xfer_seq: int = 0


@dataclass
class DiscoveryOutcome:
    query: str
    started: float
    finished: float | None = None
    status: str = "pending"              # ok | no-navigator | no-registry
    entries: list[ServiceEntry] = field(default_factory=list)


class ProviderNode(Node):
    """Hosts services; replicates its groups' registries; may act as the
    registry node of a group."""

    role = "provider"

    def __init__(self, node_id: str, net_id: str, config: ProtocolConfig,
                 services: list[OwnedService], navigator_id: str,
                 willing: bool = True):
        super().__init__(node_id, net_id, config)
        self.willing = willing
        self.navigator_id = navigator_id
        # Copies: updates mutate the spec, and the caller's scenario objects
        # must stay reusable.
        self.services: dict[str, _ServiceState] = {
            s.key: _ServiceState(spec=replace(s)) for s in services
        }
        self.memberships: dict[str, _Membership] = {}
        self.discoveries: list[DiscoveryOutcome] = []

    @property
    def navigator_address(self) -> Identifier:
        return device_address(self.navigator_id, self.net_id)

    def _channel(self, group_id: str) -> Identifier:
        return Identifier(group_id, self.net_id)

    def _service_address(self, group_id: str, service_id: str) -> Identifier:
        return Identifier(group_id, self.net_id, service_id)

    # -- lifecycle ----------------------------------------------------------

    def on_up(self, now: float) -> None:
        super().on_up(now)
        for group_id in sorted(self.memberships):
            member = self.memberships[group_id]
            if member.is_registry:
                # A failed registry node re-enters as a plain provider.
                member.is_registry = False
            member.election = None
            member.pull_inflight = False
            member.needs_full_sync = True
            member.snapshot_parts.clear()
            member.last_heartbeat = now
            self._announce_join(group_id, now)
            self.ctx.set_timer(f"liveness:{group_id}",
                               self.config.liveness_window)
            self.ctx.set_timer(f"pull:{group_id}", self.config.pull_period)
        for state in self._sorted_services():
            if state.registered and state.group_id in self.memberships:
                self.set_presence(state.spec.key, state.availability, "manual")
        if any(s.wanted and not s.registered for s in self.services.values()):
            self.ctx.set_timer("retry-reg", self.config.registration_retry)

    def _sorted_services(self) -> list[_ServiceState]:
        return [self.services[k] for k in sorted(self.services)]

    # -- registration path --------------------------------------------------

    def register_service(self, key: str) -> None:
        state = self.services[key]
        state.wanted = True
        if state.registered or state.in_flight:
            return
        if state.intent_started is None:
            state.intent_started = self.ctx.now
        state.in_flight = True
        self.send_iq(
            "get", self.navigator_address,
            [Child("group-query", state.spec.description)],
            on_reply=lambda s, k=key: self._on_group_result(k, s),
            on_timeout=lambda k=key: self._registration_failed(k),
        )

    def _registration_failed(self, key: str) -> None:
        state = self.services[key]
        state.in_flight = False
        self.ctx.metric("reg_retry", key, 1)
        self.ctx.set_timer("retry-reg", self.config.registration_retry)

    def _on_group_result(self, key: str, reply: Stanza) -> None:
        state = self.services[key]
        if reply.type_attr == "error":
            self._registration_failed(key)
            return
        shared = reply.child("group-entry")
        grant_child = reply.child("registry-node")
        try:
            entry = GroupEntry.from_element(_unb64(shared.text))
        except Exception:
            self._registration_failed(key)
            return
        grant = grant_child is not None and grant_child.text == "yes"
        member = self.memberships.get(entry.group_id)
        if member is None:
            member = self._join_group(entry, self.ctx.now)
        if grant and not member.is_registry:
            self._become_registry(entry.group_id, self.ctx.now)
        state.group_id = entry.group_id
        if member.is_registry:
            self._self_register(key)
        else:
            self._send_service_register(key, entry.group_id)

    def _join_group(self, entry: GroupEntry, now: float) -> _Membership:
        member = _Membership(info=entry, store=RegistryStore("service"))
        self.memberships[entry.group_id] = member
        self.ctx.subscribe(render_identifier(entry.group_access_point))
        self._announce_join(entry.group_id, now)
        self.ctx.set_timer(f"liveness:{entry.group_id}",
                           self.config.liveness_window)
        self.ctx.set_timer(f"pull:{entry.group_id}", self.config.pull_period)
        return member

    def _announce_join(self, group_id: str, now: float) -> None:
        self.ctx.send(message(
            self.next_id(), "push", self._channel(group_id), self.address,
            [Child("member-joined", self.node_id)],
        ))

    def _send_service_register(self, key: str, group_id: str) -> None:
        state = self.services[key]
        spec = state.spec
        payload = [
            Child("service-register", ""),
            Child("name", spec.name),
            Child("description", spec.description),
            Child("provider", self.node_id),
        ]
        if state.propose:
            payload.append(Child("proposed-id", spec.key))
        if spec.location is not None:
            payload.append(Child("location", spec.location))
        self.send_iq(
            "set", self._channel(group_id), payload,
            on_reply=lambda s, k=key, g=group_id: self._on_register_reply(k, g, s),
            on_timeout=lambda k=key: self._registration_failed(k),
        )

    def _on_register_reply(self, key: str, group_id: str, reply: Stanza) -> None:
        state = self.services[key]
        if reply.type_attr == "error":
            error = reply.child("error")
            condition = error.text if error is not None else ""
            if condition == "conflict":
                state.propose = False
                self._send_service_register(key, group_id)
            else:
                self._registration_failed(key)
            return
        sid = reply.child("service-id")
        if sid is None:
            self._registration_failed(key)
            return
        self._complete_registration(key, group_id, sid.text)

    def _complete_registration(self, key: str, group_id: str,
                               service_id: str) -> None:
        state = self.services[key]
        state.registered = True
        state.in_flight = False
        state.group_id = group_id
        state.service_id = service_id
        self.ctx.bind(render_identifier(
            self._service_address(group_id, service_id)))
        if state.intent_started is not None:
            self.ctx.metric("reg_latency_s", key,
                            self.ctx.now - state.intent_started)
            state.intent_started = None

    def _self_register(self, key: str) -> None:
        state = self.services[key]
        group_id = state.group_id
        member = self.memberships[group_id]
        store = member.store
        sid = state.spec.key if state.propose else None
        if sid is None or (sid in store.entries
                           and store.entries[sid].provider != self.node_id):
            sid = self._fresh_service_id(store)
        store.upsert(self._make_entry(state, group_id, sid))
        self._complete_registration(key, group_id, sid)

    def _fresh_service_id(self, store: RegistryStore) -> str:
        sid = f"s{store.store_version + 1}"
        suffix = 2
        while sid in store.entries:
            sid = f"s{store.store_version + 1}-{suffix}"
            suffix += 1
        return sid

    def _make_entry(self, state: _ServiceState, group_id: str,
                    service_id: str) -> ServiceEntry:
        spec = state.spec
        return ServiceEntry(
            service_name=spec.name,
            access_point=self._service_address(group_id, service_id),
            service_id=service_id,
            description=spec.description,
            service_groups=[group_id],
            availability=state.availability,
            location=spec.location,
            provider=self.node_id,
        )

    # -- stanza dispatch ----------------------------------------------------

    def on_stanza(self, stanza: Stanza, now: float) -> None:
        group_id = self._stanza_group(stanza)
        if stanza.kind is StanzaKind.IQ:
            if group_id is not None:
                member = self.memberships.get(group_id)
                if member is not None and member.is_registry:
                    self._registry_iq(member, stanza, now)
            return
        if stanza.kind is StanzaKind.PRESENCE:
            self._on_presence(stanza, group_id, now)
            return
        if stanza.kind is StanzaKind.MESSAGE:
            if stanza.type_attr == "binding":
                self._on_binding_request(stanza, now)
            elif stanza.type_attr == "election" and group_id is not None:
                self._on_election_message(stanza, group_id, now)
            elif stanza.type_attr == "push":
                self._on_push(stanza, group_id, now)

    def _stanza_group(self, stanza: Stanza) -> str | None:
        """Group a stanza concerns: its channel, the sender's group, or an
        explicit group reference in the payload (unicast requests)."""
        if stanza.to.group_id in self.memberships:
            return stanza.to.group_id
        if stanza.from_.group_id in self.memberships:
            return stanza.from_.group_id
        for name in ("registry-pull", "snapshot-request", "group"):
            child = stanza.child(name)
            if child is not None and child.text in self.memberships:
                return child.text
        return None

    # -- registry-node request handling --------------------------------------

    def _registry_iq(self, member: _Membership, stanza: Stanza,
                     now: float) -> None:
        if stanza.type_attr == "get":
            if stanza.child("ping") is not None:
                self.reply_to(stanza, "result", [Child("pong", self.node_id)])
            elif stanza.child("service-query") is not None:
                self._handle_service_query(member, stanza)
            elif stanza.child("registry-pull") is not None:
                self._handle_registry_pull(member, stanza)
            elif stanza.child("snapshot-request") is not None:
                xfer = self._send_snapshot(member, stanza.from_)
                self.reply_to(stanza, "result", [Child("xfer", xfer)])
        elif stanza.type_attr == "set":
            if stanza.child("service-register") is not None:
                self.handle_service_register(member, stanza, now)
            elif stanza.child("service-update") is not None:
                self._handle_service_update(member, stanza)
            elif stanza.child("service-unregister") is not None:
                self._handle_service_unregister(member, stanza)

    def handle_service_register(self, member: _Membership, request: Stanza,
                                now: float) -> None:
        fields = {c.name: c.text for c in request.payload}
        if not all(fields.get(k) for k in ("name", "description", "provider")):
            self.reply_error(request, "bad-request")
            return
        provider = fields["provider"]
        self._member_seen(member, provider, now)
        store = member.store
        for entry in store.entries.values():
            if (entry.provider == provider
                    and entry.service_name == fields["name"]):
                # Lost result retransmit: registration is idempotent.
                self._reply_registered(request, entry)
                return
        proposed = fields.get("proposed-id")
        if proposed:
            if proposed in store.entries:
                self.reply_error(request, "conflict")
                return
            service_id = proposed
        else:
            service_id = self._fresh_service_id(store)
        group_id = member.info.group_id
        entry = ServiceEntry(
            service_name=fields["name"],
            access_point=self._service_address(group_id, service_id),
            service_id=service_id,
            description=fields["description"],
            service_groups=[group_id],
            availability=Availability.AVAILABLE,
            location=fields.get("location"),
            provider=provider,
        )
        store.upsert(entry)
        self._reply_registered(request, store.entries[service_id])

    def _reply_registered(self, request: Stanza, entry: ServiceEntry) -> None:
        self.reply_to(request, "result", [
            Child("service-id", entry.service_id),
            Child("access", render_identifier(entry.access_point)),
        ])

    def _handle_service_query(self, member: _Membership,
                              request: Stanza) -> None:
        query = request.child("service-query")
        by = query.attrs.get("by", "name")
        wall_start = time.perf_counter()
        if by == "id":
            hits = member.store.lookup(Query.by_id(query.text))
        else:
            hits = member.store.lookup(Query.by_name(query.text))
        if self.config.measure_lookup_wall:
            self.ctx.metric("lookup_wall_s", member.info.group_id,
                            time.perf_counter() - wall_start)
        page = hits[: self.config.query_page]
        payload = [Child("entry", _b64(e.to_element()), {"id": e.service_id})
                   for e in page]
        payload.append(Child("total", str(len(hits))))
        self.reply_to(request, "result", payload)

    def _handle_registry_pull(self, member: _Membership,
                              request: Stanza) -> None:
        since_child = request.child("since")
        try:
            since = int(since_child.text) if since_child is not None else 0
        except ValueError:
            self.reply_error(request, "bad-request")
            return
        try:
            records = member.store.diff_since(since, self.config.diff_page)
        except (VersionTooOld, InvariantViolation):
            self.reply_error(request, "version-too-old")
            return
        payload = []
        for record in records:
            attrs = {
                "version": str(record.version),
                "op": record.op.value,
                "id": record.entry_id,
            }
            text = _b64(record.entry.to_element()) if record.entry else ""
            payload.append(Child("change", text, attrs))
        payload.append(Child("version", str(member.store.store_version)))
        payload.append(Child("lineage", member.lineage or ""))
        self.reply_to(request, "result", payload)

    def _handle_service_update(self, member: _Membership,
                               request: Stanza) -> None:
        marker = request.child("service-update")
        service_id = marker.attrs.get("service", "")
        entry = member.store.get(service_id)
        if entry is None:
            self.reply_error(request, "item-not-found")
            return
        for child in request.payload:
            if child.name == "location":
                entry.location = child.text
            elif child.name == "description":
                entry.description = child.text
            elif child.name == "name":
                entry.service_name = child.text
            elif child.name == "info":
                entry.other_info[child.attrs["key"]] = child.text
        member.store.upsert(entry)
        self.reply_to(request, "result",
                      [Child("version", str(member.store.store_version))])

    def _handle_service_unregister(self, member: _Membership,
                                   request: Stanza) -> None:
        marker = request.child("service-unregister")
        service_id = marker.attrs.get("service", "")
        try:
            member.store.remove(service_id)
        except NotFound:
            self.reply_error(request, "item-not-found")
            return
        self.reply_to(request, "result",
                      [Child("version", str(member.store.store_version))])

    # -- registry sharing -----------------------------------------------------

    def registry_share(self, group_id: str, trigger: str,
                       joiner: str | None = None) -> None:
        """member_joined -> snapshot to the joiner; timer/explicit -> push
        the current version so stale members pull."""
        member = self.memberships[group_id]
        if not member.is_registry:
            return
        if trigger == "member_joined" and joiner is not None:
            self._send_snapshot(member, device_address(joiner, self.net_id))
            return
        self.ctx.send(message(
            self.next_id(), "push", self._channel(group_id), self.address,
            [Child("registry-version", str(member.store.store_version)),
             Child("lineage", member.lineage or "")],
        ))

    def _send_snapshot(self, member: _Membership, to: Identifier) -> str:
        data = member.store.snapshot()
        chunk = self.config.snapshot_chunk
        parts = [data[i:i + chunk] for i in range(0, len(data), chunk)] or [b""]
        member.xfer_seq += 1
        xfer = f"{self.node_id}-x{member.xfer_seq}"
        for seq, part in enumerate(parts):
            self.ctx.send(message(
                self.next_id(), "push", to, self.address,
                [Child("snapshot-page", _b64(part), {
                    "xfer": xfer,
                    "seq": str(seq),
                    "total": str(len(parts)),
                    "lineage": member.lineage or "",
                    "group": member.info.group_id,
                })],
            ))
        return xfer

    # -- member-side push / presence handling ---------------------------------

    def _on_push(self, stanza: Stanza, group_id: str | None,
                 now: float) -> None:
        joined = stanza.child("member-joined")
        if joined is not None and group_id is not None:
            member = self.memberships.get(group_id)
            if member is not None and member.is_registry:
                self._member_seen(member, joined.text, now)
                self.registry_share(group_id, "member_joined", joined.text)
            return
        page = stanza.child("snapshot-page")
        if page is not None:
            self._on_snapshot_page(page, now)
            return
        version = stanza.child("registry-version")
        if version is not None and group_id is not None:
            member = self.memberships.get(group_id)
            if member is None or member.is_registry:
                return
            try:
                member.advertised_version = max(
                    member.advertised_version, int(version.text))
            except ValueError:
                return
            lineage = stanza.child("lineage")
            self._maybe_sync(group_id, member,
                             lineage.text if lineage is not None else None)

    def _on_snapshot_page(self, page: Child, now: float) -> None:
        group_id = page.attrs.get("group", "")
        member = self.memberships.get(group_id)
        if member is None or member.is_registry:
            return
        xfer = page.attrs.get("xfer", "")
        try:
            seq = int(page.attrs.get("seq", ""))
            total = int(page.attrs.get("total", ""))
            data = _unb64(page.text)
        except ValueError:
            return
        buf = member.snapshot_parts.setdefault(
            xfer, {"total": total, "lineage": page.attrs.get("lineage", ""),
                   "parts": {}})
        buf["parts"][seq] = data
        if len(buf["parts"]) < buf["total"]:
            return
        blob = b"".join(buf["parts"][i] for i in range(buf["total"]))
        member.snapshot_parts.clear()
        try:
            fresh = restore(blob)
        except Exception:
            return
        if fresh.kind != "service":
            return
        member.store = fresh
        member.store_lineage = buf["lineage"] or None
        member.needs_full_sync = False
        member.advertised_version = max(member.advertised_version,
                                        fresh.store_version)
        self.ctx.metric("replica_synced", group_id, fresh.store_version)
        self._verify_own_entries(group_id, member)

    def _on_presence(self, stanza: Stanza, group_id: str | None,
                     now: float) -> None:
        if group_id is None:
            return
        member = self.memberships.get(group_id)
        if member is None:
            return
        heartbeat = stanza.child("heartbeat")
        if heartbeat is not None:
            self._on_heartbeat(member, group_id, stanza, heartbeat.text, now)
            return
        if member.is_registry:
            self._registry_observe_presence(member, stanza, now)

    def _registry_observe_presence(self, member: _Membership, stanza: Stanza,
                                   now: float) -> None:
        if stanza.child("group") is not None or stanza.children("service"):
            # Heartbeat reply: sender device plus one child per hosted service.
            device = stanza.from_.service_id or ""
            self._member_seen(member, device, now)
            for child in stanza.children("service"):
                self._apply_availability(member, child.attrs.get("id", ""),
                                         child.text)
            return
        if stanza.from_.service_id is not None:
            entry = member.store.entries.get(stanza.from_.service_id)
            if entry is not None:
                self._member_seen(member, entry.provider, now)
            status = stanza.child("status")
            value = status.text if status is not None else (
                Availability.AVAILABLE.value
                if stanza.type_attr == "available"
                else Availability.UNAVAILABLE.value)
            self._apply_availability(member, stanza.from_.service_id, value)

    def _apply_availability(self, member: _Membership, service_id: str,
                            value: str) -> None:
        entry = member.store.entries.get(service_id)
        if entry is None:
            return
        try:
            availability = Availability(value)
        except ValueError:
            return
        if entry.availability is not availability:
            fresh = entry.copy()
            fresh.availability = availability
            member.store.upsert(fresh)

    def _member_seen(self, member: _Membership, device: str,
                     now: float) -> None:
        if not device or device == self.node_id:
            return
        info = member.members.get(device)
        if info is None:
            member.members[device] = _MemberInfo(last_seen=now)
            return
        info.last_seen = now
        if info.marked_down:
            info.marked_down = False

    def _on_heartbeat(self, member: _Membership, group_id: str,
                      stanza: Stanza, device: str, now: float) -> None:
        version_child = stanza.child("version")
        score_child = stanza.child("score")
        lineage_child = stanza.child("lineage")
        try:
            version = int(version_child.text) if version_child else 0
            score = float(score_child.text) if score_child else 0.0
        except ValueError:
            return
        lineage = lineage_child.text if lineage_child is not None else None
        if member.is_registry:
            if device == self.node_id:
                return
            # Deterministic demotion: the max-capability rule, smallest id
            # breaking ties, applied on first contact between two registries.
            mine = wire_score(self.current_capability(now).score())
            they_win = score > mine or (score == mine and device < self.node_id)
            if not they_win:
                self._send_heartbeat(group_id, member, now)
                return
            member.is_registry = False
            self.ctx.cancel_timer(f"hb:{group_id}")
            member.needs_full_sync = True
            self.ctx.set_timer(f"pull:{group_id}", 0.0)
        member.registry_device = device
        member.last_heartbeat = now
        member.advertised_version = max(member.advertised_version, version)
        member.election = None
        self.ctx.cancel_timer(f"elect-announce:{group_id}")
        self.ctx.cancel_timer(f"elect-close:{group_id}")
        self.ctx.set_timer(f"liveness:{group_id}", self.config.liveness_window)
        self._reply_heartbeat(member, group_id, device)
        self._maybe_sync(group_id, member, lineage)

    def _reply_heartbeat(self, member: _Membership, group_id: str,
                         registry_device: str) -> None:
        payload = [Child("group", group_id)]
        for state in self._sorted_services():
            if state.registered and state.group_id == group_id:
                payload.append(Child("service", state.availability.value,
                                     {"id": state.service_id}))
        self.ctx.send(presence(
            self.next_id(), "available",
            device_address(registry_device, self.net_id), self.address,
            payload,
        ))

    def _maybe_sync(self, group_id: str, member: _Membership,
                    lineage: str | None) -> None:
        if member.is_registry:
            return
        if lineage is not None and lineage != (member.store_lineage or ""):
            member.needs_full_sync = True
        if member.advertised_version < member.store.store_version:
            member.needs_full_sync = True
        if member.needs_full_sync:
            self._request_snapshot(group_id, member)
        elif member.advertised_version > member.store.store_version:
            self._pull(group_id, member)

    def _request_snapshot(self, group_id: str, member: _Membership) -> None:
        if member.registry_device is None:
            return
        if self.ctx.now < member.snapshot_deadline:
            return
        member.snapshot_deadline = self.ctx.now + 3 * self.config.request_timeout
        self.send_iq(
            "get", device_address(member.registry_device, self.net_id),
            [Child("snapshot-request", group_id)],
            attempts=1,
        )

    def _pull(self, group_id: str, member: _Membership) -> None:
        if member.pull_inflight or member.registry_device is None:
            return
        member.pull_inflight = True
        self.send_iq(
            "get", device_address(member.registry_device, self.net_id),
            [Child("registry-pull", group_id),
             Child("since", str(member.store.store_version))],
            on_reply=lambda s, g=group_id: self._on_pull_reply(g, s),
            on_timeout=lambda g=group_id: self._pull_failed(g),
            attempts=1,
        )

    def _pull_failed(self, group_id: str) -> None:
        member = self.memberships.get(group_id)
        if member is not None:
            member.pull_inflight = False

    def _on_pull_reply(self, group_id: str, reply: Stanza) -> None:
        member = self.memberships.get(group_id)
        if member is None:
            return
        member.pull_inflight = False
        if member.is_registry:
            return
        if reply.type_attr == "error":
            member.needs_full_sync = True
            self._request_snapshot(group_id, member)
            return
        lineage = reply.child("lineage")
        if (lineage is not None
                and lineage.text != (member.store_lineage or "")
                and member.store_lineage is not None):
            member.needs_full_sync = True
            self._request_snapshot(group_id, member)
            return
        changes = reply.children("change")
        applied = 0
        for child in sorted(changes, key=lambda c: int(c.attrs["version"])):
            version = int(child.attrs["version"])
            if version != member.store.store_version + 1:
                continue
            op = ChangeOp(child.attrs["op"])
            entry = None
            if op is ChangeOp.UPSERT:
                try:
                    entry = ServiceEntry.from_element(_unb64(child.text))
                except Exception:
                    continue
            member.store.apply_change(
                ChangeRecord(version, child.attrs["id"], op, entry))
            applied += 1
        if applied:
            self.ctx.metric("pull_records", group_id, applied)
        version_child = reply.child("version")
        if version_child is not None:
            try:
                member.advertised_version = max(member.advertised_version,
                                                int(version_child.text))
            except ValueError:
                pass
        if member.advertised_version > member.store.store_version:
            self._pull(group_id, member)
        else:
            self._verify_own_entries(group_id, member)

    def _verify_own_entries(self, group_id: str, member: _Membership) -> None:
        """A fully synced replica must contain every service this provider
        registered; an absence means a failover lost the entry."""
        if member.is_registry or member.needs_full_sync:
            return
        if member.store.store_version < member.advertised_version:
            return
        for state in self._sorted_services():
            if (state.registered and state.group_id == group_id
                    and state.service_id not in member.store.entries):
                state.registered = False
                state.in_flight = False
                state.propose = True
                self.ctx.metric("reregister", state.spec.key, 1)
                self.register_service(state.spec.key)

    # -- heartbeats, elections -------------------------------------------------

    def on_timer(self, name: str, now: float) -> None:
        kind, _, group_id = name.partition(":")
        if kind == "hb":
            self._heartbeat_tick(group_id, now)
        elif kind == "liveness":
            self._liveness_expired(group_id, now)
        elif kind == "pull":
            self._pull_tick(group_id, now)
        elif kind == "elect-announce":
            self._election_announce(group_id, now)
        elif kind == "elect-close":
            self._election_close(group_id, now)
        elif name == "retry-reg":
            for state in self._sorted_services():
                if state.wanted and not state.registered and not state.in_flight:
                    self.register_service(state.spec.key)

    def _heartbeat_tick(self, group_id: str, now: float) -> None:
        member = self.memberships.get(group_id)
        if member is None or not member.is_registry:
            return
        self._send_heartbeat(group_id, member, now)
        window = self.config.liveness_window
        for device in sorted(member.members):
            info = member.members[device]
            if info.marked_down or now - info.last_seen <= window:
                continue
            info.marked_down = True
            for entry in member.store.lookup(Query.by_group(group_id)):
                if (entry.provider == device
                        and entry.availability is Availability.AVAILABLE):
                    entry.availability = Availability.UNAVAILABLE
                    member.store.upsert(entry)
            self.ctx.metric("member_marked_down", device, now)
        self.ctx.set_timer(f"hb:{group_id}", self.config.heartbeat_period)

    def _send_heartbeat(self, group_id: str, member: _Membership,
                        now: float) -> None:
        score = wire_score(self.current_capability(now).score())
        self.ctx.send(presence(
            self.next_id(), "available", self._channel(group_id), self.address,
            [Child("heartbeat", self.node_id),
             Child("version", str(member.store.store_version)),
             Child("score", f"{score:.4f}"),
             Child("lineage", member.lineage or "")],
        ))

    def _liveness_expired(self, group_id: str, now: float) -> None:
        member = self.memberships.get(group_id)
        if member is None or member.is_registry:
            return
        if now - member.last_heartbeat < self.config.liveness_window - 1e-9:
            remaining = self.config.liveness_window - (now - member.last_heartbeat)
            self.ctx.set_timer(f"liveness:{group_id}", remaining)
            return
        self._start_election(group_id, member, now)

    def _start_election(self, group_id: str, member: _Membership,
                        now: float) -> None:
        if member.election is not None:
            return
        member.election = _Election(started=now)
        if self.willing:
            jitter = self.ctx.uniform(0.0, self.config.election_jitter_ms / 1000.0)
            self.ctx.set_timer(f"elect-announce:{group_id}", jitter)

    def _election_announce(self, group_id: str, now: float) -> None:
        member = self.memberships.get(group_id)
        if member is None or member.election is None or member.is_registry:
            return
        if member.election.announced:
            return
        member.election.announced = True
        report = self.current_capability(now)
        score = wire_score(report.score())
        self.ctx.send(message(
            self.next_id(), "election", self._channel(group_id), self.address,
            [Child("candidate", "", {
                "device": self.node_id,
                "score": f"{score:.4f}",
                "battery": f"{report.battery_pct:.1f}",
                "network": f"{report.network_strength:.1f}",
                "hardware": str(report.hardware_score),
                "uptime": f"{report.uptime_s:.1f}",
            })],
        ))
        self._record_candidate(member, group_id, self.node_id, score, now)

    def _on_election_message(self, stanza: Stanza, group_id: str,
                             now: float) -> None:
        member = self.memberships.get(group_id)
        if member is None:
            return
        candidate = stanza.child("candidate")
        if candidate is None:
            return
        if member.is_registry:
            # Still alive: squash the election with an immediate heartbeat.
            self._send_heartbeat(group_id, member, now)
            return
        if member.election is None:
            self._start_election(group_id, member, now)
        try:
            score = float(candidate.attrs.get("score", ""))
        except ValueError:
            return
        self._record_candidate(member, group_id,
                               candidate.attrs.get("device", ""), score, now)

    def _record_candidate(self, member: _Membership, group_id: str,
                          device: str, score: float, now: float) -> None:
        if member.election is None or not device:
            return
        member.election.candidates[device] = score
        if member.election.window_open is None:
            member.election.window_open = now
            self.ctx.set_timer(f"elect-close:{group_id}",
                               self.config.election_window)

    def _election_close(self, group_id: str, now: float) -> None:
        member = self.memberships.get(group_id)
        if member is None or member.election is None:
            return
        candidates = member.election.candidates
        member.election = None
        if not candidates:
            return
        winner = min(candidates.items(), key=lambda kv: (-kv[1], kv[0]))[0]
        if winner == self.node_id:
            self._become_registry(group_id, now)
            self.ctx.metric("elected", group_id, now)
        else:
            member.registry_device = winner
            member.last_heartbeat = now
            self.ctx.set_timer(f"liveness:{group_id}",
                               self.config.liveness_window)

    def _become_registry(self, group_id: str, now: float) -> None:
        member = self.memberships[group_id]
        member.is_registry = True
        member.registry_device = self.node_id
        member.election = None
        member.needs_full_sync = False
        member.pull_inflight = False
        member.lineage = f"{self.node_id}.{int(now * 1_000_000)}"
        member.store_lineage = member.lineage
        self.ctx.cancel_timer(f"liveness:{group_id}")
        self.ctx.cancel_timer(f"elect-announce:{group_id}")
        self.ctx.cancel_timer(f"elect-close:{group_id}")
        # Reconstruct from the local replica; restore own entries if lost.
        for state in self._sorted_services():
            if (state.registered and state.group_id == group_id
                    and state.service_id not in member.store.entries):
                member.store.upsert(
                    self._make_entry(state, group_id, state.service_id))
        self._send_heartbeat(group_id, member, now)
        self.ctx.set_timer(f"hb:{group_id}", self.config.heartbeat_period)

    def _pull_tick(self, group_id: str, now: float) -> None:
        member = self.memberships.get(group_id)
        if member is None:
            return
        if not member.is_registry and member.registry_device is not None:
            if member.needs_full_sync:
                self._request_snapshot(group_id, member)
            else:
                self._pull(group_id, member)
        self.ctx.set_timer(f"pull:{group_id}", self.config.pull_period)

    # -- presence ----------------------------------------------------------------

    def set_presence(self, key: str, availability: Availability,
                     cause: str) -> None:
        if key not in self.services:
            raise NotFound(key)
        state = self.services[key]
        state.availability = availability
        state.auto_cause = None if cause == "manual" else state.auto_cause
        if not state.registered or state.group_id is None:
            return
        member = self.memberships.get(state.group_id)
        stanza_type = ("available"
                       if availability is Availability.AVAILABLE
                       else "unavailable")
        self.ctx.send(presence(
            self.next_id(), stanza_type, self._channel(state.group_id),
            self._service_address(state.group_id, state.service_id),
            [Child("status", availability.value), Child("cause", cause)],
        ))
        if member is not None and member.is_registry:
            self._apply_availability(member, state.service_id,
                                     availability.value)

    def handle_device_signal(self, kind: str, value: float,
                             now: float) -> None:
        super().handle_device_signal(kind, value, now)
        triggers = {
            "battery": ("low_battery",
                        self.capability.battery_pct < self.config.battery_low_pct),
            "network": ("weak_network",
                        self.capability.network_strength
                        < self.config.network_weak_pct),
            "load": ("overload", self.load_pct > self.config.load_high_pct),
        }
        cause, active = triggers[kind]
        for state in self._sorted_services():
            if active and state.availability is Availability.AVAILABLE:
                state.auto_cause = cause
                self.set_presence(state.spec.key, Availability.UNAVAILABLE,
                                  cause)
                state.auto_cause = cause
            elif (not active and state.auto_cause == cause
                  and state.availability is Availability.UNAVAILABLE):
                state.auto_cause = None
                self.set_presence(state.spec.key, Availability.AVAILABLE,
                                  cause)

    # -- updates / unregister -------------------------------------------------

    def update_service(self, key: str, fields: dict[str, str]) -> None:
        state = self.services[key]
        if not state.registered:
            return
        if "location" in fields:
            state.spec.location = fields["location"]
        if "description" in fields:
            state.spec.description = fields["description"]
        if "name" in fields:
            state.spec.name = fields["name"]
        member = self.memberships.get(state.group_id)
        if member is not None and member.is_registry:
            entry = member.store.get(state.service_id)
            if entry is None:
                member.store.upsert(
                    self._make_entry(state, state.group_id, state.service_id))
            else:
                for name, value in fields.items():
                    if name == "location":
                        entry.location = value
                    elif name == "description":
                        entry.description = value
                    elif name == "name":
                        entry.service_name = value
                member.store.upsert(entry)
            return
        payload = [Child("service-update", "", {"service": state.service_id})]
        payload.extend(Child(name, value) for name, value in sorted(fields.items()))
        self.send_iq(
            "set", self._channel(state.group_id), payload,
            on_reply=lambda s, k=key: self._on_update_reply(k, s),
            on_timeout=lambda k=key, f=dict(fields): self._retry_update(k, f),
        )

    def _retry_update(self, key: str, fields: dict[str, str]) -> None:
        # The registry must not be left stale: keep pushing the update until
        # some registry node acknowledges it.
        state = self.services[key]
        if state.registered:
            self.update_service(key, fields)

    def _on_update_reply(self, key: str, reply: Stanza) -> None:
        if reply.type_attr != "error":
            return
        error = reply.child("error")
        if error is not None and error.text == "item-not-found":
            # Failover lost the entry: surface by re-registering.
            state = self.services[key]
            state.registered = False
            state.in_flight = False
            state.propose = True
            self.ctx.metric("reregister", key, 1)
            self.register_service(key)

    def unregister_service(self, key: str) -> None:
        state = self.services[key]
        if not state.registered:
            return
        state.registered = False
        state.wanted = False
        member = self.memberships.get(state.group_id)
        if member is not None and member.is_registry:
            try:
                member.store.remove(state.service_id)
            except NotFound:
                pass
            return
        self._send_unregister(state.group_id, state.service_id)

    def _send_unregister(self, group_id: str, service_id: str) -> None:
        payload = [Child("service-unregister", "", {"service": service_id})]
        self.send_iq(
            "set", self._channel(group_id), payload,
            on_timeout=lambda: self._send_unregister(group_id, service_id),
        )

    # -- binding -----------------------------------------------------------------

    def _on_binding_request(self, stanza: Stanza, now: float) -> None:
        marker = stanza.child("binding-request")
        if marker is None:
            return
        service_id = marker.attrs.get("service") or stanza.to.service_id or ""
        state = None
        for candidate in self._sorted_services():
            if candidate.service_id == service_id:
                state = candidate
                break
        reply_payload: list[Child]
        if state is None or state.availability is not Availability.AVAILABLE:
            reply_payload = [Child("error", "unavailable")]
        else:
            spec = state.spec
            reply_payload = [
                Child("endpoint", spec.endpoint),
                Child("params", spec.params),
                Child("returns", spec.returns),
            ]
            if spec.wsdl_url:
                reply_payload.append(Child("wsdl-url", spec.wsdl_url))
        self.ctx.send(message(stanza.id, "binding", stanza.from_,
                              self.address, reply_payload))

    # -- provider-initiated discovery ---------------------------------------------

    def discover(self, query: str) -> DiscoveryOutcome:
        """Replica-first discovery; falls back to the consumer flow for
        queries no joined group can answer."""
        outcome = DiscoveryOutcome(query=query, started=self.ctx.now)
        self.discoveries.append(outcome)
        target = self._match_joined_group(query)
        if target is None:
            self._consumer_flow(query, outcome)
            return outcome
        member = self.memberships[target]
        local = [e for e in member.store.lookup(Query.by_name(query))
                 if isinstance(e, ServiceEntry)]
        if member.is_registry:
            if local:
                self._finish_discovery(outcome, "ok", local)
            else:
                self._consumer_flow(query, outcome)
            return outcome
        if local:
            # Hit: refresh availability with a selective pull, then answer
            # from the replica.
            def refreshed():
                hits = member.store.lookup(Query.by_name(query))
                self._finish_discovery(outcome, "ok", hits)

            def on_pull(reply: Stanza) -> None:
                self._on_pull_reply(target, reply)
                refreshed()

            def on_pull_timeout() -> None:
                self._pull_failed(target)
                refreshed()

            if member.registry_device is None:
                refreshed()
                return outcome
            member.pull_inflight = True
            self.send_iq(
                "get", device_address(member.registry_device, self.net_id),
                [Child("registry-pull", target),
                 Child("since", str(member.store.store_version))],
                on_reply=on_pull,
                on_timeout=on_pull_timeout,
            )
            return outcome

        # Replica miss: ask the group's registry node, then sync; if the
        # group cannot answer at all, retry through the navigator so the
        # result matches what a plain consumer would get.
        def on_miss_reply(reply: Stanza) -> None:
            entries = []
            for child in reply.children("entry"):
                try:
                    entries.append(ServiceEntry.from_element(_unb64(child.text)))
                except Exception:
                    continue
            if entries:
                self._finish_discovery(outcome, "ok", entries)
                fresh = self.memberships.get(target)
                if fresh is not None and not fresh.is_registry:
                    self._pull(target, fresh)
            else:
                self._consumer_flow(query, outcome)

        self.send_iq(
            "get", self._channel(target),
            [Child("service-query", query, {"by": "name"})],
            on_reply=on_miss_reply,
            on_timeout=lambda: self._consumer_flow(query, outcome),
        )
        return outcome

    def _match_joined_group(self, query: str) -> str | None:
        """Token overlap between the query and a joined group's identity
        (or a direct replica hit) selects the group to answer from."""
        needle = query.lower()
        tokens = set(classify.tokenize(query))
        for group_id in sorted(self.memberships):
            member = self.memberships[group_id]
            info = member.info
            group_tokens = set(classify.tokenize(
                f"{info.group_name} {info.group_domain} "
                f"{info.group_description}"))
            group_tokens.add(group_id)
            if needle in group_id or tokens & group_tokens:
                return group_id
            if member.store.lookup(Query.by_name(query)):
                return group_id
        return None

    def _consumer_flow(self, query: str, outcome: DiscoveryOutcome) -> None:
        self.send_iq(
            "get", self.navigator_address, [Child("group-lookup", query)],
            on_reply=lambda s: self._on_lookup_reply(query, outcome, s),
            on_timeout=lambda: self._finish_discovery(outcome, "no-navigator", []),
        )

    def _on_lookup_reply(self, query: str, outcome: DiscoveryOutcome,
                         reply: Stanza) -> None:
        if reply.type_attr == "error":
            self._finish_discovery(outcome, "ok", [])
            return
        shared = reply.child("group-entry")
        try:
            entry = GroupEntry.from_element(_unb64(shared.text))
        except Exception:
            self._finish_discovery(outcome, "ok", [])
            return
        self._query_group(entry.group_access_point, query, outcome)

    def _query_group(self, channel: Identifier, query: str,
                     outcome: DiscoveryOutcome) -> None:
        def on_reply(reply: Stanza) -> None:
            entries = []
            for child in reply.children("entry"):
                try:
                    entries.append(ServiceEntry.from_element(_unb64(child.text)))
                except Exception:
                    continue
            self._finish_discovery(outcome, "ok", entries)

        self.send_iq(
            "get", channel, [Child("service-query", query, {"by": "name"})],
            on_reply=on_reply,
            on_timeout=lambda: self._finish_discovery(outcome, "no-registry", []),
        )

    def _finish_discovery(self, outcome: DiscoveryOutcome, status: str,
                          entries: list) -> None:
        outcome.status = status
        outcome.entries = [e for e in entries if isinstance(e, ServiceEntry)]
        outcome.finished = self.ctx.now
        self.ctx.metric("discovery_s", outcome.query,
                        outcome.finished - outcome.started)
        if status != "ok":
            self.ctx.metric("discovery_fail", outcome.query, status)


# ---------------------------------------------------------------------------
# Consumer


@dataclass
class ProbeTask:
    group_id: str
    service_id: str
    period: float
    start: float = 0.0


@dataclass
class BindingOutcome:
    target: str
    started: float
    finished: float | None = None
    status: str = "pending"              # ok | unavailable | timeout
    payload: dict[str, str] = field(default_factory=dict)


class ConsumerNode(Node):
    """External service consumer: two-step discovery, binding, probing."""

    role = "consumer"

    def __init__(self, node_id: str, net_id: str, config: ProtocolConfig,
                 navigator_id: str):
        super().__init__(node_id, net_id, config)
        self.navigator_id = navigator_id
        self.discoveries: list[DiscoveryOutcome] = []
        self.bindings: list[BindingOutcome] = []
        self.probes: list[ProbeTask] = []

    @property
    def navigator_address(self) -> Identifier:
        return device_address(self.navigator_id, self.net_id)

    def on_start(self, now: float) -> None:
        super().on_start(now)
        for index, probe in enumerate(self.probes):
            self.ctx.set_timer(f"probe:{index}", max(probe.start - now, 0.0))

    def discover(self, query: str) -> DiscoveryOutcome:
        outcome = DiscoveryOutcome(query=query, started=self.ctx.now)
        self.discoveries.append(outcome)
        self.send_iq(
            "get", self.navigator_address, [Child("group-lookup", query)],
            on_reply=lambda s: self._on_group_reply(query, outcome, s),
            on_timeout=lambda: self._finish(outcome, "no-navigator", []),
        )
        return outcome

    def _on_group_reply(self, query: str, outcome: DiscoveryOutcome,
                        reply: Stanza) -> None:
        if reply.type_attr == "error":
            self._finish(outcome, "ok", [])
            return
        shared = reply.child("group-entry")
        try:
            entry = GroupEntry.from_element(_unb64(shared.text))
        except Exception:
            self._finish(outcome, "ok", [])
            return
        self.send_iq(
            "get", entry.group_access_point,
            [Child("service-query", query, {"by": "name"})],
            on_reply=lambda s: self._on_entries(outcome, s),
            on_timeout=lambda: self._finish(outcome, "no-registry", []),
        )

    def _on_entries(self, outcome: DiscoveryOutcome, reply: Stanza) -> None:
        entries = []
        for child in reply.children("entry"):
            try:
                entries.append(ServiceEntry.from_element(_unb64(child.text)))
            except Exception:
                continue
        self._finish(outcome, "ok", entries)

    def _finish(self, outcome: DiscoveryOutcome, status: str,
                entries: list[ServiceEntry]) -> None:
        outcome.status = status
        outcome.entries = entries
        outcome.finished = self.ctx.now
        self.ctx.metric("discovery_s", outcome.query,
                        outcome.finished - outcome.started)
        if status != "ok":
            self.ctx.metric("discovery_fail", outcome.query, status)

    def request_binding(self, target: Identifier) -> BindingOutcome:
        outcome = BindingOutcome(target=render_identifier(target),
                                 started=self.ctx.now)
        self.bindings.append(outcome)

        def on_reply(reply: Stanza) -> None:
            error = reply.child("error")
            outcome.finished = self.ctx.now
            if error is not None:
                outcome.status = error.text or "error"
            else:
                outcome.status = "ok"
                outcome.payload = {c.name: c.text for c in reply.payload}

        def on_timeout() -> None:
            outcome.finished = self.ctx.now
            outcome.status = "timeout"

        self.send_request(
            message(self.next_id(), "binding", target, self.address,
                    [Child("binding-request", "",
                           {"service": target.service_id or ""})]),
            on_reply, on_timeout,
        )
        return outcome

    def on_timer(self, name: str, now: float) -> None:
        if not name.startswith("probe:"):
            return
        index = int(name.split(":", 1)[1])
        probe = self.probes[index]
        channel = Identifier(probe.group_id, self.net_id)

        def on_reply(reply: Stanza) -> None:
            reported = "missing"
            for child in reply.children("entry"):
                try:
                    entry = ServiceEntry.from_element(_unb64(child.text))
                except Exception:
                    continue
                reported = entry.availability.value
            self.ctx.observe_probe(probe.service_id, reported)

        self.send_iq(
            "get", channel,
            [Child("service-query", probe.service_id, {"by": "id"})],
            on_reply=on_reply,
            on_timeout=lambda: self.ctx.metric("probe_lost",
                                               probe.service_id, 1),
            attempts=1,
        )
        self.ctx.set_timer(name, probe.period)
