"""Desk-scale reproductions of the evaluation scenarios.

Each experiment builds a seeded scenario, runs it, and reduces the metric
stream to a small CSV.  Same name + seed always produces the same simulated
behaviour; only the wall-clock lookup timings in ``discovery-scale`` vary
from run to run (they measure real computation, not simulated time).
"""
from __future__ import annotations

import random
from dataclasses import dataclass, field

from .classify import parse_taxonomy
from .node import CapabilityReport, OwnedService, ProtocolConfig, wire_score
from .simnet import (
    ChannelSpec,
    ConsumerSpec,
    NavigatorSpec,
    PreloadSpec,
    ProbeSpec,
    ProviderSpec,
    Scenario,
    ScriptEvent,
    Simulator,
    assert_invariants,
    build_synthetic_store,
)

EXPERIMENT_NAMES = ("reg-latency", "discovery-scale", "registry-growth",
                    "presence-fn", "failover")

DIRECTORY_SIZES = (500, 1_000, 5_000, 10_000, 50_000, 100_000)


class UnknownExperiment(ValueError):
    pass


@dataclass
class ExperimentResult:
    name: str
    header: list[str]
    rows: list[tuple] = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def csv_bytes(self) -> bytes:
        lines = [",".join(self.header)]
        for row in self.rows:
            lines.append(",".join(
                f"{v:.6f}" if isinstance(v, float) else str(v) for v in row))
        return ("\n".join(lines) + "\n").encode("utf-8")


def run_experiment(name: str, seed: int = 0) -> ExperimentResult:
    try:
        runner = _RUNNERS[name]
    except KeyError:
        raise UnknownExperiment(name) from None
    return runner(seed)


# ---------------------------------------------------------------------------
# reg-latency: 200 registrations from 4 clients under churn


_REG_TAXONOMY = """\
trafficinfo\ttransport\ttraffic,road,congestion,transit
hospital\thealth\tdoctor,hospital,clinic,rating
weather\tenvironment\tweather,forecast,rain,temperature
food\tcatering\tpizza,restaurant,menu,delivery
"""

_GROUP_TERMS = {
    "trafficinfo": ("traffic", "road"),
    "hospital": ("doctor", "hospital"),
    "weather": ("weather", "forecast"),
    "food": ("pizza", "restaurant"),
}


def _service_for_group(group: str, key: str, tag: str) -> OwnedService:
    a, b = _GROUP_TERMS[group]
    name = f"{a} {b} station {tag}"
    return OwnedService(key=key, name=name,
                        description=f"{a} {b} feed for station {tag}",
                        endpoint=f"http://10.1.0.1/{key}")


def build_reg_latency_scenario(seed: int) -> tuple[Scenario, list[str]]:
    groups = sorted(_GROUP_TERMS)
    scenario = Scenario(seed=seed, duration=270.0, drain=80.0,
                        taxonomy=parse_taxonomy(_REG_TAXONOMY))
    scenario.navigators.append(NavigatorSpec("nav1"))
    rng = random.Random(seed ^ 0x5EED)
    # 16 background providers seed the four groups before churn begins.
    for i in range(16):
        group = groups[i % 4]
        node_id = f"bg{i:02d}"
        spec = ProviderSpec(node_id,
                            battery=float(rng.randrange(40, 100, 5)),
                            network=float(rng.randrange(40, 100, 5)),
                            hardware=rng.randrange(20, 90, 5))
        spec.services.append(
            _service_for_group(group, f"{node_id}-svc", f"bg-{i:02d}"))
        scenario.providers.append(spec)
        scenario.events.append(
            ScriptEvent(1.0 + 0.5 * i, "register", (node_id, f"{node_id}-svc")))
    # 4 registration clients, 50 services each.
    client_keys: list[tuple[str, str, str]] = []
    for j in range(4):
        node_id = f"cl{j + 1}"
        spec = ProviderSpec(node_id, battery=95.0, network=95.0, hardware=80)
        for i in range(50):
            group = groups[(i + j) % 4]
            key = f"{node_id}-s{i:02d}"
            service = _service_for_group(group, key, f"{node_id}-{i:02d}")
            spec.services.append(service)
            client_keys.append((node_id, key, service.name))
        scenario.providers.append(spec)
    for i in range(50):
        for j in range(4):
            node_id = f"cl{j + 1}"
            scenario.events.append(ScriptEvent(
                20.0 + 4.0 * i + 1.0 * j, "register",
                (node_id, f"{node_id}-s{i:02d}")))
    # Churn: 10% of the 20 providers toggle up/down through the run.
    for victim, phase in (("bg02", 25.0), ("bg07", 45.0)):
        t = phase
        while t + 20.0 < 230.0:
            scenario.events.append(ScriptEvent(t, "down", (victim,)))
            scenario.events.append(ScriptEvent(t + 20.0, "up", (victim,)))
            t += 40.0
    # Post-registration discovery sweep over every client service name.
    scenario.consumers.append(ConsumerSpec("probe1"))
    for idx, (_, _, service_name) in enumerate(client_keys):
        scenario.events.append(ScriptEvent(
            240.0 + 0.1 * idx, "discover", ("probe1", service_name)))
    return scenario, [name for _, _, name in client_keys]


def run_reg_latency(seed: int) -> ExperimentResult:
    scenario, expected_names = build_reg_latency_scenario(seed)
    sim = Simulator(scenario)
    report = sim.run()
    verdicts = assert_invariants(sim)
    result = ExperimentResult(
        "reg-latency", ["index", "provider", "service", "latency_s"])
    latencies: dict[tuple[str, str], float] = {}
    for sample in report.metrics:
        if sample.metric == "reg_latency_s" and sample.node.startswith("cl"):
            latencies.setdefault((sample.node, sample.key), sample.value)
    for idx, ((node, key), value) in enumerate(sorted(latencies.items())):
        result.rows.append((idx, node, key, value))
    reregistered = sum(1 for m in report.metrics if m.metric == "reregister")
    consumer = sim.nodes["probe1"]
    found = sum(
        1 for outcome in consumer.discoveries
        if outcome.status == "ok" and any(
            e.service_name == outcome.query for e in outcome.entries)
    )
    registered = sum(
        1 for node_id, node in sim.nodes.items() if node_id.startswith("cl")
        for state in node.services.values() if state.registered
    )
    result.summary = {
        "registrations": len(latencies),
        "registered_final": registered,
        "expected": len(expected_names),
        "discovered": found,
        "reregistered_after_failover": reregistered,
        "invariants_pass": all(v.passed for v in verdicts),
        "mean_latency_s": (sum(r[3] for r in result.rows) / len(result.rows)
                           if result.rows else 0.0),
    }
    return result


# ---------------------------------------------------------------------------
# discovery-scale: query time vs directory size


_BULK_TAXONOMY = "bulk\tsynthetic\tentry\n"


def build_discovery_scale_scenario(seed: int, size: int,
                                   queries: int) -> Scenario:
    scenario = Scenario(seed=seed, duration=5.0 + 1.5 * queries, drain=10.0,
                        taxonomy=parse_taxonomy(_BULK_TAXONOMY))
    scenario.config.measure_lookup_wall = True
    scenario.navigators.append(NavigatorSpec("nav1"))
    scenario.providers.append(ProviderSpec("reg1"))
    scenario.consumers.append(ConsumerSpec("c1"))
    scenario.preloads.append(PreloadSpec("reg1", "bulk", size))
    rng = random.Random(seed * 1_000 + size)
    for i in range(queries):
        index = rng.randrange(size)
        scenario.events.append(ScriptEvent(
            2.0 + 1.5 * i, "discover", ("c1", f"entry-{index:06d}")))
    return scenario


def run_discovery_scale(seed: int, sizes=DIRECTORY_SIZES,
                        queries: int = 30) -> ExperimentResult:
    result = ExperimentResult(
        "discovery-scale",
        ["size", "queries", "mean_wall_s", "mean_sim_s"])
    for size in sizes:
        sim = Simulator(build_discovery_scale_scenario(seed, size, queries))
        report = sim.run()
        walls = [m.value for m in report.metrics
                 if m.metric == "lookup_wall_s"]
        sims = [m.value for m in report.metrics if m.metric == "discovery_s"]
        consumer = sim.nodes["c1"]
        ok = sum(1 for d in consumer.discoveries
                 if d.status == "ok" and len(d.entries) == 1)
        if ok != queries:
            raise RuntimeError(
                f"discovery-scale size {size}: {ok}/{queries} queries hit")
        result.rows.append((size, queries,
                            sum(walls) / len(walls),
                            sum(sims) / len(sims)))
    means = [row[2] for row in result.rows]
    result.summary = {
        "monotone_wall": all(a <= b for a, b in zip(means, means[1:])),
        "max_mean_wall_s": means[-1],
        "under_one_second": means[-1] < 1.0,
    }
    return result


# ---------------------------------------------------------------------------
# registry-growth: snapshot bytes vs entry count


def least_squares(points: list[tuple[float, float]]) -> tuple[float, float, float]:
    """Fit y = a*x + b; returns (a, b, r_squared)."""
    n = len(points)
    mean_x = sum(p[0] for p in points) / n
    mean_y = sum(p[1] for p in points) / n
    sxx = sum((p[0] - mean_x) ** 2 for p in points)
    sxy = sum((p[0] - mean_x) * (p[1] - mean_y) for p in points)
    slope = sxy / sxx
    intercept = mean_y - slope * mean_x
    ss_res = sum((p[1] - (slope * p[0] + intercept)) ** 2 for p in points)
    ss_tot = sum((p[1] - mean_y) ** 2 for p in points)
    r2 = 1.0 - ss_res / ss_tot if ss_tot else 1.0
    return slope, intercept, r2


def run_registry_growth(seed: int, sizes=DIRECTORY_SIZES) -> ExperimentResult:
    result = ExperimentResult("registry-growth", ["size", "snapshot_bytes"])
    points = []
    for size in sizes:
        store = build_synthetic_store(size, "bulk", "local", "seed")
        assert store.store_version == size  # one upsert per distinct id
        nbytes = len(store.snapshot())
        result.rows.append((size, nbytes))
        points.append((float(size), float(nbytes)))
    slope, intercept, r2 = least_squares(points)
    result.summary = {"slope": slope, "intercept": intercept, "r_squared": r2}
    return result


# ---------------------------------------------------------------------------
# presence-fn: stale-availability rate under continuous probing


_PULSE_TAXONOMY = "status\tmonitoring\tstatus,pulse,beacon\n"

PRESENCE_TOGGLES = 240           # 120 full available/unavailable cycles
PRESENCE_HALF_PERIOD_S = 10.0


def build_presence_scenario(seed: int) -> Scenario:
    first_toggle = 40.0
    duration = first_toggle + PRESENCE_TOGGLES * PRESENCE_HALF_PERIOD_S + 10.0
    scenario = Scenario(seed=seed, duration=duration, drain=30.0,
                        taxonomy=parse_taxonomy(_PULSE_TAXONOMY))
    scenario.navigators.append(NavigatorSpec("nav1"))
    anchor = ProviderSpec("anchor")
    anchor.services.append(OwnedService(
        "beacon", "status beacon anchor", "status beacon for the group"))
    scenario.providers.append(anchor)
    toggler = ProviderSpec("toggler")
    toggler.services.append(OwnedService(
        "pulse", "status pulse service", "status pulse availability feed"))
    scenario.providers.append(toggler)
    scenario.consumers.append(ConsumerSpec("watch"))
    scenario.events.append(ScriptEvent(1.0, "register", ("anchor", "beacon")))
    scenario.events.append(ScriptEvent(3.0, "register", ("toggler", "pulse")))
    # Probe period deliberately incommensurate with the 10 s toggle grid so
    # the probes sample every phase instead of locking onto toggle instants.
    scenario.probes.append(ProbeSpec("watch", "status", "pulse",
                                     period=0.207, start=30.0))
    state = "unavailable"
    for i in range(PRESENCE_TOGGLES):
        scenario.events.append(ScriptEvent(
            first_toggle + PRESENCE_HALF_PERIOD_S * i, "presence",
            ("toggler", "pulse", state, "manual")))
        state = "available" if state == "unavailable" else "unavailable"
    return scenario


def run_presence_fn(seed: int) -> ExperimentResult:
    sim = Simulator(build_presence_scenario(seed))
    report = sim.run()
    stale_samples = [m for m in report.metrics if m.metric == "probe_stale"]
    stale = sum(m.value for m in stale_samples)
    probes = len(stale_samples)
    rate = stale / probes if probes else 0.0
    result = ExperimentResult(
        "presence-fn", ["toggles", "probes", "stale", "rate"])
    result.rows.append((PRESENCE_TOGGLES, probes, stale, rate))
    result.summary = {
        "toggles": PRESENCE_TOGGLES,
        "probes": probes,
        "stale": stale,
        "rate": rate,
        "invariants_pass": all(v.passed for v in assert_invariants(sim)),
    }
    return result


# ---------------------------------------------------------------------------
# failover: seeded registry-node kills


_FLEET_TAXONOMY = "fleet\tlogistics\tfleet,tracker\n"

FAILOVER_RUNS = 100
FAILOVER_KILL_T = 30.0


def _failover_bound(config: ProtocolConfig) -> float:
    return (config.miss_threshold * config.heartbeat_period
            + config.election_window + 0.5)


def build_failover_scenario(seed: int, run: int) -> tuple[Scenario, str]:
    """One seeded kill; returns the scenario and the expected winner."""
    rng = random.Random(seed * 7_919 + run)
    size = rng.randint(3, 10)
    tie_run = run % 10 == 0
    scenario = Scenario(seed=seed * 131 + run, duration=60.0, drain=40.0,
                        taxonomy=parse_taxonomy(_FLEET_TAXONOMY))
    if tie_run:
        # Exact capability ties need identical announce-time uptimes.
        scenario.channels.default = ChannelSpec(latency_ms=10.0, jitter_ms=0.0)
        scenario.config.election_jitter_ms = 0.0
    scenario.navigators.append(NavigatorSpec("nav1"))
    statics: dict[str, float] = {}
    for i in range(size):
        node_id = f"p{i:02d}"
        while True:
            battery = float(rng.randrange(20, 100, 5))
            network = float(rng.randrange(20, 100, 5))
            hardware = rng.randrange(10, 95, 5)
            static = wire_score(
                CapabilityReport(battery, network, hardware, 0.0).score())
            # Keep survivor scores >= 0.01 apart so uptime drift can't
            # reorder candidates under the oracle.
            if all(abs(static - other) >= 0.01 for other in statics.values()):
                break
        statics[node_id] = static
        spec = ProviderSpec(node_id, battery=battery, network=network,
                            hardware=hardware)
        spec.services.append(_fleet_service(node_id))
        scenario.providers.append(spec)
        scenario.events.append(ScriptEvent(
            1.0 if i == 0 else 2.0 + 0.3 * i, "register",
            (node_id, f"{node_id}-svc")))
    survivors = {nid: s for nid, s in statics.items() if nid != "p00"}
    if tie_run:
        # Clone the top survivor's capabilities onto the smallest-id member
        # so the smallest-id tie-break decides (and usually flips) the win.
        ranked = sorted(survivors.items(), key=lambda kv: (-kv[1], kv[0]))
        top_id = ranked[0][0]
        clone_id = "p01" if top_id != "p01" else "p02"
        top_spec = next(p for p in scenario.providers if p.node_id == top_id)
        clone = next(p for p in scenario.providers if p.node_id == clone_id)
        clone.battery = top_spec.battery
        clone.network = top_spec.network
        clone.hardware = top_spec.hardware
        survivors[clone_id] = survivors[top_id]
    expected = min(survivors.items(), key=lambda kv: (-kv[1], kv[0]))[0]
    scenario.events.append(ScriptEvent(FAILOVER_KILL_T, "down", ("p00",)))
    return scenario, expected


def _fleet_service(node_id: str) -> OwnedService:
    return OwnedService(f"{node_id}-svc", f"fleet tracker unit {node_id}",
                        f"fleet tracker feed from unit {node_id}")


def run_failover(seed: int, runs: int = FAILOVER_RUNS) -> ExperimentResult:
    result = ExperimentResult(
        "failover",
        ["run", "group_size", "kill_t", "elected_t", "delta_s", "bound_s",
         "winner", "expected", "ok"])
    all_ok = True
    max_delta = 0.0
    for run in range(runs):
        scenario, expected = build_failover_scenario(seed, run)
        bound = _failover_bound(scenario.config)
        sim = Simulator(scenario)
        report = sim.run()
        elected = [m for m in report.metrics if m.metric == "elected"]
        registries = [
            node_id for node_id, node in sorted(sim.nodes.items())
            if getattr(node, "memberships", None) and node.up
            and any(m.is_registry for m in node.memberships.values())
        ]
        if len(elected) == 1 and len(registries) == 1:
            winner = elected[0].node
            elected_t = elected[0].value
            delta = elected_t - FAILOVER_KILL_T
            ok = (winner == expected == registries[0] and delta <= bound
                  and all(v.passed for v in assert_invariants(sim)))
        else:
            winner = ",".join(m.node for m in elected) or "none"
            elected_t = float("nan")
            delta = float("inf")
            ok = False
        max_delta = max(max_delta, delta if delta != float("inf") else 0.0)
        all_ok = all_ok and ok
        result.rows.append((
            run, len(scenario.providers), FAILOVER_KILL_T, elected_t, delta,
            bound, winner, expected, int(ok)))
    result.summary = {
        "runs": runs,
        "all_ok": all_ok,
        "max_delta_s": max_delta,
    }
    return result


_RUNNERS = {
    "reg-latency": run_reg_latency,
    "discovery-scale": lambda seed: run_discovery_scale(seed),
    "registry-growth": lambda seed: run_registry_growth(seed),
    "presence-fn": run_presence_fn,
    "failover": lambda seed: run_failover(seed),
}
