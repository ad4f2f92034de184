
import pytest

from mobreg import scenarios_dir
from mobreg.classify import parse_taxonomy
from mobreg.node import OwnedService
from mobreg.simnet import (
    ChannelSpec,
    ConsumerSpec,
    NavigatorSpec,
    ProviderSpec,
    Scenario,
    ScenarioError,
    ScriptEvent,
    Simulator,
    TrafficRecord,
    assert_invariants,
    load_scenario,
    parse_scenario,
)
from mobreg.stanza import Child, Identifier, decode, message

TAXONOMY = parse_taxonomy(
    "trafficinfo\ttransport\ttraffic,road,street,congestion\n")


def traffic_service(key, street):
    return OwnedService(key, f"Traffic report for {street}",
                        f"traffic congestion {street}")


def two_provider_scenario(seed=1, **channel_kwargs):
    scenario = Scenario(seed=seed, duration=60, drain=30, taxonomy=TAXONOMY)
    if channel_kwargs:
        scenario.channels.default = ChannelSpec(**channel_kwargs)
    scenario.navigators.append(NavigatorSpec("nav1"))
    scenario.providers.append(
        ProviderSpec("p1", services=[traffic_service("mainstreet", "main")]))
    scenario.providers.append(
        ProviderSpec("p2", services=[traffic_service("highstreet", "high")]))
    scenario.consumers.append(ConsumerSpec("c1"))
    scenario.events = [
        ScriptEvent(2, "register", ("p1", "mainstreet")),
        ScriptEvent(5, "register", ("p2", "highstreet")),
        ScriptEvent(20, "discover", ("c1", "traffic")),
        ScriptEvent(30, "presence", ("p2", "highstreet", "unavailable",
                                     "manual")),
        ScriptEvent(40, "discover", ("c1", "traffic")),
    ]
    return scenario


# -- multicast fan-out ------------------------------------------------------------

def fanout_scenario(members, loss=0.0):
    scenario = Scenario(seed=3, duration=40, drain=10, taxonomy=TAXONOMY)
    scenario.channels.default = ChannelSpec(latency_ms=5, jitter_ms=0, loss=0)
    if loss:
        scenario.channels.overrides["trafficinfo@local"] = ChannelSpec(
            latency_ms=5, jitter_ms=0, loss=loss)
    scenario.navigators.append(NavigatorSpec("nav1"))
    for i in range(members + 1):
        scenario.providers.append(ProviderSpec(
            f"p{i}", services=[traffic_service(f"svc{i}", f"street{i}")]))
        scenario.events.append(
            ScriptEvent(2 + i * 0.5, "register", (f"p{i}", f"svc{i}")))
    return scenario


def heartbeat_sends(sim):
    return [r for r in sim.traffic
            if r.kind == "send" and r.to == "trafficinfo@local"
            and b"heartbeat" in r.data]


def test_multicast_fanout_matches_up_subscribers():
    sim = Simulator(fanout_scenario(5))
    sim.run()
    send = heartbeat_sends(sim)[-1]
    fates = [r for r in sim.traffic
             if r.kind in ("deliver", "drop") and r.data == send.data]
    # 5 member subscribers; the sending registry node is excluded.
    assert len(fates) == 5
    assert all(r.kind == "deliver" for r in fates)


def test_full_loss_delivers_nothing():
    sim = Simulator(fanout_scenario(4, loss=1.0))
    sim.run()
    sends = heartbeat_sends(sim)
    assert sends
    delivered = [r for r in sim.traffic
                 if r.kind == "deliver" and r.to != "trafficinfo@local"
                 and b"heartbeat" in r.data
                 and r.frm.startswith("_dev@local/p")]
    assert delivered == []


def test_bernoulli_loss_matches_binomial_oracle():
    scenario = Scenario(seed=11, duration=10, drain=0, taxonomy=TAXONOMY)
    scenario.channels.overrides["bulk@local"] = ChannelSpec(
        latency_ms=1, jitter_ms=0, loss=0.3)
    scenario.providers.append(ProviderSpec("p1"))
    scenario.providers.append(ProviderSpec("p2"))
    scenario.navigators.append(NavigatorSpec("nav1"))
    sim = Simulator(scenario)
    for node_id in sorted(sim.nodes):
        sim.nodes[node_id].on_start(0.0)
    sender, receiver = sim.nodes["p1"], sim.nodes["p2"]
    receiver.ctx.subscribe("bulk@local")
    sends = 10_000
    for i in range(sends):
        sim.transmit(sender, message(
            f"m{i}", "push", Identifier("bulk", "local"), sender.address,
            [Child("payload", str(i))]))
    delivered = sum(1 for _, _, item in sim._heap if item[0] == "deliver")
    assert delivered / sends == pytest.approx(0.7, abs=0.02)


# -- determinism --------------------------------------------------------------------

def run_once(seed=1):
    sim = Simulator(two_provider_scenario(seed=seed))
    report = sim.run()
    return sim, report


def test_same_seed_produces_identical_bytes():
    _, first = run_once()
    _, second = run_once()
    assert first.metrics_csv() == second.metrics_csv()
    assert first.traffic_log() == second.traffic_log()


def test_same_scenario_object_is_reusable():
    scenario = two_provider_scenario()
    first = Simulator(scenario).run()
    second = Simulator(scenario).run()
    assert first.metrics_csv() == second.metrics_csv()
    assert first.traffic_log() == second.traffic_log()


def test_different_seeds_same_verdicts_different_latencies():
    sim_a, report_a = run_once(seed=1)
    sim_b, report_b = run_once(seed=2)
    verdicts_a = [(v.name, v.passed) for v in assert_invariants(sim_a)]
    verdicts_b = [(v.name, v.passed) for v in assert_invariants(sim_b)]
    assert verdicts_a == verdicts_b
    assert all(passed for _, passed in verdicts_a)
    lat_a = [m.value for m in report_a.metrics if m.metric == "discovery_s"]
    lat_b = [m.value for m in report_b.metrics if m.metric == "discovery_s"]
    assert lat_a != lat_b


def test_clock_is_monotone_and_log_is_ordered():
    sim, _ = run_once()
    times = [r.time_us for r in sim.traffic]
    assert times == sorted(times)


def test_every_deliver_has_a_prior_send():
    sim, _ = run_once()
    verdict = next(v for v in assert_invariants(sim)
                   if v.name == "log-completeness")
    assert verdict.passed


def test_traffic_log_line_format():
    _, report = run_once()
    line = report.traffic_log().decode().splitlines()[0]
    time_us, kind, frm, to, blob = line.split("\t")
    assert int(time_us) >= 0
    assert kind in ("send", "deliver", "drop")
    decode(bytes.fromhex(blob))


def test_empty_scenario_runs_to_nothing():
    scenario = Scenario(duration=5, drain=0, taxonomy=TAXONOMY)
    report = Simulator(scenario).run()
    assert report.metrics == []
    assert report.traffic == []


def test_simulator_runs_only_once():
    sim = Simulator(two_provider_scenario())
    sim.run()
    with pytest.raises(RuntimeError):
        sim.run()


# -- scenario validation ---------------------------------------------------------------

def test_unknown_node_reference_rejected():
    scenario = Scenario(duration=10, taxonomy=TAXONOMY)
    scenario.navigators.append(NavigatorSpec("nav1"))
    scenario.events = [ScriptEvent(1, "down", ("ghost",))]
    with pytest.raises(ScenarioError):
        Simulator(scenario)


def test_event_after_duration_rejected():
    scenario = Scenario(duration=10, taxonomy=TAXONOMY)
    scenario.navigators.append(NavigatorSpec("nav1"))
    scenario.events = [ScriptEvent(11, "down", ("nav1",))]
    with pytest.raises(ScenarioError):
        Simulator(scenario)


def test_unknown_action_rejected():
    scenario = Scenario(duration=10, taxonomy=TAXONOMY)
    scenario.navigators.append(NavigatorSpec("nav1"))
    scenario.events = [ScriptEvent(1, "explode", ("nav1",))]
    with pytest.raises(ScenarioError):
        Simulator(scenario)


def test_role_mismatch_rejected():
    scenario = Scenario(duration=10, taxonomy=TAXONOMY)
    scenario.navigators.append(NavigatorSpec("nav1"))
    scenario.consumers.append(ConsumerSpec("c1"))
    scenario.events = [ScriptEvent(1, "register", ("c1", "svc"))]
    with pytest.raises(ScenarioError):
        Simulator(scenario)


def test_unknown_service_key_rejected():
    scenario = Scenario(duration=10, taxonomy=TAXONOMY)
    scenario.navigators.append(NavigatorSpec("nav1"))
    scenario.providers.append(ProviderSpec("p1"))
    scenario.events = [ScriptEvent(1, "register", ("p1", "nope"))]
    with pytest.raises(ScenarioError):
        Simulator(scenario)


def test_duplicate_node_ids_rejected():
    scenario = Scenario(duration=10, taxonomy=TAXONOMY)
    scenario.navigators.append(NavigatorSpec("x"))
    scenario.providers.append(ProviderSpec("x"))
    with pytest.raises(ScenarioError):
        Simulator(scenario)


def test_bad_loss_probability_rejected():
    scenario = Scenario(duration=10, taxonomy=TAXONOMY)
    scenario.channels.default = ChannelSpec(loss=1.5)
    with pytest.raises(ScenarioError):
        Simulator(scenario)


# -- scenario files -----------------------------------------------------------------

def test_parse_bundled_smoke_scenario():
    scenario = load_scenario(scenarios_dir() / "smoke.scn")
    assert scenario.seed == 42
    assert scenario.net_id == "acmecity"
    assert [n.node_id for n in scenario.navigators] == ["nav1"]
    assert len(scenario.providers) == 2
    assert {s.key for s in scenario.providers[0].services} == \
        {"mainstreet", "cityforecast"}
    assert scenario.taxonomy.groups["trafficinfo"].domain == "transport"
    assert any(e.action == "binding" for e in scenario.events)


def test_parse_scenario_rejects_bad_directives(tmp_path):
    for text in ["frobnicate x\n", "channel default latency=abc\n",
                 "provider p1 battery=90\nservice p2 k name=\"x\"\n",
                 "config bogus_field=1\n"]:
        with pytest.raises(ScenarioError):
            parse_scenario(text, tmp_path)


def test_load_scenario_missing_file_is_scenario_error(tmp_path):
    with pytest.raises(ScenarioError):
        load_scenario(tmp_path / "missing.scn")


def test_config_override_directive():
    scenario = parse_scenario(
        "config heartbeat_period=2.5 miss_threshold=4\nnavigator nav1\n")
    assert scenario.config.heartbeat_period == 2.5
    assert scenario.config.miss_threshold == 4


# -- invariant checker on doctored input ------------------------------------------------

def test_duplicate_reply_detected_with_event_index():
    sim, _ = run_once()
    verdicts = assert_invariants(sim)
    assert all(v.passed for v in verdicts)
    # Doctor the log: duplicate the first iq result send record.
    from mobreg.stanza import StanzaKind
    for record in sim.traffic:
        if record.kind != "send":
            continue
        stanza = decode(record.data)
        if stanza.kind is StanzaKind.IQ and stanza.type_attr == "result":
            sim.traffic.append(TrafficRecord(
                len(sim.traffic), sim.traffic[-1].time_us, "send",
                record.frm, record.to, record.data))
            break
    verdict = next(v for v in assert_invariants(sim)
                   if v.name == "reply-correlation")
    assert not verdict.passed
    assert verdict.event_index == len(sim.traffic) - 1
    assert "duplicate reply" in verdict.detail


def test_chaos_duplicate_reply_scenario_fails_invariants():
    scenario = load_scenario(scenarios_dir() / "doctored.scn")
    sim = Simulator(scenario)
    sim.run()
    verdicts = {v.name: v for v in assert_invariants(sim)}
    assert not verdicts["reply-correlation"].passed
    assert verdicts["reply-correlation"].event_index is not None


def test_shedding_drops_excess_requests_but_keeps_invariants():
    scenario = load_scenario(scenarios_dir() / "contention.scn")
    sim = Simulator(scenario)
    report = sim.run()
    shed = [m for m in report.metrics if m.metric == "shed"]
    assert shed, "the burst must exceed the configured capacity"
    assert all(v.passed for v in assert_invariants(sim))


def test_run_report_csv_shape():
    _, report = run_once()
    lines = report.metrics_csv().decode().splitlines()
    assert lines[0] == "metric,time_s,node,key,value"
    assert all(len(line.split(",")) == 5 for line in lines[1:])
    sent = [line for line in lines if line.startswith("bytes_sent")]
    assert sent, "per-node byte totals must be reported"
