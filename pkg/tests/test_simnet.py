import math
from collections import Counter

import numpy as np
import pytest

from bsentinel.digest_core import ChallengeMessage, md5_digest
from bsentinel.errors import ConfigError, InjectionError
from bsentinel.simnet import (
    FaultMode,
    Injection,
    ScenarioConfig,
    Simulation,
    TransientLink,
    VirtualNode,
    challenge_message,
    load_scenario,
    node_respond_challenge,
    parse_injections,
    run_scenario,
    sample_response_time,
    scenario_from_ini,
)

M = ChallengeMessage(bytes(64))


def run(**kw):
    sim = Simulation(ScenarioConfig(**kw))
    sim.run()
    return sim


def inject(mode, frac, tick):
    return (Injection(FaultMode(mode), frac, tick),)


def injected_nodes(log, mode):
    return {e.node: e.tick for e in log.of_kind("inject") if e.payload["mode"] == mode}


def test_all_healthy_pool_stays_fail_safe():
    sim = run(n=10, horizon=1000)
    assert not sim.log.of_kind("shutdown")
    assert not sim.log.of_kind("transition")
    assert set(sim.final_states().values()) == {"S0"}


def test_corrupt_nodes_fail_their_first_challenge_after_activation():
    sim = run(n=10, horizon=1000, seed=5, injections=inject("byzantine-corrupt", 0.2, 100))
    log = sim.log
    nodes = injected_nodes(log, "byzantine-corrupt")
    assert len(nodes) == 2
    for node, t0 in nodes.items():
        first = min(e.tick for e in log.of_kind("challenge") if e.node == node and e.tick >= t0)
        (down,) = [e for e in log.of_kind("shutdown") if e.node == node]
        assert down.tick == first and down.payload["reason"] == "checksum-error"


def test_corruption_visible_from_tick_zero():
    sim = run(n=4, horizon=200, seed=2, injections=inject("byzantine-corrupt", 0.25, 0))
    (node,) = injected_nodes(sim.log, "byzantine-corrupt")
    (down,) = [e for e in sim.log.of_kind("shutdown") if e.node == node]
    assert down.tick == 10


def test_fail_stop_times_out_from_activation():
    sim = run(n=10, horizon=1000, seed=1, injections=inject("fail-stop", 0.1, 500))
    (node,) = injected_nodes(sim.log, "fail-stop")
    (down,) = [e for e in sim.log.of_kind("shutdown") if e.node == node]
    assert down.tick == 500 and down.payload["reason"] == "timeout"


def test_concealed_nodes_leave_only_on_delay():
    sim = run(n=40, horizon=500, seed=4, injections=inject("concealed-malicious", 0.25, 50))
    nodes = injected_nodes(sim.log, "concealed-malicious")
    reasons = Counter(e.payload["reason"] for e in sim.log.of_kind("shutdown") if e.node in nodes)
    assert reasons == {"extreme-delay": len(nodes)}
    assert all(e.payload["match"] is not False for e in sim.log.of_kind("reply") if e.node in nodes)


def test_degraded_nodes_exit_after_persistent_high():
    sim = run(n=40, horizon=500, seed=4, injections=inject("degraded", 0.1, 50))
    nodes = injected_nodes(sim.log, "degraded")
    downs = [e for e in sim.log.of_kind("shutdown") if e.node in nodes]
    assert len(downs) == len(nodes) and {e.payload["reason"] for e in downs} == {"persistent-high"}


def test_crash_only_detector_misses_corruption():
    cfg = ScenarioConfig(n=20, horizon=600, seed=8, injections=inject("byzantine-corrupt", 0.1, 100))
    with_ck, _ = run_scenario(cfg)
    without, report = run_scenario(cfg.with_overrides(checksum_enabled=False))
    assert len(with_ck.of_kind("shutdown")) == 2
    assert not without.of_kind("shutdown")
    assert report.detection["byzantine-corrupt"].rate == 0.0
    assert all(e.payload["digest"] is None for e in without.of_kind("reply"))


def test_same_seed_same_bytes_and_other_seed_differs():
    cfg = ScenarioConfig(n=30, horizon=400, seed=3, link_p=0.01,
                         injections=inject("byzantine-corrupt", 0.1, 40) + inject("degraded", 0.1, 80))
    a, ra = run_scenario(cfg)
    b, rb = run_scenario(cfg)
    assert a.to_ndjson() == b.to_ndjson() and ra.to_dict() == rb.to_dict()
    c, _ = run_scenario(cfg.with_overrides(seed=4))
    assert c.to_ndjson() != a.to_ndjson()


def test_node_conservation_and_replacement_pairing():
    cfg = ScenarioConfig(n=50, horizon=800, seed=9, link_p=0.005,
                         injections=inject("fail-stop", 0.1, 100) + inject("byzantine-corrupt", 0.1, 200)
                         + inject("concealed-malicious", 0.1, 300))
    log, _ = run_scenario(cfg)
    active = set(range(cfg.n))
    last_tick = -1
    events = list(log)
    for i, ev in enumerate(events):
        assert ev.tick >= last_tick
        last_tick = ev.tick
        if ev.kind == "shutdown":
            nxt = events[i + 1]
            assert nxt.kind == "replace" and nxt.node == ev.node and nxt.tick == ev.tick
            active.remove(ev.node)
            active.add(nxt.payload["new_node"])
        assert len(active) == cfg.n
    assert len(log.of_kind("shutdown")) == len(log.of_kind("replace"))


def test_replacements_resume_from_checkpointed_position():
    sim = run(n=10, horizon=300, seed=6, injections=inject("byzantine-corrupt", 0.3, 100))
    for ev in sim.log.of_kind("replace"):
        assert ev.payload["cold"] is False
        cps = [e for e in sim.log.of_kind("checkpoint") if e.node == ev.node and e.tick <= ev.tick]
        assert ev.payload["resume_position"] == cps[-1].payload["position"]
        assert ev.payload["resume_position"] == ev.tick + 1


def test_transient_link_corruption_hits_healthy_nodes():
    sim = run(n=20, horizon=500, seed=2, link_p=0.2)
    reasons = Counter(e.payload["reason"] for e in sim.log.of_kind("shutdown"))
    assert reasons and set(reasons) == {"checksum-error"}


# -- node behaviour ----------------------------------------------------------

def node(mode=FaultMode.HEALTHY, **kw):
    return VirtualNode(0, 0, math.log(100.0), 0.01, mode=mode, **kw)


def test_responses_per_mode():
    rng = np.random.default_rng(0)
    h = md5_digest(M)
    r = node_respond_challenge(node(), M, rng)
    assert r.digest == h and 90 < r.latency_us < 110
    bad = node_respond_challenge(node(FaultMode.BYZANTINE_CORRUPT, corrupt_bit=17), M, rng)
    assert bad.digest != h
    hidden = node_respond_challenge(node(FaultMode.CONCEALED_MALICIOUS, extra_us=500.0), M, rng)
    assert hidden.digest == h and hidden.latency_us >= 500
    assert node_respond_challenge(node(FaultMode.FAIL_STOP), M, rng) is None
    assert node_respond_challenge(node(), M, rng, heartbeat=True).digest is None
    with pytest.raises(InjectionError):
        node_respond_challenge(node(retired=True), M, rng)


def test_corrupt_path_is_deterministic():
    rng = np.random.default_rng(0)
    n = node(FaultMode.BYZANTINE_CORRUPT, corrupt_bit=300)
    assert node_respond_challenge(n, M, rng).digest == node_respond_challenge(n, M, rng).digest


def test_latency_samples():
    rng = np.random.default_rng(1)
    healthy = [sample_response_time(node(), rng) for _ in range(20_000)]
    slow = [sample_response_time(node(FaultMode.DEGRADED, degradation=2.0), rng) for _ in range(20_000)]
    assert abs(np.median(healthy) - 100) < 1
    assert abs(np.median(slow) / np.median(healthy) - 2.0) < 0.02
    assert min(healthy) > 0
    assert sample_response_time(node(FaultMode.FAIL_STOP), rng) == math.inf


def test_lognormal_support_is_positive():
    rng = np.random.default_rng(2)
    assert (rng.lognormal(math.log(100.0), 0.5, 1_000_000) > 0).all()


def test_link_flips_exactly_one_bit():
    rng = np.random.default_rng(3)
    h = md5_digest(M)
    out = TransientLink(1.0).transmit(h, rng)
    assert bin(int.from_bytes(out.bytes, "big") ^ int.from_bytes(h.bytes, "big")).count("1") == 1
    assert TransientLink(0.0).transmit(h, rng) == h
    with pytest.raises(ConfigError):
        TransientLink(1.5)


# -- injection API -----------------------------------------------------------

def test_manual_injection_is_logged():
    sim = Simulation(ScenarioConfig(n=5, horizon=100))
    sim.inject_fault(3, FaultMode.DEGRADED, 0)
    (ev,) = sim.log.of_kind("inject")
    assert ev.node == 3 and ev.payload["mode"] == "degraded"


def test_injection_errors():
    sim = run(n=5, horizon=200, seed=1, injections=inject("fail-stop", 0.2, 10))
    (gone,) = [e.node for e in sim.log.of_kind("shutdown")]
    with pytest.raises(InjectionError):
        sim.inject_fault(gone, FaultMode.DEGRADED, 100)
    with pytest.raises(InjectionError):
        sim.inject_fault(999, FaultMode.DEGRADED, 100)
    with pytest.raises(InjectionError):
        sim.inject_fault(0, FaultMode.DEGRADED, 201)


# -- configuration -------------------------------------------------------------

@pytest.mark.parametrize("kw", [
    {"n": 0}, {"horizon": 0}, {"latency_median_us": 0}, {"degradation_factor": 0.5},
    {"link_p": -0.1}, {"calibration_rounds": 0}, {"message_hex": "00"},
    {"injections": inject("degraded", 0.6, 1) + inject("fail-stop", 0.6, 1)},
    {"injections": inject("degraded", 0.1, 5000)},
])
def test_invalid_scenarios_fail_before_tick_zero(kw):
    with pytest.raises(ConfigError):
        ScenarioConfig(**kw)


def test_config_error_when_calibration_cannot_separate_thresholds():
    with pytest.raises(ConfigError):
        Simulation(ScenarioConfig(latency_median_us=0.5, latency_spread=0.0))


INI = """
[scenario]
n = 12
horizon = 300
seed = 4

[latency]
median_us = 200
concealed_extra_us = auto

[link]
corruption_p = 0.01

[supervisor]
interval_j = 5
checksum = no
qos_threshold_us = none

[faults]
byzantine-corrupt = 0.25@10, 0.25@20
"""


def test_ini_parsing():
    cfg = scenario_from_ini(INI)
    assert (cfg.n, cfg.horizon, cfg.seed, cfg.interval_j) == (12, 300, 4, 5)
    assert cfg.latency_median_us == 200 and cfg.link_p == 0.01
    assert cfg.checksum_enabled is False and cfg.qos_threshold_us is None
    assert cfg.injections == (Injection(FaultMode.BYZANTINE_CORRUPT, 0.25, 10),
                              Injection(FaultMode.BYZANTINE_CORRUPT, 0.25, 20))


@pytest.mark.parametrize("text", [
    "[nope]\nx = 1\n",
    "[scenario]\nbogus = 1\n",
    "[scenario]\nn = ten\n",
    "[faults]\nzombie = 0.1@1\n",
    "[faults]\ndegraded = 0.1\n",
    "not an ini file",
])
def test_ini_rejections(text):
    with pytest.raises(ConfigError):
        scenario_from_ini(text)


def test_load_scenario_missing_file(tmp_path):
    with pytest.raises(ConfigError):
        load_scenario(tmp_path / "missing.ini")


def test_parse_injections_skips_blanks():
    assert parse_injections(FaultMode.DEGRADED, " 0.1@3 , ,") == [Injection(FaultMode.DEGRADED, 0.1, 3)]


def test_challenge_message_from_seed_or_hex():
    cfg = ScenarioConfig(seed=12)
    assert challenge_message(cfg) == Simulation(cfg).message
    pinned = cfg.with_overrides(message_hex="ab" * 64)
    assert challenge_message(pinned).payload == bytes([0xAB]) * 64


def test_log_header_describes_the_run():
    sim = Simulation(ScenarioConfig(n=3, horizon=50, seed=1))
    meta = sim.log.meta
    assert meta["n"] == 3 and meta["horizon"] == 50 and meta["source"] == "simnet"
    assert meta["expected_digest"] == md5_digest(sim.message).hex
    assert meta["supremum_us"] > meta["upper_bound_us"]
