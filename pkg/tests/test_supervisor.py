import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bsentinel.digest_core import ChallengeMessage, md5_digest
from bsentinel.errors import ConfigError, LifecycleError, SupervisorSuspect
from bsentinel.events import EventLog
from bsentinel.state_machine import NodeState
from bsentinel.supervisor import (
    Action,
    ActionKind,
    ReplicationMode,
    Reply,
    ShutdownReason,
    Supervisor,
    SupervisorConfig,
    adaptive_challenge_count,
    fixed_challenge_count,
    precompute,
    replication_table,
    required_replicas,
)

S0, S1, S2 = NodeState.S0, NodeState.S1, NodeState.S2
M = ChallengeMessage(bytes(range(64)))
H = md5_digest(M)
WRONG = md5_digest(M.flip_bit(5))
BASE = {0: 100.0, 1: 120.0, 2: 150.0}  # U = 150, supremum = 225


def responder(latencies=BASE, wrong=(), silent=()):
    def respond(nid, rnd):
        if nid in silent:
            return None
        return Reply(WRONG if nid in wrong else H, latencies[nid])
    return respond


def make(j=10, cap=16, q_limit=3, qos=None):
    cfg = precompute(M, BASE, 3, responder(), interval_j=j, m_cap=cap, q_limit=q_limit, qos_threshold_us=qos)
    sup = Supervisor(cfg, EventLog())
    recs = {nid: sup.admit(nid, cfg.baseline[nid], tick=0) for nid in BASE}
    return sup, recs


def ok(latency):
    return Reply(H, latency)


# -- precompute -----------------------------------------------------------

def test_precompute_admits_healthy_nodes():
    cfg = precompute(M, BASE, 3, responder())
    assert len(cfg.baseline) == 3 and cfg.rejected == ()
    assert cfg.expected == H
    assert cfg.baseline.upper_bound == 150 and cfg.baseline.supremum == 225
    assert cfg.qos_threshold_us == cfg.baseline.supremum


def test_precompute_rejects_wrong_digest():
    cfg = precompute(M, BASE, 3, responder(wrong={1}))
    assert cfg.rejected == (1,)
    assert len(cfg.baseline) == 2 and 1 not in cfg.baseline


def test_precompute_all_wrong_suspects_supervisor():
    with pytest.raises(SupervisorSuspect) as exc:
        precompute(M, BASE, 3, responder(wrong={0, 1, 2}))
    assert exc.value.node_ids == (0, 1, 2)


def test_precompute_rejects_silent_nodes():
    cfg = precompute(M, BASE, 3, responder(silent={2}))
    assert cfg.rejected == (2,)
    assert cfg.baseline.upper_bound == 120
    with pytest.raises(ConfigError):
        precompute(M, BASE, 3, responder(silent={0, 1, 2}))


def test_precompute_preconditions():
    with pytest.raises(ConfigError):
        precompute(M, [], 3, responder())
    with pytest.raises(ConfigError):
        precompute(M, BASE, 0, responder())


def test_config_requires_matching_digest():
    cfg = precompute(M, BASE, 1, responder())
    with pytest.raises(ConfigError):
        SupervisorConfig(M, WRONG, cfg.baseline, 200.0)
    with pytest.raises(ConfigError):
        SupervisorConfig(M, H, cfg.baseline, 200.0, interval_j=0)
    with pytest.raises(ConfigError):
        SupervisorConfig(M, H, cfg.baseline, 0.0)


def test_action_reason_pairing():
    with pytest.raises(ValueError):
        Action(ActionKind.SHUTDOWN_AND_REPLACE)
    with pytest.raises(ValueError):
        Action(ActionKind.CONTINUE, ShutdownReason.TIMEOUT)


# -- monitoring ----------------------------------------------------------

@pytest.mark.parametrize("response,kind", [(80, ActionKind.CONTINUE), (150, ActionKind.CHECKPOINT),
                                           (400, ActionKind.CHECKPOINT)])
def test_monitor_tick_against_qos(response, kind):
    sup, recs = make(qos=150.0)
    rec = recs[0]
    assert sup.monitor_tick(rec, response, 7, payload=42).kind is kind
    if kind is ActionKind.CHECKPOINT:
        assert rec.checkpoint.captured_at == 7 and rec.checkpoint.payload == 42
    else:
        assert rec.checkpoint is None


def test_checksum_mismatch_shuts_down():
    sup, recs = make()
    a = sup.checksum_challenge(recs[0], Reply(WRONG, 100.0), 10)
    assert a.reason is ShutdownReason.CHECKSUM_ERROR and recs[0].state is S2


def test_matching_digest_goes_to_delay_path():
    sup, recs = make()
    assert sup.checksum_challenge(recs[0], ok(100.0), 10).kind is ActionKind.CONTINUE
    assert [e.kind for e in sup.log] == ["reply", "classify"]


@pytest.mark.parametrize("reply", [None, Reply(H, 6000.0)])
def test_silence_is_a_timeout(reply):
    sup, recs = make()
    a = sup.checksum_challenge(recs[0], reply, 10)
    assert a.reason is ShutdownReason.TIMEOUT and recs[0].state is S2


def test_delay_path_examples():
    sup, recs = make()
    r = recs[0]
    assert sup.compare_delay_variation(r, 90.0, 10).kind is ActionKind.CONTINUE
    assert r.state is S0 and r.m == 2
    sup.compare_delay_variation(r, 200.0, 30)
    assert (r.state, r.m, r.q) == (S1, 1, 1)
    a = sup.compare_delay_variation(r, 300.0, 40)
    assert a.reason is ShutdownReason.EXTREME_DELAY and r.state is S2


def test_stepping_a_fail_stop_record_is_an_error():
    sup, recs = make()
    sup.checksum_challenge(recs[0], None, 10)
    with pytest.raises(LifecycleError):
        sup.checksum_challenge(recs[0], ok(100.0), 11)
    with pytest.raises(LifecycleError):
        sup.monitor_tick(recs[0], 100.0, 11)


# -- interval schedule ----------------------------------------------------

def test_quiet_node_due_times_stretch():
    sup, recs = make(j=10)
    r = recs[1]
    dues = [r.next_due]
    for _ in range(3):
        sup.compare_delay_variation(r, 120.0, r.next_due)
        dues.append(r.next_due)
    assert dues == [10, 30, 60, 100]


def test_s1_resets_interval_and_recovery_resets_q():
    sup, recs = make(j=10)
    r = recs[0]
    for _ in range(3):
        sup.compare_delay_variation(r, 100.0, r.next_due)
    assert r.m == 4
    sup.compare_delay_variation(r, 200.0, r.next_due)
    assert (r.state, r.m, r.q, r.next_due - 100) == (S1, 1, 1, 10)
    sup.compare_delay_variation(r, 200.0, r.next_due)
    assert r.q == 2
    sup.compare_delay_variation(r, 100.0, r.next_due)
    assert (r.state, r.m, r.q) == (S0, 1, 0)
    t = r.next_due
    sup.compare_delay_variation(r, 100.0, t)
    assert r.next_due == t + 2 * 10


def test_three_successive_high_intervals_shut_down():
    sup, recs = make()
    r = recs[0]
    actions = [sup.compare_delay_variation(r, 200.0, 10 * (i + 1)) for i in range(3)]
    assert [a.kind for a in actions[:2]] == [ActionKind.CONTINUE] * 2
    assert actions[2].reason is ShutdownReason.PERSISTENT_HIGH
    assert r.q == 3 and r.state is S2


def test_interval_multiplier_is_capped():
    sup, recs = make(j=1, cap=4)
    r = recs[0]
    for _ in range(10):
        sup.compare_delay_variation(r, 100.0, r.next_due)
    assert r.m == 4


def brute_force_schedule(horizon, j, cap):
    """Walk a quiet node tick by tick; count evaluations in 0..horizon."""
    m, due, count = 1, j, 0
    for t in range(horizon + 1):
        if t >= due:
            count += 1
            m = min(m + 1, cap)
            due = t + m * j
    return count


@settings(max_examples=150, deadline=None)
@given(st.integers(1, 3000), st.integers(1, 30), st.integers(1, 20))
def test_closed_form_schedule_matches_brute_force(horizon, j, cap):
    assert adaptive_challenge_count(horizon, j, cap) == brute_force_schedule(horizon, j, cap)


@settings(max_examples=100, deadline=None)
@given(st.integers(1, 2000), st.integers(1, 20))
def test_uncapped_schedule_is_triangular(horizon, j):
    largest = max(m for m in range(0, horizon + 2) if j * m * (m + 1) // 2 <= horizon)
    assert adaptive_challenge_count(horizon, j, m_cap=10**6) == largest


@given(st.integers(1, 20), st.integers(2, 16), st.data())
def test_adaptive_beats_fixed_beyond_three_intervals(j, cap, data):
    horizon = data.draw(st.integers(3 * j + 1, 200 * j))
    assert adaptive_challenge_count(horizon, j, cap) < fixed_challenge_count(horizon, j)


def test_supervisor_schedule_agrees_with_oracle():
    sup, recs = make(j=10)
    r = recs[2]
    count = 0
    for t in range(2001):
        if r in sup.due(t):
            sup.issue_challenge(r, t)
            sup.checksum_challenge(r, ok(150.0), t)
            count += 1
    assert count == adaptive_challenge_count(2000, 10, 16) == brute_force_schedule(2000, 10, 16)


# -- invariants over random delay sequences --------------------------------

LATENCY_FOR = {"low": 90.0, "normal": 100.0, "high": 200.0}


@settings(max_examples=200, deadline=None)
@given(st.lists(st.sampled_from(["low", "normal", "high"]), max_size=40))
def test_record_invariants_hold(seq):
    sup, recs = make(j=5, cap=6)
    r = recs[0]
    run = 0
    for cls in seq:
        a = sup.compare_delay_variation(r, LATENCY_FOR[cls], r.next_due)
        run = run + 1 if cls == "high" else 0
        if a.is_shutdown:
            assert a.reason is ShutdownReason.PERSISTENT_HIGH and run == 3
            break
        assert r.q <= 2 and r.m >= 1 and r.m <= 6
        assert (r.q > 0) <= (r.state is S1)
        if r.state is S1:
            assert r.m == 1 and r.q == run


def test_every_shutdown_follows_its_observation():
    sup, recs = make()
    sup.checksum_challenge(recs[0], Reply(WRONG, 100.0), 10)
    sup.checksum_challenge(recs[1], ok(500.0), 10)
    sup.checksum_challenge(recs[2], None, 10)
    events = list(sup.log)
    for i, ev in enumerate(events):
        if ev.kind != "shutdown":
            continue
        before = [e for e in events[:i] if e.node == ev.node]
        reason = ev.payload["reason"]
        if reason == "checksum-error":
            assert any(e.kind == "reply" and e.payload["match"] is False for e in before)
        elif reason == "timeout":
            assert any(e.kind == "reply" and e.payload["timeout"] for e in before)
        elif reason == "extreme-delay":
            assert any(e.kind == "classify" and e.payload["delay_class"] == "extreme" for e in before)


# -- replacement -----------------------------------------------------------

def test_replacement_resumes_from_checkpoint():
    sup, recs = make()
    r = recs[0]
    sup.capture_checkpoint(r, 500, payload=500)
    sup.checksum_challenge(r, Reply(WRONG, 100.0), 510)
    fresh = sup.replace_node(r, 99, 510)
    assert (fresh.state, fresh.m, fresh.q) == (S0, 1, 0)
    assert fresh.baseline_us == r.baseline_us and fresh.next_due == 520
    assert fresh.checkpoint.captured_at == 500
    ev = sup.log.of_kind("replace")[-1]
    assert ev.payload == {"new_node": 99, "cold": False, "resume_tick": 500, "resume_position": 500}
    assert 0 in sup.retired and 0 not in sup.records


def test_replacement_without_checkpoint_is_cold():
    sup, recs = make()
    sup.checksum_challenge(recs[1], None, 5)
    sup.replace_node(recs[1], 50, 5)
    assert sup.log.of_kind("replace")[-1].payload["cold"] is True


def test_replacement_requires_fail_stop_and_fresh_id():
    sup, recs = make()
    with pytest.raises(LifecycleError):
        sup.replace_node(recs[0], 10, 1)
    sup.checksum_challenge(recs[0], None, 1)
    with pytest.raises(ValueError):
        sup.replace_node(recs[0], 1, 1)


def test_two_shutdowns_in_one_tick_are_independent():
    sup, recs = make()
    sup.checksum_challenge(recs[0], None, 20)
    sup.checksum_challenge(recs[1], Reply(WRONG, 120.0), 20)
    a = sup.replace_node(recs[0], 10, 20)
    b = sup.replace_node(recs[1], 11, 20)
    assert (a.baseline_us, b.baseline_us) == (100.0, 120.0)
    assert len(sup.log.of_kind("replace")) == 2 and set(sup.records) == {2, 10, 11}


# -- replication -------------------------------------------------------------

def test_replica_examples():
    assert replication_table(1) == {"crash": 2, "byzantine-classic": 4, "byzantine-with-checksum": 2}
    assert set(replication_table(0).values()) == {1}
    assert required_replicas(3, "byzantine-classic") == 10
    assert required_replicas(3, ReplicationMode.BYZANTINE_WITH_CHECKSUM) == 4
    with pytest.raises(ValueError):
        required_replicas(-1, "crash")


@given(st.integers(0, 10_000))
def test_checksum_replication_equals_crash(k):
    assert required_replicas(k, "byzantine-with-checksum") == required_replicas(k, "crash") == k + 1
