import pytest

from gridsec.engine import run
from gridsec.monitoring import (
    BreakerOpen, FreshnessTick, Heartbeat, LinkChange, MonitoringConfig, classify_disturbance, initial_board,
    snapshot, update_status,
)
from gridsec.scenario import load_scenario_file

DEVICES = {
    "rtu1": ([1001, 1002], ["l_rtu1"]),
    "rtu2": ([2001, 2002], ["l_rtu2"]),
}


def board_at(t, last_update, beats=(), links=()):
    b = initial_board(DEVICES)
    for ev in sorted([*beats, *links], key=lambda e: e.t_ms):
        b = update_status(b, ev)
    return update_status(b, FreshnessTick(t, last_update))


def fresh(t):
    return {ioa: t for ioas, _ in DEVICES.values() for ioa in ioas}


def test_unreachable_after_three_missed_heartbeats():
    beats = [Heartbeat("rtu1", t) for t in range(0, 40_001, 10_000)] + [Heartbeat("rtu2", 20_000)]
    before = board_at(49_999, fresh(49_999), beats)
    after = board_at(50_000, fresh(50_000), beats)
    assert before.device("rtu2").reachable
    assert not after.device("rtu2").reachable  # 20 s + 3 x 10 s
    assert after.device("rtu1").reachable


def test_heartbeat_resumes():
    b = board_at(60_000, fresh(60_000))
    assert not b.device("rtu1").reachable
    b = update_status(b, Heartbeat("rtu1", 61_000))
    assert b.device("rtu1").reachable


def test_link_state_recorded():
    b = update_status(initial_board(DEVICES), LinkChange("l_rtu2", False, 5000))
    assert b.device("rtu2").uplink_down and not b.device("rtu1").uplink_down


def test_timestamps_monotone():
    b = update_status(initial_board(DEVICES), Heartbeat("rtu1", 9000))
    b = update_status(b, LinkChange("l_rtu1", False, 4000))
    assert b.t_ms == 9000


def test_ict_fault_rule():
    last = fresh(40_000)
    last.update({2001: 5000, 2002: 5000})
    b = board_at(40_000, last, [Heartbeat("rtu1", 40_000), Heartbeat("rtu2", 5000)],
                 [LinkChange("l_rtu2", False, 6000)])
    cls = classify_disturbance(b, {}, [])
    assert cls.verdict == "ictFault"
    assert cls.rationale == ("staleness", "unreachable", "linkDown")
    assert cls.devices == ("rtu2",)


def test_stale_but_reachable_is_unknown():
    last = fresh(10_000)
    last[2001] = 5000
    b = board_at(10_000, last, [Heartbeat("rtu1", 10_000), Heartbeat("rtu2", 10_000)])
    assert classify_disturbance(b, {}, []).verdict == "unknown"


def test_primary_fault_rule():
    b = board_at(10_000, fresh(10_000), [Heartbeat("rtu1", 10_000), Heartbeat("rtu2", 10_000)])
    trip = BreakerOpen("b12", "rtu2", 2002)
    assert classify_disturbance(b, {2002: 0.001}, [trip]).verdict == "primaryFault"
    # flow still present through a supposedly open breaker: not consistent
    assert classify_disturbance(b, {2002: 0.3}, [trip]).verdict == "unknown"


def test_security_suspect_rule():
    b = board_at(10_000, fresh(10_000), [Heartbeat("rtu1", 10_000), Heartbeat("rtu2", 10_000)])
    assert classify_disturbance(b, {}, [], residual_alerts=2).verdict == "securitySuspect"
    assert classify_disturbance(b, {}, []).verdict == "none"


def test_snapshot_ordering_and_determinism():
    b = board_at(10_000, fresh(10_000))
    s = snapshot(b)
    assert [d["device"] for d in s["devices"]] == ["rtu1", "rtu2"]
    assert snapshot(board_at(10_000, fresh(10_000))) == s


def test_config_property():
    assert MonitoringConfig().unreachable_after_ms == 30_000


def _decisive(name):
    verdicts = run(load_scenario_file(name)).metrics["monitoring"]["verdicts"]
    return [v for v in verdicts if v in ("ictFault", "primaryFault", "securitySuspect")]


@pytest.mark.parametrize("name,expected", [
    ("ict_outage", "ictFault"), ("primary_fault", "primaryFault"), ("fdi", "securitySuspect"),
])
def test_scenario_classification(name, expected):
    assert _decisive(name) == [expected]


def test_benign_board_all_reachable():
    art = run(load_scenario_file("default", {"duration_ms": 60_000, "schedule": [{"t_ms": 10_000, "interrogation": "all"}]}))
    import json
    snaps = [json.loads(line)["payload"] for line in art.monitoring_log]
    assert all(d["reachable"] for s in snaps for d in s["devices"])
    assert art.metrics["monitoring"]["verdicts"] == ["none"]
