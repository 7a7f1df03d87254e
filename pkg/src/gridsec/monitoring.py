"""ICT status board and disturbance classification.

The board tracks heartbeats, uplink states and data freshness per field
device. ``classify_disturbance`` runs an ordered rule table over the board,
the SCADA process image and breaker events to tell ICT faults from primary
equipment faults and from suspected manipulation.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Union

VERDICTS = ("ictFault", "primaryFault", "securitySuspect", "unknown", "none")

RULE_TABLE = (
    ("a", "ictFault", "datapoints stale, device unreachable and its uplink down"),
    ("b", "primaryFault", "device reachable, breaker reported open, flows consistent with the open breaker"),
    ("c", "securitySuspect", "datapoints fresh while balance-residual alerts are active"),
    ("d", "unknown", "indicators present but no rule matched"),
)


@dataclass(frozen=True)
class MonitoringConfig:
    heartbeat_period_ms: int = 10_000
    missed_heartbeats: int = 3
    stale_after_ms: int = 3000
    flow_tolerance_pu: float = 0.05

    @property
    def unreachable_after_ms(self) -> int:
        return self.heartbeat_period_ms * self.missed_heartbeats


@dataclass(frozen=True)
class DeviceStatus:
    device_id: str
    reachable: bool = True
    last_heartbeat_ms: int = 0
    link_states: tuple[tuple[str, bool], ...] = ()
    freshness_ms: tuple[tuple[int, int], ...] = ()

    @property
    def uplink_down(self) -> bool:
        return any(not up for _, up in self.link_states)

    def stale(self, stale_after_ms: int) -> bool:
        return any(age > stale_after_ms for _, age in self.freshness_ms)


@dataclass(frozen=True)
class StatusBoard:
    t_ms: int
    devices: tuple[DeviceStatus, ...]
    config: MonitoringConfig = field(default_factory=MonitoringConfig)
    start_ms: int = 0

    def device(self, device_id: str) -> DeviceStatus:
        for d in self.devices:
            if d.device_id == device_id:
                return d
        raise KeyError(device_id)


@dataclass(frozen=True)
class Heartbeat:
    device_id: str
    t_ms: int


@dataclass(frozen=True)
class LinkChange:
    link_id: str
    up: bool
    t_ms: int


@dataclass(frozen=True)
class FreshnessTick:
    t_ms: int
    last_update: Mapping[int, int]


BoardEvent = Union[Heartbeat, LinkChange, FreshnessTick]


@dataclass(frozen=True)
class BreakerOpen:
    """A breaker the process image reports open although it is normally closed."""

    branch_id: str
    device_id: str
    flow_ioa: int | None


@dataclass(frozen=True)
class FaultClassification:
    verdict: str
    rationale: tuple[str, ...] = ()
    devices: tuple[str, ...] = ()


def initial_board(devices: Mapping[str, tuple[Iterable[int], Iterable[str]]],
                  config: MonitoringConfig = MonitoringConfig(), start_ms: int = 0) -> StatusBoard:
    """``devices`` maps device id to (owned ioas, attached links)."""
    statuses = tuple(
        DeviceStatus(d, True, start_ms, tuple((link, True) for link in sorted(links)),
                     tuple((ioa, 0) for ioa in sorted(ioas)))
        for d, (ioas, links) in sorted(devices.items())
    )
    return StatusBoard(start_ms, statuses, config, start_ms)


def _map(board: StatusBoard, fn) -> tuple[DeviceStatus, ...]:
    return tuple(fn(d) for d in board.devices)


def update_status(board: StatusBoard, event: BoardEvent) -> StatusBoard:
    t = max(board.t_ms, event.t_ms)
    if isinstance(event, Heartbeat):
        def fn(d):
            if d.device_id != event.device_id:
                return d
            return replace(d, reachable=True, last_heartbeat_ms=max(d.last_heartbeat_ms, event.t_ms))
    elif isinstance(event, LinkChange):
        def fn(d):
            links = tuple((lid, event.up if lid == event.link_id else up) for lid, up in d.link_states)
            return replace(d, link_states=links)
    elif isinstance(event, FreshnessTick):
        limit = board.config.unreachable_after_ms

        def fn(d):
            fresh = tuple((ioa, t - event.last_update.get(ioa, board.start_ms)) for ioa, _ in d.freshness_ms)
            return replace(d, freshness_ms=fresh, reachable=t - d.last_heartbeat_ms < limit)
    else:
        raise TypeError(f"unsupported board event {event!r}")
    return replace(board, t_ms=t, devices=_map(board, fn))


def classify_disturbance(board: StatusBoard, process_image: Mapping[int, float],
                         grid_events: Iterable[BreakerOpen], residual_alerts: int = 0) -> FaultClassification:
    """Ordered rule table; the first matching rule decides."""
    cfg = board.config
    grid_events = list(grid_events)
    for d in board.devices:
        if d.stale(cfg.stale_after_ms) and not d.reachable and d.uplink_down:
            return FaultClassification("ictFault", ("staleness", "unreachable", "linkDown"), (d.device_id,))
    reachable = {d.device_id for d in board.devices if d.reachable}
    hits = []
    for ev in grid_events:
        if ev.device_id not in reachable:
            continue
        if ev.flow_ioa is None or abs(process_image.get(ev.flow_ioa, 0.0)) <= cfg.flow_tolerance_pu:
            hits.append(ev.device_id)
    if hits:
        return FaultClassification("primaryFault", ("reachable", "breakerOpen", "flowsConsistent"),
                                   tuple(sorted(set(hits))))
    all_fresh = not any(d.stale(cfg.stale_after_ms) for d in board.devices)
    if all_fresh and residual_alerts > 0:
        return FaultClassification("securitySuspect", ("fresh", "residualAlerts"))
    indicators = (
        any(d.stale(cfg.stale_after_ms) or not d.reachable or d.uplink_down for d in board.devices)
        or grid_events or residual_alerts > 0
    )
    if indicators:
        return FaultClassification("unknown")
    return FaultClassification("none")


def snapshot(board: StatusBoard, classification: FaultClassification | None = None) -> dict:
    """Serializable board state ordered by device id."""
    out = {
        "tMs": board.t_ms,
        "devices": [
            {
                "device": d.device_id,
                "reachable": d.reachable,
                "lastHeartbeatMs": d.last_heartbeat_ms,
                "links": {lid: up for lid, up in d.link_states},
                "maxAgeMs": max((age for _, age in d.freshness_ms), default=0),
            }
            for d in sorted(board.devices, key=lambda d: d.device_id)
        ],
    }
    if classification is not None:
        out["verdict"] = classification.verdict
        out["rationale"] = list(classification.rationale)
        out["suspectDevices"] = list(classification.devices)
    return out
