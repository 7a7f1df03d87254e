"""Group alerts into incidents and score devices for compromise."""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass
from typing import Iterable, Mapping

WEIGHTS = {"info": 0.1, "warning": 0.3, "critical": 0.6}
ADJACENT_FACTOR = 0.5
DEFAULT_WINDOW_MS = 60_000
DEFAULT_HOPS = 2


@dataclass(frozen=True)
class Incident:
    incident_id: str
    member_alerts: tuple
    involved_devices: tuple[str, ...]
    timeline: tuple[tuple[int, str], ...]
    root_suspect: str


@dataclass(frozen=True)
class DeviceAssessment:
    device: str
    score: float
    band: str
    incidents: tuple[str, ...]


def band(score: float) -> str:
    if score < 0.2:
        return "clear"
    if score < 0.6:
        return "suspect"
    return "compromised"


def _adjacency(topology) -> dict[str, list[str]]:
    if isinstance(topology, Mapping):
        return {k: sorted(v) for k, v in topology.items()}
    return {n: topology.neighbours(n) for n in sorted(topology.nodes)}


def hop_distances(adj: Mapping[str, list[str]], src: str) -> dict[str, int]:
    dist = {src: 0}
    queue = deque([src])
    while queue:
        cur = queue.popleft()
        for nxt in adj.get(cur, ()):
            if nxt not in dist:
                dist[nxt] = dist[cur] + 1
                queue.append(nxt)
    return dist


def _devices(alert) -> tuple[str, ...]:
    return tuple(sorted({alert.source_node, alert.subject_device}))


def _sort_key(alert):
    return (alert.t_ms, alert.layer, alert.rule_id, alert.source_node, alert.subject_device, alert.anchor,
            alert.count, json.dumps(alert.evidence, sort_keys=True))


def correlate(alerts: Iterable, topology, window_ms: int = DEFAULT_WINDOW_MS, hops: int = DEFAULT_HOPS) -> list[Incident]:
    """Union alerts that are close in time and within ``hops`` graph hops."""
    alerts = sorted(alerts, key=_sort_key)
    if not alerts:
        return []
    adj = _adjacency(topology)
    dist_cache: dict[str, dict[str, int]] = {}

    def near(a: str, b: str) -> bool:
        if a == b:
            return True
        if a not in dist_cache:
            dist_cache[a] = hop_distances(adj, a)
        return dist_cache[a].get(b, hops + 1) <= hops

    parent = list(range(len(alerts)))

    def find(i):
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i, a in enumerate(alerts):
        for j in range(i + 1, len(alerts)):
            b = alerts[j]
            if b.t_ms - a.t_ms > window_ms:
                break
            if any(near(x, y) for x in _devices(a) for y in _devices(b)):
                parent[find(j)] = find(i)
    groups: dict[int, list] = {}
    for i, a in enumerate(alerts):
        groups.setdefault(find(i), []).append(a)
    incidents = []
    for n, members in enumerate(sorted(groups.values(), key=lambda g: _sort_key(g[0])), start=1):
        first_t = members[0].t_ms
        root = min(a.source_node for a in members if a.t_ms == first_t)
        devices = sorted({d for a in members for d in _devices(a)})
        timeline = tuple(
            (a.t_ms, f"{a.layer}/{a.rule_id} {a.source_node} -> {a.subject_device} ({a.severity}, x{a.count})")
            for a in members
        )
        incidents.append(Incident(f"INC-{n:03d}", tuple(members), tuple(devices), timeline, root))
    return incidents


def assess_compromise(incidents: Iterable[Incident], topology, weights: Mapping[str, float] = WEIGHTS,
                      adjacent_factor: float = ADJACENT_FACTOR) -> dict[str, DeviceAssessment]:
    """score(d) = 1 - prod(1 - w) over alerts at d, with halved weights for neighbours."""
    adj = _adjacency(topology)
    remaining: dict[str, float] = {}
    contributing: dict[str, set[str]] = {}
    for inc in incidents:
        for a in inc.member_alerts:
            w = weights[a.severity]
            at = set(_devices(a))
            near = {nb for d in at for nb in adj.get(d, ())} - at
            for d, weight in [(d, w) for d in sorted(at)] + [(d, w * adjacent_factor) for d in sorted(near)]:
                remaining[d] = remaining.get(d, 1.0) * (1.0 - weight)
                contributing.setdefault(d, set()).add(inc.incident_id)
    return {
        d: DeviceAssessment(d, 1.0 - remaining[d], band(1.0 - remaining[d]), tuple(sorted(contributing[d])))
        for d in sorted(remaining)
    }


def format_report(incidents: list[Incident], assessment: Mapping[str, DeviceAssessment]) -> str:
    """Readable timeline per incident followed by a JSON block."""
    lines = ["Incident report", "===============", ""]
    if not incidents:
        lines.append("No incidents.")
    for inc in incidents:
        lines.append(f"{inc.incident_id}  root suspect: {inc.root_suspect}")
        lines.append(f"  devices: {', '.join(inc.involved_devices)}")
        for t, summary in inc.timeline:
            lines.append(f"  {t / 1000:10.3f} s  {summary}")
        lines.append("  json: " + json.dumps({
            "incidentId": inc.incident_id,
            "rootSuspect": inc.root_suspect,
            "devices": list(inc.involved_devices),
            "alerts": len(inc.member_alerts),
            "firstMs": inc.timeline[0][0],
            "lastMs": inc.timeline[-1][0],
        }, separators=(",", ":")))
        lines.append("")
    lines += ["", "Compromise assessment", "---------------------"]
    for d in assessment.values():
        lines.append(f"  {d.device:<16} {d.score:.4f}  {d.band:<12} {', '.join(d.incidents)}")
    return "\n".join(lines) + "\n"
