"""Incident-response guidelines as an observation/action graph.

Operators start from an observation, pick one of its suggested actions and
record which observation the action produced. Sessions end when an action
with an escalation marker is taken.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, replace
from importlib import resources
from pathlib import Path
from typing import Iterable

import yaml

CATEGORIES = ("MEAS", "COMM", "DEVICE", "LOG", "GRID")
ROLES = ("controlRoom", "technician", "securityOfficer")
MAX_ESCALATION_STEPS = 10
_ID = re.compile(r"^(MEAS|COMM|DEVICE|LOG|GRID)\.\d{2}$")


class GuidelineError(Exception):
    pass


class DanglingReference(GuidelineError):
    pass


class UnreachableNode(GuidelineError):
    pass


class NoEscalationPath(GuidelineError):
    pass


class InvalidTransition(GuidelineError):
    pass


@dataclass(frozen=True)
class ObservationNode:
    id: str
    category: str
    description: str
    suggested_actions: tuple[str, ...]
    keywords: tuple[str, ...] = ()
    entry: bool = False
    terminal: bool = False

    def terms(self) -> set[str]:
        words = re.findall(r"[a-z0-9]+", self.description.lower())
        return set(words) | {k.lower() for k in self.keywords}


@dataclass(frozen=True)
class ActionNode:
    id: str
    instruction: str
    required_role: str
    expected_observations: tuple[str, ...]
    escalation: str | None = None


@dataclass(frozen=True)
class GuidelineGraph:
    version: str
    observations: dict[str, ObservationNode]
    actions: dict[str, ActionNode]


@dataclass(frozen=True)
class TraceEntry:
    step: int
    kind: str  # observation | action | escalation
    node_id: str
    note: str = ""
    unexpected: bool = False


@dataclass(frozen=True)
class GuidelineSession:
    graph: GuidelineGraph
    trace: tuple[TraceEntry, ...] = ()
    escalated: bool = False

    @property
    def current(self) -> str | None:
        for e in reversed(self.trace):
            if e.kind == "observation":
                return e.node_id
        return None

    @property
    def closed(self) -> bool:
        if self.escalated:
            return True
        cur = self.current
        return cur is not None and self.graph.observations[cur].terminal


def _load_doc(source: str | Path | None) -> dict:
    if source is None:
        text = resources.files("gridsec").joinpath("data/guidelines.yaml").read_text()
    else:
        text = Path(source).read_text()
    doc = yaml.safe_load(text)
    if not isinstance(doc, dict):
        raise GuidelineError("guideline file must be a mapping")
    return doc


def parse_guidelines(doc: dict) -> GuidelineGraph:
    observations = {}
    for oid, raw in (doc.get("observations") or {}).items():
        oid = str(oid)
        if not _ID.match(oid):
            raise GuidelineError(f"observation id {oid!r} is not CATEGORY.NN")
        category = raw.get("category", oid.split(".")[0])
        if category != oid.split(".")[0] or category not in CATEGORIES:
            raise GuidelineError(f"observation {oid}: category {category!r} does not match id")
        observations[oid] = ObservationNode(
            id=oid,
            category=category,
            description=str(raw.get("description", "")),
            suggested_actions=tuple(str(a) for a in raw.get("actions") or ()),
            keywords=tuple(str(k) for k in raw.get("keywords") or ()),
            entry=bool(raw.get("entry", False)),
            terminal=bool(raw.get("terminal", False)),
        )
    actions = {}
    for aid, raw in (doc.get("actions") or {}).items():
        aid = str(aid)
        role = raw.get("role")
        if role not in ROLES:
            raise GuidelineError(f"action {aid}: unknown role {role!r}")
        actions[aid] = ActionNode(
            id=aid,
            instruction=str(raw.get("instruction", "")),
            required_role=role,
            expected_observations=tuple(str(o) for o in raw.get("expects") or ()),
            escalation=raw.get("escalation"),
        )
    graph = GuidelineGraph(str(doc.get("version", "")), observations, actions)
    validate(graph)
    return graph


def load_guidelines(source: str | Path | None = None) -> GuidelineGraph:
    """Load and validate a guideline file; ``None`` loads the bundled one."""
    return parse_guidelines(_load_doc(source))


def validate(graph: GuidelineGraph) -> None:
    obs, acts = graph.observations, graph.actions
    for o in obs.values():
        if not o.suggested_actions and not o.terminal:
            raise GuidelineError(f"observation {o.id} has no suggested actions and is not terminal")
        for a in o.suggested_actions:
            if a not in acts:
                raise DanglingReference(f"observation {o.id} suggests unknown action {a!r}")
    for a in acts.values():
        if not a.expected_observations and not a.escalation:
            raise GuidelineError(f"action {a.id} has neither expected observations nor escalation")
        for o in a.expected_observations:
            if o not in obs:
                raise DanglingReference(f"action {a.id} expects unknown observation {o!r}")

    # reachability from the entry points of every category
    seen: set[str] = set()
    frontier = [o.id for o in obs.values() if o.entry]
    while frontier:
        oid = frontier.pop()
        if oid in seen:
            continue
        seen.add(oid)
        for a in obs[oid].suggested_actions:
            frontier.extend(acts[a].expected_observations)
    missing = sorted(set(obs) - seen)
    if missing:
        raise UnreachableNode(f"observations not reachable from any entry point: {', '.join(missing)}")

    # shortest distance (in graph edges) from each node to an escalating action
    dist: dict[str, int] = {a.id: 0 for a in acts.values() if a.escalation}
    changed = True
    while changed:
        changed = False
        for o in obs.values():
            best = min((dist[a] + 1 for a in o.suggested_actions if a in dist), default=None)
            if best is not None and best < dist.get(o.id, best + 1):
                dist[o.id] = best
                changed = True
        for a in acts.values():
            if a.escalation:
                continue
            best = min((dist[o] + 1 for o in a.expected_observations if o in dist), default=None)
            if best is not None and best < dist.get(a.id, best + 1):
                dist[a.id] = best
                changed = True
    stuck = sorted(
        n for n in list(obs) + list(acts)
        if not (n in obs and obs[n].terminal) and dist.get(n, MAX_ESCALATION_STEPS + 1) > MAX_ESCALATION_STEPS
    )
    if stuck:
        raise NoEscalationPath(f"no escalation within {MAX_ESCALATION_STEPS} steps from: {', '.join(stuck)}")


def lookup(graph: GuidelineGraph, category: str | None, keywords: Iterable[str]) -> list[str]:
    """Exact id matches first, then keyword overlap descending, ties by id."""
    keywords = [k for k in keywords if k]
    wanted = {k.lower() for k in keywords}
    exact = sorted({k.upper() for k in keywords} & set(graph.observations))
    scored = []
    for o in graph.observations.values():
        if o.id in exact or (category and o.category != category.upper()):
            continue
        overlap = len(wanted & o.terms())
        if overlap:
            scored.append((-overlap, o.id))
    return exact + [oid for _, oid in sorted(scored)]


def start_session(graph: GuidelineGraph, observation: str, note: str = "") -> GuidelineSession:
    if observation not in graph.observations:
        raise InvalidTransition(f"unknown observation {observation!r}")
    return GuidelineSession(graph, (TraceEntry(0, "observation", observation, note),))


def advance(session: GuidelineSession, action: str, observation: str | None = None, *,
            escalate: bool = False, note: str = "") -> GuidelineSession:
    """Record ``action`` and either its resulting observation or an escalation.

    An observation outside the action's expected set is accepted only with a
    note and is flagged as unexpected.
    """
    graph = session.graph
    if session.closed:
        raise InvalidTransition("session is closed")
    cur = session.current
    if cur is None:
        raise InvalidTransition("session has no starting observation")
    if action not in graph.observations[cur].suggested_actions:
        raise InvalidTransition(f"action {action!r} is not suggested for {cur}")
    act = graph.actions[action]
    step = session.trace[-1].step + 1
    a_entry = TraceEntry(step, "action", action)
    if escalate:
        if not act.escalation:
            raise InvalidTransition(f"action {action!r} does not escalate")
        return replace(session, trace=session.trace + (a_entry, TraceEntry(step + 1, "escalation", act.escalation, note)),
                       escalated=True)
    if observation is None:
        raise InvalidTransition("a resulting observation or escalation is required")
    if observation not in graph.observations:
        raise InvalidTransition(f"unknown observation {observation!r}")
    unexpected = observation not in act.expected_observations
    if unexpected and not note:
        raise InvalidTransition(f"{observation} is not an expected outcome of {action!r}; add a note to record it")
    o_entry = TraceEntry(step + 1, "observation", observation, note, unexpected)
    return replace(session, trace=session.trace + (a_entry, o_entry))


def export_trace(session: GuidelineSession) -> str:
    graph = session.graph
    lines = [f"Guideline trace (guidelines version {graph.version})", ""]
    for e in session.trace:
        if e.kind == "observation":
            text = f"observe  {e.node_id}  {graph.observations[e.node_id].description}"
        elif e.kind == "action":
            act = graph.actions[e.node_id]
            text = f"act      {e.node_id}  [{act.required_role}] {act.instruction}"
        else:
            text = f"ESCALATE {e.node_id}"
        if e.unexpected:
            text += "  (unexpected)"
        lines.append(f"  [{e.step:02d}] {text}")
        if e.note:
            lines.append(f"         note: {e.note}")
    if session.trace:
        lines.append("")
    machine = {
        "version": graph.version,
        "escalated": session.escalated,
        "trace": [
            {"step": e.step, "kind": e.kind, "id": e.node_id, "note": e.note, "unexpected": e.unexpected}
            for e in session.trace
        ],
    }
    lines.append("json: " + json.dumps(machine, separators=(",", ":")))
    return "\n".join(lines) + "\n"
