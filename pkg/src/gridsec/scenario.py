"""Scenario files: parsing, defaults and cross-reference validation.

A scenario is a YAML document with the sections ``topology``, ``grid``,
``datapoints``, ``whitelists``, ``profile``, ``schedule`` and ``attacks``
(plus optional ``ids`` and ``monitoring`` tuning). A top-level ``base`` key
names another scenario whose mappings are deep-merged underneath; lists are
replaced wholesale. See docs/scenario-format.md.
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any

import yaml

from . import attacks as attack_mod
from .grid import (
    Asset, Branch, Bus, Datapoint, DatapointMap, GridNetwork, InvalidNetwork,
)
from .ids import IdsConfig, ModelCheckConfig
from .monitoring import MonitoringConfig
from .netsim import FirewallRule, Link, NetsimError, TopologyNode, TopologySpec, build_topology

log = logging.getLogger(__name__)

DEFAULT_SEED = 0
DEFAULT_NOISE_SIGMA = 0.005
DEFAULT_LATENCY_MS = 5
DEFAULT_REPORTING_PERIOD_MS = 1000

SECTIONS = ("topology", "grid", "datapoints", "whitelists", "profile", "schedule", "attacks")


class ScenarioError(Exception):
    pass


class ParseError(ScenarioError):
    def __init__(self, message: str, line: int | None = None):
        self.line = line
        where = f"line {line}: " if line is not None else ""
        super().__init__(f"{where}{message}")


class DanglingReference(ScenarioError):
    def __init__(self, name: str, context: str = ""):
        self.name = name
        super().__init__(f"unknown reference {name!r}" + (f" in {context}" if context else ""))


@dataclass(frozen=True)
class LoadProfile:
    step_ms: int
    multipliers: tuple[float, ...]

    def multiplier(self, t_ms: int) -> float:
        return self.multipliers[(t_ms // self.step_ms) % len(self.multipliers)]


@dataclass(frozen=True)
class ScheduleItem:
    t_ms: int
    action: str  # interrogation | setpoint | switch | trip | link
    target: str = ""
    value: float = 0.0
    close: bool = False
    up: bool = False


@dataclass(frozen=True)
class ExtraFlow:
    src: str
    dst: str
    port: int


@dataclass(frozen=True)
class WhitelistConfig:
    derive: bool = True
    extra_endpoints: tuple[str, ...] = ()
    exclude_endpoints: tuple[str, ...] = ()
    extra_flows: tuple[ExtraFlow, ...] = ()


@dataclass
class Scenario:
    name: str
    seed: int
    duration_ms: int
    reporting_period_ms: int
    noise_sigma: float
    topology: TopologySpec
    ids_taps: tuple[str, ...]
    grid: GridNetwork
    datapoints: DatapointMap
    common_addresses: dict[str, int]
    whitelists: WhitelistConfig
    profile: LoadProfile
    load_peaks: dict[str, float]
    schedule: list[ScheduleItem]
    attacks: list[attack_mod.AttackAction]
    ids: IdsConfig = field(default_factory=IdsConfig)
    monitoring: MonitoringConfig = field(default_factory=MonitoringConfig)
    source: str = ""

    def node(self, node_id: str) -> TopologyNode:
        for n in self.topology.nodes:
            if n.id == node_id:
                return n
        raise DanglingReference(node_id, "topology")

    @property
    def scada_id(self) -> str:
        ids = [n.id for n in self.topology.nodes if n.kind == "scada"]
        return ids[0]

    @property
    def rtu_ids(self) -> list[str]:
        return self.datapoints.rtus


# -- raw document handling --------------------------------------------------


def bundled_scenarios() -> list[str]:
    root = resources.files("gridsec") / "data" / "scenarios"
    return sorted(p.name[:-5] for p in root.iterdir() if p.name.endswith(".yaml"))


def bundled_path(name: str) -> Path:
    return Path(str(resources.files("gridsec") / "data" / "scenarios" / f"{name}.yaml"))


def _parse_yaml(text: str) -> dict:
    try:
        doc = yaml.safe_load(text)
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark or exc.context_mark
        raise ParseError(exc.problem or str(exc), mark.line + 1 if mark else None) from None
    except yaml.YAMLError as exc:
        raise ParseError(str(exc)) from None
    if doc is None:
        doc = {}
    if not isinstance(doc, dict):
        raise ParseError("top level must be a mapping", 1)
    return doc


def _merge(base: Any, over: Any) -> Any:
    if isinstance(base, dict) and isinstance(over, dict):
        out = dict(base)
        for k, v in over.items():
            out[k] = _merge(base[k], v) if k in base else copy.deepcopy(v)
        return out
    return copy.deepcopy(over)


def _resolve(doc: dict, here: Path | None, depth: int = 0) -> dict:
    base = doc.pop("base", None)
    if base is None:
        return doc
    if depth > 8:
        raise ParseError("base chain too deep")
    candidates = []
    if here is not None:
        candidates += [here / base, here / f"{base}.yaml"]
    candidates.append(bundled_path(str(base)))
    for cand in candidates:
        if cand.is_file():
            parent = _resolve(_parse_yaml(cand.read_text()), cand.parent, depth + 1)
            return _merge(parent, doc)
    raise DanglingReference(str(base), "base")


# -- section builders -------------------------------------------------------


def _req(d: dict, key: str, ctx: str) -> Any:
    if not isinstance(d, dict) or key not in d:
        raise ScenarioError(f"{ctx}: missing required key {key!r}")
    return d[key]


def _mapping(d: Any, ctx: str) -> dict:
    if d is None:
        return {}
    if not isinstance(d, dict):
        raise ScenarioError(f"{ctx}: expected a mapping")
    return d


def _topology(doc: dict) -> tuple[TopologySpec, tuple[str, ...]]:
    topo = _mapping(_req(doc, "topology", "scenario"), "topology")
    latency = int(topo.get("default_latency_ms", DEFAULT_LATENCY_MS))
    nodes = []
    for node_id, nd in _mapping(_req(topo, "nodes", "topology"), "topology.nodes").items():
        nd = _mapping(nd, f"node {node_id}")
        nodes.append(TopologyNode(
            str(node_id), _req(nd, "kind", f"node {node_id}"), str(_req(nd, "l2", f"node {node_id}")),
            str(_req(nd, "l3", f"node {node_id}")), nd.get("zone", "otNetwork"),
        ))
    node_ids = {n.id for n in nodes}
    links = []
    for link_id, ld in _mapping(topo.get("links"), "topology.links").items():
        ld = _mapping(ld, f"link {link_id}")
        for end in ("a", "b"):
            if _req(ld, end, f"link {link_id}") not in node_ids:
                raise DanglingReference(str(ld[end]), f"link {link_id}")
        links.append(Link(str(link_id), ld["a"], ld["b"], int(ld.get("latency_ms", latency)), bool(ld.get("up", True))))
    firewalls = {}
    for fw, rules in _mapping(topo.get("firewalls"), "topology.firewalls").items():
        if fw not in node_ids:
            raise DanglingReference(str(fw), "topology.firewalls")
        firewalls[fw] = tuple(
            FirewallRule(str(r.get("src", "*")), str(r.get("dst", "*")), str(r.get("port", "*")),
                         r.get("action", "allow"))
            for r in (rules or [])
        )
    taps = tuple(topo.get("ids_taps", ()))
    link_ids = {link.id for link in links}
    for tap in taps:
        if tap not in node_ids and tap not in link_ids:
            raise DanglingReference(str(tap), "topology.ids_taps")
    spec = TopologySpec(tuple(nodes), tuple(links), firewalls)
    try:
        build_topology(spec)
    except (NetsimError, ValueError) as exc:
        raise ScenarioError(f"topology: {exc}") from None
    return spec, taps


def _grid(doc: dict) -> tuple[GridNetwork, dict[str, float]]:
    g = _mapping(_req(doc, "grid", "scenario"), "grid")
    buses = [Bus(str(b), float(_mapping(bd, f"bus {b}").get("kv", 10.0)))
             for b, bd in _mapping(_req(g, "buses", "grid"), "grid.buses").items()]
    bus_ids = {b.id for b in buses}
    branches = []
    for br_id, bd in _mapping(_req(g, "branches", "grid"), "grid.branches").items():
        bd = _mapping(bd, f"branch {br_id}")
        for end in ("from", "to"):
            if _req(bd, end, f"branch {br_id}") not in bus_ids:
                raise DanglingReference(str(bd[end]), f"branch {br_id}")
        branches.append(Branch(str(br_id), bd["from"], bd["to"], float(_req(bd, "x", f"branch {br_id}")),
                               float(_req(bd, "rating", f"branch {br_id}")), bool(bd.get("closed", True))))
    assets = []
    peaks = {}
    for a_id, ad in _mapping(g.get("assets"), "grid.assets").items():
        ad = _mapping(ad, f"asset {a_id}")
        bus = _req(ad, "bus", f"asset {a_id}")
        if bus not in bus_ids:
            raise DanglingReference(str(bus), f"asset {a_id}")
        kind = _req(ad, "kind", f"asset {a_id}")
        if kind == "load" and "peak" in ad:
            peak = float(ad["peak"])
            peaks[str(a_id)] = peak
            assets.append(Asset(str(a_id), bus, kind, -peak, 0.0, -peak))
        else:
            assets.append(Asset(str(a_id), bus, kind, float(_req(ad, "p_min", f"asset {a_id}")),
                                float(_req(ad, "p_max", f"asset {a_id}")), float(ad.get("p", 0.0))))
    slack = _req(g, "slack", "grid")
    if slack not in bus_ids:
        raise DanglingReference(str(slack), "grid.slack")
    try:
        return GridNetwork(tuple(buses), tuple(branches), slack, tuple(assets)), peaks
    except InvalidNetwork as exc:
        raise ScenarioError(f"grid: {exc}") from None


def _datapoints(doc: dict, spec: TopologySpec, grid: GridNetwork) -> tuple[DatapointMap, dict[str, int]]:
    nodes = {n.id: n for n in spec.nodes}
    buses = set(grid.bus_ids)
    branches = {br.id for br in grid.branches}
    assets = {a.id for a in grid.assets}
    refs = {"injection": buses, "flow": branches, "breaker": branches, "switch": branches, "setpoint": assets}
    points = []
    addresses = {}
    for rtu, rd in _mapping(_req(doc, "datapoints", "scenario"), "datapoints").items():
        if rtu not in nodes:
            raise DanglingReference(str(rtu), "datapoints")
        if nodes[rtu].kind != "rtu":
            raise ScenarioError(f"datapoints: {rtu} is not an rtu")
        rd = _mapping(rd, f"datapoints.{rtu}")
        addresses[str(rtu)] = int(_req(rd, "common_address", f"datapoints.{rtu}"))
        for ioa, pd in _mapping(_req(rd, "points", f"datapoints.{rtu}"), f"datapoints.{rtu}.points").items():
            pd = _mapping(pd, f"ioa {ioa}")
            kind = _req(pd, "kind", f"ioa {ioa}")
            ref = str(_req(pd, "ref", f"ioa {ioa}"))
            if kind not in refs:
                raise ScenarioError(f"ioa {ioa}: unknown kind {kind!r}")
            if ref not in refs[kind]:
                raise DanglingReference(ref, f"ioa {ioa}")
            if not 1 <= int(ioa) <= 0xFFFFFF:
                raise ScenarioError(f"ioa {ioa} outside 1..16777215")
            points.append(Datapoint(int(ioa), str(rtu), kind, ref))
    if len(set(addresses.values())) != len(addresses):
        raise ScenarioError("datapoints: common addresses must be unique")
    try:
        return DatapointMap(points), addresses
    except ValueError as exc:
        raise ScenarioError(f"datapoints: {exc}") from None


def _whitelists(doc: dict, node_ids: set[str]) -> WhitelistConfig:
    w = _mapping(doc.get("whitelists"), "whitelists")
    for key in ("extra_endpoints", "exclude_endpoints"):
        for n in w.get(key, ()) or ():
            if n not in node_ids:
                raise DanglingReference(str(n), f"whitelists.{key}")
    flows = []
    for f in w.get("extra_flows", ()) or ():
        for end in ("src", "dst"):
            if _req(f, end, "whitelists.extra_flows") not in node_ids:
                raise DanglingReference(str(f[end]), "whitelists.extra_flows")
        flows.append(ExtraFlow(f["src"], f["dst"], int(f.get("port", 2404))))
    return WhitelistConfig(bool(w.get("derive", True)), tuple(w.get("extra_endpoints", ()) or ()),
                           tuple(w.get("exclude_endpoints", ()) or ()), tuple(flows))


def _schedule(doc: dict, grid: GridNetwork, spec: TopologySpec, duration: int) -> list[ScheduleItem]:
    items = []
    link_ids = {link.id for link in spec.links}
    rtu_ids = {n.id for n in spec.nodes if n.kind == "rtu"}
    for i, entry in enumerate(doc.get("schedule", ()) or ()):
        ctx = f"schedule[{i}]"
        entry = _mapping(entry, ctx)
        t = int(_req(entry, "t_ms", ctx))
        if not 0 <= t < duration:
            raise ScenarioError(f"{ctx}: t_ms={t} outside the run duration")
        if "interrogation" in entry:
            target = str(entry["interrogation"])
            if target != "all" and target not in rtu_ids:
                _dangling(target, ctx)
            items.append(ScheduleItem(t, "interrogation", target))
        elif "setpoint" in entry:
            if entry["setpoint"] not in {a.id for a in grid.assets}:
                _dangling(entry["setpoint"], ctx)
            items.append(ScheduleItem(t, "setpoint", entry["setpoint"], float(_req(entry, "value", ctx))))
        elif "switch" in entry:
            if entry["switch"] not in {br.id for br in grid.branches}:
                _dangling(entry["switch"], ctx)
            items.append(ScheduleItem(t, "switch", entry["switch"], close=bool(_req(entry, "close", ctx))))
        elif "trip" in entry:
            if entry["trip"] not in {br.id for br in grid.branches}:
                _dangling(entry["trip"], ctx)
            items.append(ScheduleItem(t, "trip", entry["trip"]))
        elif "link_down" in entry or "link_up" in entry:
            up = "link_up" in entry
            link = entry["link_up" if up else "link_down"]
            if link not in link_ids:
                _dangling(link, ctx)
            items.append(ScheduleItem(t, "link", link, up=up))
            if not up and "for_ms" in entry:
                back = t + int(entry["for_ms"])
                if back < duration:
                    items.append(ScheduleItem(back, "link", link, up=True))
        else:
            raise ScenarioError(f"{ctx}: unknown schedule entry {sorted(entry)}")
    return sorted(items, key=lambda it: it.t_ms)


def _dangling(name, ctx):
    raise DanglingReference(str(name), ctx)


def _profile(doc: dict) -> LoadProfile:
    p = _mapping(doc.get("profile"), "profile")
    mult = tuple(float(m) for m in p.get("multipliers", [1.0] * 24))
    if not mult:
        raise ScenarioError("profile: multipliers must not be empty")
    step = int(p.get("step_ms", 3_600_000))
    if step <= 0:
        raise ScenarioError("profile: step_ms must be positive")
    return LoadProfile(step, mult)


def _ids_config(doc: dict) -> IdsConfig:
    d = _mapping(doc.get("ids"), "ids")
    model = ModelCheckConfig(
        residual_threshold_pu=float(d.get("residual_threshold", 0.05)),
        stale_after_ms=int(d.get("stale_after_ms", 3000)),
        limit_check=bool(d.get("limit_check", True)),
        command_plausibility=bool(d.get("command_plausibility", True)),
    )
    if model.residual_threshold_pu <= 0:
        raise ScenarioError("ids: residual_threshold must be positive")
    return IdsConfig(
        model=model,
        scan_k=int(d.get("scan_k", 10)),
        scan_window_ms=int(d.get("scan_window_ms", 5000)),
        suppress_ms=int(d.get("suppress_ms", 10_000)),
        check_offset_ms=int(d.get("check_offset_ms", 500)),
        layers=tuple(d.get("layers", ("acl", "protocol", "model"))),
    )


def _monitoring_config(doc: dict) -> MonitoringConfig:
    d = _mapping(doc.get("monitoring"), "monitoring")
    return MonitoringConfig(
        heartbeat_period_ms=int(d.get("heartbeat_period_ms", 10_000)),
        missed_heartbeats=int(d.get("missed_heartbeats", 3)),
        stale_after_ms=int(d.get("stale_after_ms", 3000)),
        flow_tolerance_pu=float(d.get("flow_tolerance", 0.05)),
    )


def build_scenario(doc: dict, source: str = "") -> Scenario:
    doc = copy.deepcopy(doc)
    duration = int(_req(doc, "duration_ms", "scenario"))
    if duration <= 0:
        raise ScenarioError("duration_ms must be positive")
    spec, taps = _topology(doc)
    if sum(1 for n in spec.nodes if n.kind == "scada") != 1:
        raise ScenarioError("topology: exactly one scada node required")
    grid, peaks = _grid(doc)
    dpmap, addresses = _datapoints(doc, spec, grid)
    period = int(doc.get("reporting_period_ms", DEFAULT_REPORTING_PERIOD_MS))
    if period <= 0:
        raise ScenarioError("reporting_period_ms must be positive")
    ids_cfg = _ids_config(doc)
    scenario = Scenario(
        name=str(doc.get("name", "scenario")),
        seed=int(doc.get("seed", DEFAULT_SEED)),
        duration_ms=duration,
        reporting_period_ms=period,
        noise_sigma=float(doc.get("noise_sigma", DEFAULT_NOISE_SIGMA)),
        topology=spec,
        ids_taps=taps,
        grid=grid,
        datapoints=dpmap,
        common_addresses=addresses,
        whitelists=_whitelists(doc, {n.id for n in spec.nodes}),
        profile=_profile(doc),
        load_peaks=peaks,
        schedule=_schedule(doc, grid, spec, duration),
        attacks=[],
        ids=ids_cfg,
        monitoring=_monitoring_config(doc),
        source=source,
    )
    for i, raw in enumerate(doc.get("attacks", ()) or ()):
        try:
            action = attack_mod.parse_attack(_mapping(raw, f"attacks[{i}]"), scenario, index=i)
        except attack_mod.AttackError as exc:
            raise ScenarioError(f"attacks[{i}]: {exc}") from None
        if action is not None:
            scenario.attacks.append(action)
    return scenario


def load_scenario(text: str, base_dir: Path | None = None, source: str = "") -> Scenario:
    """Parse scenario text, resolving ``base`` relative to ``base_dir``."""
    doc = _resolve(_parse_yaml(text), base_dir)
    return build_scenario(doc, source=source)


def _locate(path: str | Path) -> Path:
    path = Path(path)
    if path.is_file():
        return path
    bundled = bundled_path(str(path))
    if bundled.is_file():
        return bundled
    raise ScenarioError(f"scenario file not found: {path}")


def load_scenario_file(path: str | Path, overrides: dict | None = None) -> Scenario:
    """Load a scenario file or bundled scenario name.

    ``overrides`` is merged over the resolved document before validation,
    e.g. ``{"seed": 7, "duration_ms": 60000}``.
    """
    path = _locate(path)
    doc = _resolve(_parse_yaml(path.read_text()), path.parent)
    if overrides:
        doc = _merge(doc, overrides)
    return build_scenario(doc, source=str(path))


def scenario_document(path: str | Path) -> dict:
    """Fully merged raw document, for tooling that rewrites scenarios."""
    path = _locate(path)
    return _resolve(_parse_yaml(path.read_text()), path.parent)
