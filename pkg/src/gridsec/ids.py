"""Network intrusion detection in three layers fed by tap copies.

The access-control layer checks endpoints and flows against a whitelist and
watches for scans. The protocol layer decodes telecontrol traffic and checks
type, cause, address and direction per flow, plus session sequencing. The
model layer keeps a shadow process image from monitor-direction frames and
runs power-balance, limit, staleness and command-plausibility checks.

All detection state lives in :class:`Detector`, which is a fold over packet
observations and periodic check ticks. Alerts carry enough evidence for
:func:`rederive` to reproduce the verdict offline.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field, replace
from typing import Any, Iterable

from .codec import (
    TELECONTROL_PORT, Apdu, Cot, DataBeforeStart, DecodeError, FrameReader, MeasuredFloat,
    SequenceError, SessionState, SinglePoint, TypeId, decode_stream, encode_apdu, session_accept,
)
from .grid import (
    Asset, Branch, Bus, Datapoint, DatapointMap, GridNetwork, MissingDatapoint,
    residual_terms, would_island,
)
from .netsim import Packet

LAYERS = ("acl", "protocol", "model", "monitoring")
SEVERITIES = ("info", "warning", "critical")
TO_SERVER = "to_server"
TO_CLIENT = "to_client"
CONTACT_KINDS = ("probe", "connectRequest")
# heartbeats travel on the monitoring channel, not on whitelisted flows
FLOW_EXEMPT_KINDS = ("heartbeat",)


@dataclass(frozen=True)
class ModelCheckConfig:
    residual_threshold_pu: float = 0.05
    stale_after_ms: int = 3000
    limit_check: bool = True
    command_plausibility: bool = True

    def __post_init__(self):
        if self.residual_threshold_pu <= 0:
            raise ValueError("residual threshold must be positive")


@dataclass(frozen=True)
class IdsConfig:
    model: ModelCheckConfig = field(default_factory=ModelCheckConfig)
    scan_k: int = 10
    scan_window_ms: int = 5000
    suppress_ms: int = 10_000
    check_offset_ms: int = 500
    layers: tuple[str, ...] = ("acl", "protocol", "model")

    def to_dict(self) -> dict:
        return {
            "residualThreshold": self.model.residual_threshold_pu,
            "staleAfterMs": self.model.stale_after_ms,
            "limitCheck": self.model.limit_check,
            "commandPlausibility": self.model.command_plausibility,
            "scanK": self.scan_k,
            "scanWindowMs": self.scan_window_ms,
            "suppressMs": self.suppress_ms,
            "checkOffsetMs": self.check_offset_ms,
            "layers": list(self.layers),
        }

    @classmethod
    def from_dict(cls, d: dict) -> IdsConfig:
        return cls(
            ModelCheckConfig(d["residualThreshold"], d["staleAfterMs"], d["limitCheck"], d["commandPlausibility"]),
            d["scanK"], d["scanWindowMs"], d["suppressMs"], d["checkOffsetMs"], tuple(d["layers"]),
        )


# -- whitelists -------------------------------------------------------------


@dataclass(frozen=True)
class Flow:
    """Client-to-server flow; replies travel the reverse direction."""

    client_l3: str
    server_l3: str
    port: int

    def __str__(self):
        return f"{self.client_l3}>{self.server_l3}:{self.port}"

    @classmethod
    def parse(cls, text: str) -> Flow:
        client, rest = text.split(">")
        server, port = rest.rsplit(":", 1)
        return cls(client, server, int(port))


@dataclass
class AclWhitelist:
    endpoints: dict[str, str]  # l3 -> l2
    flows: set[Flow]

    def __post_init__(self):
        for f in self.flows:
            if f.client_l3 not in self.endpoints or f.server_l3 not in self.endpoints:
                raise ValueError(f"flow {f} references a non-whitelisted endpoint")

    def to_dict(self) -> dict:
        return {"endpoints": dict(sorted(self.endpoints.items())), "flows": sorted(str(f) for f in self.flows)}

    @classmethod
    def from_dict(cls, d: dict) -> AclWhitelist:
        return cls(dict(d["endpoints"]), {Flow.parse(f) for f in d["flows"]})


@dataclass
class FlowProfile:
    # direction -> type id -> allowed causes
    allowed: dict[str, dict[int, frozenset[int]]]
    # type id -> inclusive ioa ranges
    ioa_ranges: dict[int, tuple[tuple[int, int], ...]]
    common_address: int | None

    def to_dict(self) -> dict:
        return {
            "allowed": {d: {str(t): sorted(c) for t, c in sorted(m.items())} for d, m in sorted(self.allowed.items())},
            "ioaRanges": {str(t): [list(r) for r in rs] for t, rs in sorted(self.ioa_ranges.items())},
            "commonAddress": self.common_address,
        }

    @classmethod
    def from_dict(cls, d: dict) -> FlowProfile:
        return cls(
            {dr: {int(t): frozenset(c) for t, c in m.items()} for dr, m in d["allowed"].items()},
            {int(t): tuple(tuple(r) for r in rs) for t, rs in d["ioaRanges"].items()},
            d["commonAddress"],
        )


@dataclass
class ProtocolWhitelist:
    flows: dict[Flow, FlowProfile]

    def __post_init__(self):
        for f, prof in self.flows.items():
            if not any(prof.allowed.values()):
                raise ValueError(f"empty protocol profile for {f}")

    def to_dict(self) -> dict:
        return {str(f): p.to_dict() for f, p in sorted(self.flows.items(), key=lambda kv: str(kv[0]))}

    @classmethod
    def from_dict(cls, d: dict) -> ProtocolWhitelist:
        return cls({Flow.parse(f): FlowProfile.from_dict(p) for f, p in d.items()})


def _ranges(ioas: Iterable[int]) -> tuple[tuple[int, int], ...]:
    out: list[list[int]] = []
    for ioa in sorted(set(ioas)):
        if out and out[-1][1] == ioa - 1:
            out[-1][1] = ioa
        else:
            out.append([ioa, ioa])
    return tuple(tuple(r) for r in out)


def rtu_profile(points: list[Datapoint], common_address: int) -> FlowProfile:
    """Protocol profile of a SCADA master talking to one RTU."""
    by_kind: dict[str, list[int]] = {}
    for dp in points:
        by_kind.setdefault(dp.kind, []).append(dp.ioa)
    replies = frozenset({Cot.ACT_CON, Cot.ACT_TERM})
    monitor = frozenset({Cot.SPONTANEOUS, Cot.INTERROGATED})
    to_server = {TypeId.C_IC_NA: frozenset({Cot.ACTIVATION})}
    to_client = {TypeId.C_IC_NA: replies}
    ranges = {TypeId.C_IC_NA: ((0, 0),)}
    analog = by_kind.get("injection", []) + by_kind.get("flow", [])
    if analog:
        to_client[TypeId.M_ME_NC] = monitor
        ranges[TypeId.M_ME_NC] = _ranges(analog)
    if by_kind.get("breaker"):
        to_client[TypeId.M_SP_NA] = monitor
        ranges[TypeId.M_SP_NA] = _ranges(by_kind["breaker"])
    for kind, tid in (("switch", TypeId.C_SC_NA), ("setpoint", TypeId.C_SE_NC)):
        if by_kind.get(kind):
            to_server[tid] = frozenset({Cot.ACTIVATION})
            to_client[tid] = replies
            ranges[tid] = _ranges(by_kind[kind])
    return FlowProfile(
        {TO_SERVER: {int(k): frozenset(int(c) for c in v) for k, v in to_server.items()},
         TO_CLIENT: {int(k): frozenset(int(c) for c in v) for k, v in to_client.items()}},
        {int(k): v for k, v in ranges.items()},
        common_address,
    )


def read_only_profile() -> FlowProfile:
    """Interrogation-only access for extra engineering flows."""
    any_ioa = ((0, 0xFFFFFF),)
    monitor = frozenset({int(Cot.INTERROGATED), int(Cot.SPONTANEOUS)})
    return FlowProfile(
        {TO_SERVER: {int(TypeId.C_IC_NA): frozenset({int(Cot.ACTIVATION)})},
         TO_CLIENT: {int(TypeId.C_IC_NA): frozenset({int(Cot.ACT_CON), int(Cot.ACT_TERM)}),
                     int(TypeId.M_ME_NC): monitor, int(TypeId.M_SP_NA): monitor}},
        {int(TypeId.C_IC_NA): any_ioa, int(TypeId.M_ME_NC): any_ioa, int(TypeId.M_SP_NA): any_ioa},
        None,
    )


def derive_whitelists(scenario) -> tuple[AclWhitelist, ProtocolWhitelist]:
    """Whitelists implied by the declared topology and datapoint map."""
    nodes = {n.id: n for n in scenario.topology.nodes}
    cfg = scenario.whitelists
    excluded = set(cfg.exclude_endpoints)
    members = set(cfg.extra_endpoints)
    if cfg.derive:
        members |= {scenario.scada_id, *scenario.rtu_ids}
    members -= excluded
    endpoints = {nodes[n].l3: nodes[n].l2 for n in sorted(members)}
    profiles: dict[Flow, FlowProfile] = {}
    scada = nodes[scenario.scada_id]
    if cfg.derive and scenario.scada_id in members:
        for rtu in scenario.rtu_ids:
            if rtu in members:
                flow = Flow(scada.l3, nodes[rtu].l3, TELECONTROL_PORT)
                profiles[flow] = rtu_profile(scenario.datapoints.owned_by(rtu), scenario.common_addresses[rtu])
    for extra in cfg.extra_flows:
        if extra.src in members and extra.dst in members:
            profiles.setdefault(Flow(nodes[extra.src].l3, nodes[extra.dst].l3, extra.port), read_only_profile())
    return AclWhitelist(endpoints, set(profiles)), ProtocolWhitelist(profiles)


# -- alerts -----------------------------------------------------------------


@dataclass
class Alert:
    t_ms: int
    layer: str
    rule_id: str
    source_node: str
    subject_device: str
    severity: str
    evidence: dict[str, Any]
    count: int = 1
    anchor: str = ""

    @property
    def key(self) -> tuple:
        return (self.layer, self.rule_id, self.source_node, self.subject_device, self.anchor)

    def to_record(self) -> dict:
        return {
            "tMs": self.t_ms,
            "layer": self.layer,
            "ruleId": self.rule_id,
            "sourceNode": self.source_node,
            "subjectDevice": self.subject_device,
            "severity": self.severity,
            "count": self.count,
            "evidence": self.evidence,
        }

    @classmethod
    def from_record(cls, rec: dict) -> Alert:
        return cls(rec["tMs"], rec["layer"], rec["ruleId"], rec["sourceNode"], rec["subjectDevice"],
                   rec["severity"], rec["evidence"], rec.get("count", 1))


class AddressBook:
    """Names nodes by address so alerts refer to devices, not raw addresses."""

    def __init__(self, entries: dict[str, tuple[str, str]]):
        self.entries = dict(sorted(entries.items()))
        self._l2 = {l2: n for n, (l2, _) in self.entries.items()}
        self._l3 = {l3: n for n, (_, l3) in self.entries.items()}

    @classmethod
    def from_topology(cls, spec) -> AddressBook:
        return cls({n.id: (n.l2, n.l3) for n in spec.nodes})

    def by_l2(self, l2: str) -> str | None:
        return self._l2.get(l2)

    def by_l3(self, l3: str) -> str | None:
        return self._l3.get(l3)

    def name(self, l2: str | None, l3: str) -> str:
        return (l2 and self._l2.get(l2)) or self._l3.get(l3) or f"unknown:{l3}"

    def to_dict(self) -> dict:
        return {n: list(v) for n, v in self.entries.items()}

    @classmethod
    def from_dict(cls, d: dict) -> AddressBook:
        return cls({n: tuple(v) for n, v in d.items()})


def packet_summary(pkt: Packet) -> dict:
    return {
        "id": pkt.packet_id,
        "sentAtMs": pkt.sent_at_ms,
        "srcL2": pkt.src_l2,
        "dstL2": pkt.dst_l2,
        "srcL3": pkt.src_l3,
        "dstL3": pkt.dst_l3,
        "srcPort": pkt.src_port,
        "dstPort": pkt.dst_port,
        "kind": pkt.kind,
        "payload": pkt.payload.hex(),
    }


def packet_from_summary(d: dict) -> Packet:
    return Packet(d["srcL2"], d["dstL2"], d["srcL3"], d["dstL3"], d["srcPort"], d["dstPort"], d["kind"],
                  bytes.fromhex(d["payload"]), sent_at_ms=d.get("sentAtMs"), packet_id=d.get("id"))


# -- access-control layer -----------------------------------------------------


def acl_check(pkt: Packet, wl: AclWhitelist, book: AddressBook, t_ms: int = 0) -> Alert | None:
    """First endpoint or flow violation in ``pkt``, if any."""
    ev = {"packet": packet_summary(pkt)}
    for end, l2, l3 in (("src", pkt.src_l2, pkt.src_l3), ("dst", pkt.dst_l2, pkt.dst_l3)):
        if l3 not in wl.endpoints:
            who = book.name(l2, l3)
            return Alert(t_ms, "acl", "unknown-endpoint", who, who, "critical", {**ev, "end": end}, anchor=who)
        if wl.endpoints[l3] != l2:
            who = book.name(l2, l3)
            claimed = book.name(None, l3)
            return Alert(t_ms, "acl", "l2-l3-mismatch", who, claimed, "critical",
                         {**ev, "end": end, "expectedL2": wl.endpoints[l3]}, anchor=who)
    if pkt.kind in FLOW_EXEMPT_KINDS:
        return None
    forward = Flow(pkt.src_l3, pkt.dst_l3, pkt.dst_port)
    reverse = Flow(pkt.dst_l3, pkt.src_l3, pkt.src_port)
    if forward in wl.flows or reverse in wl.flows:
        return None
    src = book.name(pkt.src_l2, pkt.src_l3)
    dst = book.name(pkt.dst_l2, pkt.dst_l3)
    return Alert(t_ms, "acl", "flow-not-whitelisted", src, dst, "warning", ev, anchor=str(forward))


def scan_detect(contacts: Iterable[tuple[int, str, int]], k: int = 10, window_ms: int = 5000) -> bool:
    """True when the last contact completes k distinct (dst, port) pairs within the window.

    ``contacts`` are (t_ms, dst_l3, dst_port) of one source, time ordered.
    """
    contacts = list(contacts)
    if not contacts:
        return False
    t_last, dst, port = contacts[-1]
    recent = [(d, p) for t, d, p in contacts if t_last - t <= window_ms]
    earlier = [(d, p) for t, d, p in contacts[:-1] if t_last - t <= window_ms]
    return (dst, port) not in earlier and len(set(recent)) >= k


class ScanDetector:
    def __init__(self, k: int, window_ms: int):
        self.k = k
        self.window_ms = window_ms
        self._windows: dict[str, deque] = {}

    def observe(self, t_ms: int, source: str, dst_l3: str, dst_port: int) -> list[tuple[int, str, int]] | None:
        win = self._windows.setdefault(source, deque())
        win.append((t_ms, dst_l3, dst_port))
        while t_ms - win[0][0] > self.window_ms:
            win.popleft()
        if scan_detect(win, self.k, self.window_ms):
            return list(win)
        return None


# -- protocol layer -----------------------------------------------------------


def classify_direction(pkt: Packet) -> tuple[Flow, str] | None:
    if pkt.dst_port == TELECONTROL_PORT:
        return Flow(pkt.src_l3, pkt.dst_l3, pkt.dst_port), TO_SERVER
    if pkt.src_port == TELECONTROL_PORT:
        return Flow(pkt.dst_l3, pkt.src_l3, pkt.src_port), TO_CLIENT
    return None


def _in_ranges(ioa: int, ranges: Iterable[tuple[int, int]]) -> bool:
    return any(lo <= ioa <= hi for lo, hi in ranges)


def protocol_findings(flow: Flow, direction: str, apdu: Apdu, wl: ProtocolWhitelist,
                      session_events: Iterable = ()) -> list[tuple[str, str, dict]]:
    """(ruleId, severity, detail) for every whitelist or session violation."""
    out = []
    for ev in session_events:
        if isinstance(ev, SequenceError):
            out.append(("sequence-error", "warning", {"expected": ev.expected, "got": ev.got}))
        elif isinstance(ev, DataBeforeStart):
            out.append(("data-before-start", "warning", {"sendSeq": ev.send_seq}))
    profile = wl.flows.get(flow)
    if profile is None:
        out.insert(0, ("unlisted-flow", "warning", {}))
        return out
    asdu = apdu.asdu
    if asdu is None:
        return out
    tid, cot = int(asdu.type_id), int(asdu.cot)
    here = profile.allowed.get(direction, {})
    other = profile.allowed.get(TO_CLIENT if direction == TO_SERVER else TO_SERVER, {})
    if tid not in here:
        if tid in other:
            out.append(("direction-violation", "critical", {"typeId": tid, "cot": cot}))
        else:
            out.append(("typeid-not-whitelisted", "warning", {"typeId": tid}))
        return out
    if cot not in here[tid]:
        if cot in other.get(tid, ()):
            out.append(("direction-violation", "critical", {"typeId": tid, "cot": cot}))
        else:
            out.append(("cot-not-whitelisted", "warning", {"typeId": tid, "cot": cot}))
    bad = [o.ioa for o in asdu.objects if not _in_ranges(o.ioa, profile.ioa_ranges.get(tid, ()))]
    if bad:
        out.append(("ioa-not-whitelisted", "warning", {"typeId": tid, "ioas": bad}))
    if profile.common_address is not None and asdu.common_address != profile.common_address:
        out.append(("ca-mismatch", "warning", {"expected": profile.common_address, "got": asdu.common_address}))
    return out


def protocol_check(flow: Flow, direction: str, apdu: Apdu, wl: ProtocolWhitelist, session: SessionState,
                   t_ms: int = 0, source: str = "", subject: str = "") -> tuple[SessionState, list[Alert]]:
    """Advance the receiver's session by ``apdu`` and report violations."""
    state, events = session_accept(session, apdu, "inbound")
    alerts = [
        Alert(t_ms, "protocol", rule, source, subject, sev,
              {"flow": str(flow), "direction": direction, "frame": encode_apdu(apdu).hex(),
               "session": _session_dict(session), **detail},
              anchor=str(flow))
        for rule, sev, detail in protocol_findings(flow, direction, apdu, wl, events)
    ]
    return state, alerts


def _session_dict(s: SessionState) -> dict:
    return {"started": s.started, "nextSend": s.next_send, "nextExpected": s.next_expected, "peerAcked": s.peer_acked}


# -- model layer --------------------------------------------------------------


@dataclass
class ImageEntry:
    value: float
    t_ms: int


def _suspect(dpmap: DatapointMap, flagged: dict[str, list[tuple[int, float, float]]]) -> dict[int, float]:
    """Per-datapoint score: summed |residual| of the flagged buses it enters."""
    scores: dict[int, float] = {}
    for terms in flagged.values():
        r = abs(sum(sign * value for _, sign, value in terms))
        for ioa, _, _ in terms:
            scores[ioa] = scores.get(ioa, 0.0) + r
    return scores


def _pick_subject(dpmap: DatapointMap, ioas: Iterable[int], scores: dict[int, float]) -> str:
    best = max(scores[i] for i in ioas)
    return min(dpmap[i].rtu for i in ioas if scores[i] == best)


def model_check(image: dict[int, ImageEntry], net: GridNetwork, dpmap: DatapointMap, cfg: ModelCheckConfig,
                now_ms: int, since_ms: int = 0) -> list[Alert]:
    """Balance, limit and staleness checks over a process-image snapshot.

    Points never seen age from ``since_ms``. Buses with a stale or missing
    term are skipped by the balance check and reported as stale instead.
    """
    alerts: list[Alert] = []
    tau = cfg.residual_threshold_pu
    ages = {dp.ioa: now_ms - (image[dp.ioa].t_ms if dp.ioa in image else since_ms) for dp in dpmap.measured()}
    stale_by_rtu: dict[str, dict[int, int]] = {}
    for ioa, age in ages.items():
        if age > cfg.stale_after_ms:
            stale_by_rtu.setdefault(dpmap[ioa].rtu, {})[ioa] = age
    for rtu, stale in sorted(stale_by_rtu.items()):
        alerts.append(Alert(now_ms, "model", "stale-data", rtu, rtu, "info",
                            {"ages": {str(i): a for i, a in sorted(stale.items())}, "staleAfterMs": cfg.stale_after_ms},
                            anchor=rtu))

    def fresh(ioa):
        return ioa in image and ages.get(ioa, cfg.stale_after_ms + 1) <= cfg.stale_after_ms

    flagged: dict[str, list[tuple[int, float, float]]] = {}
    residuals: dict[str, float] = {}
    for bus in net.bus_ids:
        try:
            terms = residual_terms(net, dpmap, bus)
        except MissingDatapoint:
            continue
        if not all(fresh(ioa) for ioa, _ in terms):
            continue
        valued = [(ioa, sign, image[ioa].value) for ioa, sign in terms]
        r = sum(sign * v for _, sign, v in valued)
        if abs(r) > tau:
            flagged[bus] = valued
            residuals[bus] = r
    if flagged:
        scores = _suspect(dpmap, flagged)
        context = {b: [[i, s, v] for i, s, v in terms] for b, terms in sorted(flagged.items())}
        for bus, terms in sorted(flagged.items()):
            subject = _pick_subject(dpmap, [i for i, _, _ in terms], scores)
            alerts.append(Alert(now_ms, "model", "bad-data", subject, subject, "critical", {
                "bus": bus, "residual": residuals[bus], "threshold": tau, "flagged": context,
            }, anchor=bus))
    if cfg.limit_check:
        for br in net.branches:
            dp = dpmap.lookup("flow", br.id)
            if dp is None or not fresh(dp.ioa):
                continue
            value = image[dp.ioa].value
            if abs(value) > br.rating_pu:
                alerts.append(Alert(now_ms, "model", "limit-violation", dp.rtu, dp.rtu, "warning",
                                    {"branch": br.id, "ioa": dp.ioa, "value": value, "rating": br.rating_pu},
                                    anchor=br.id))
    return alerts


def breaker_states(image: dict[int, ImageEntry], net: GridNetwork, dpmap: DatapointMap) -> dict[str, bool]:
    states = {br.id: br.breaker_closed for br in net.branches}
    for br in net.branches:
        dp = dpmap.lookup("breaker", br.id)
        if dp is not None and dp.ioa in image:
            states[br.id] = image[dp.ioa].value >= 0.5
    return states


def command_plausibility(apdu_asdu, net: GridNetwork, dpmap: DatapointMap, breakers: dict[str, bool],
                         t_ms: int = 0, source: str = "") -> Alert | None:
    """Setpoints outside capability and switching that would island a bus."""
    if apdu_asdu is None or apdu_asdu.cot is not Cot.ACTIVATION:
        return None
    for obj in apdu_asdu.objects:
        dp = dpmap.by_ioa.get(obj.ioa)
        if dp is None:
            continue
        if apdu_asdu.type_id is TypeId.C_SE_NC and dp.kind == "setpoint":
            asset = net.asset(dp.ref)
            value = obj.payload.value
            if not asset.p_min_pu <= value <= asset.p_max_pu:
                return Alert(t_ms, "model", "implausible-command", source, dp.rtu, "critical", {
                    "ioa": obj.ioa, "asset": asset.id, "value": value,
                    "pMin": asset.p_min_pu, "pMax": asset.p_max_pu,
                }, anchor=str(obj.ioa))
        if apdu_asdu.type_id is TypeId.C_SC_NA and dp.kind == "switch" and not obj.payload.on:
            current = _with_breakers(net, breakers)
            islanded = would_island(current, dp.ref)
            if islanded:
                return Alert(t_ms, "model", "islanding-command", source, dp.rtu, "critical", {
                    "ioa": obj.ioa, "branch": dp.ref, "breakers": dict(sorted(breakers.items())),
                    "islanded": islanded,
                }, anchor=str(obj.ioa))
    return None


def _with_breakers(net: GridNetwork, breakers: dict[str, bool]) -> GridNetwork:
    branches = tuple(replace(br, breaker_closed=breakers.get(br.id, br.breaker_closed)) for br in net.branches)
    return replace(net, branches=branches)


# -- serialization of the detector context --------------------------------------


def grid_to_dict(net: GridNetwork) -> dict:
    return {
        "slack": net.slack_bus_id,
        "buses": [[b.id, b.nominal_kv] for b in net.buses],
        "branches": [[b.id, b.from_bus, b.to_bus, b.reactance_pu, b.rating_pu, b.breaker_closed] for b in net.branches],
        "assets": [[a.id, a.bus_id, a.kind, a.p_min_pu, a.p_max_pu, a.p_set_pu] for a in net.assets],
    }


def grid_from_dict(d: dict) -> GridNetwork:
    return GridNetwork(
        tuple(Bus(i, kv) for i, kv in d["buses"]),
        tuple(Branch(*b) for b in d["branches"]),
        d["slack"],
        tuple(Asset(*a) for a in d["assets"]),
    )


@dataclass
class IdsContext:
    acl: AclWhitelist
    protocol: ProtocolWhitelist
    config: IdsConfig
    grid: GridNetwork
    datapoints: DatapointMap
    book: AddressBook

    def to_dict(self) -> dict:
        return {
            "acl": self.acl.to_dict(),
            "protocol": self.protocol.to_dict(),
            "config": self.config.to_dict(),
            "grid": grid_to_dict(self.grid),
            "datapoints": [[dp.ioa, dp.rtu, dp.kind, dp.ref] for dp in self.datapoints],
            "addressBook": self.book.to_dict(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> IdsContext:
        return cls(
            AclWhitelist.from_dict(d["acl"]),
            ProtocolWhitelist.from_dict(d["protocol"]),
            IdsConfig.from_dict(d["config"]),
            grid_from_dict(d["grid"]),
            DatapointMap(Datapoint(*p) for p in d["datapoints"]),
            AddressBook.from_dict(d["addressBook"]),
        )


# -- the detector -------------------------------------------------------------


@dataclass
class _Conn:
    server_view: SessionState = field(default_factory=SessionState)
    client_view: SessionState = field(default_factory=SessionState)
    readers: dict[str, FrameReader] = field(default_factory=lambda: {TO_SERVER: FrameReader(), TO_CLIENT: FrameReader()})


class Detector:
    """Stateful fold over tapped packets and periodic model checks."""

    def __init__(self, ctx: IdsContext, start_ms: int = 0):
        self.ctx = ctx
        self.cfg = ctx.config
        self.start_ms = start_ms
        self.image: dict[int, ImageEntry] = {}
        self._seen: set[int] = set()
        self._scan = ScanDetector(self.cfg.scan_k, self.cfg.scan_window_ms)
        self._conns: dict[tuple, _Conn] = {}
        self._alerts: list[Alert] = []
        self._open: dict[tuple, Alert] = {}
        self._server_rtu = {}
        for dp in ctx.datapoints:
            l3 = ctx.book.entries.get(dp.rtu, (None, None))[1]
            if l3 is not None:
                self._server_rtu[l3] = dp.rtu
        self.active_model_alerts: list[Alert] = []

    def enabled(self, layer: str) -> bool:
        return layer in self.cfg.layers

    # suppression: same key inside the window folds into the first alert
    def _emit(self, alert: Alert) -> Alert | None:
        prev = self._open.get(alert.key)
        if prev is not None and alert.t_ms - prev.t_ms <= self.cfg.suppress_ms:
            prev.count += 1
            return None
        self._open[alert.key] = alert
        self._alerts.append(alert)
        return alert

    def observe(self, t_ms: int, pkt: Packet) -> list[Alert]:
        """Feed one tap copy; copies of an already seen packet are ignored."""
        if pkt.packet_id is not None:
            if pkt.packet_id in self._seen:
                return []
            self._seen.add(pkt.packet_id)
        raised: list[Alert] = []
        book = self.ctx.book
        if self.enabled("acl"):
            a = acl_check(pkt, self.ctx.acl, book, t_ms)
            if a is not None:
                raised.append(a)
            if pkt.kind in CONTACT_KINDS:
                src = book.name(pkt.src_l2, pkt.src_l3)
                window = self._scan.observe(t_ms, src, pkt.dst_l3, pkt.dst_port)
                if window is not None:
                    raised.append(Alert(t_ms, "acl", "scan", src, src, "critical", {
                        "contacts": [list(c) for c in window], "k": self.cfg.scan_k,
                        "windowMs": self.cfg.scan_window_ms,
                    }, anchor=src))
        if pkt.kind == "data":
            raised += self._telecontrol(t_ms, pkt)
        return [e for e in (self._emit(a) for a in raised) if e is not None]

    def _telecontrol(self, t_ms: int, pkt: Packet) -> list[Alert]:
        cd = classify_direction(pkt)
        if cd is None:
            return []
        flow, direction = cd
        book = self.ctx.book
        client_port = pkt.src_port if direction == TO_SERVER else pkt.dst_port
        conn = self._conns.setdefault((flow, client_port), _Conn())
        source = book.name(pkt.src_l2, pkt.src_l3)
        subject = book.name(pkt.dst_l2, pkt.dst_l3)
        client = book.name(None, flow.client_l3)
        server = book.name(None, flow.server_l3)
        out: list[Alert] = []
        try:
            frames = conn.readers[direction].feed(pkt.payload)
        except DecodeError as exc:
            conn.readers[direction] = FrameReader()
            if self.enabled("protocol"):
                out.append(Alert(t_ms, "protocol", "malformed", source, subject, "warning", {
                    "flow": str(flow), "direction": direction, "error": type(exc).__name__,
                    "packet": packet_summary(pkt),
                }, anchor=str(flow)))
            return out
        whitelisted = flow in self.ctx.protocol.flows
        for apdu in frames:
            if direction == TO_SERVER:
                conn.server_view, alerts = protocol_check(flow, direction, apdu, self.ctx.protocol,
                                                          conn.server_view, t_ms, client, server)
                conn.client_view, _ = session_accept(conn.client_view, apdu, "outbound")
            else:
                conn.client_view, alerts = protocol_check(flow, direction, apdu, self.ctx.protocol,
                                                          conn.client_view, t_ms, server, client)
                conn.server_view, _ = session_accept(conn.server_view, apdu, "outbound")
            if self.enabled("protocol"):
                out += alerts
            if apdu.asdu is None:
                continue
            if direction == TO_CLIENT and whitelisted:
                self._update_image(t_ms, flow, apdu)
            if direction == TO_SERVER and self.enabled("model") and self.cfg.model.command_plausibility:
                breakers = breaker_states(self.image, self.ctx.grid, self.ctx.datapoints)
                a = command_plausibility(apdu.asdu, self.ctx.grid, self.ctx.datapoints, breakers, t_ms, client)
                if a is not None:
                    out.append(a)
        return out

    def _update_image(self, t_ms: int, flow: Flow, apdu: Apdu) -> None:
        asdu = apdu.asdu
        if asdu.cot not in (Cot.SPONTANEOUS, Cot.INTERROGATED):
            return
        owner = self._server_rtu.get(flow.server_l3)
        for obj in asdu.objects:
            dp = self.ctx.datapoints.by_ioa.get(obj.ioa)
            if dp is None or dp.rtu != owner:
                continue
            if isinstance(obj.payload, MeasuredFloat) and dp.kind in ("injection", "flow"):
                self.image[obj.ioa] = ImageEntry(obj.payload.value, t_ms)
            elif isinstance(obj.payload, SinglePoint) and dp.kind == "breaker":
                self.image[obj.ioa] = ImageEntry(1.0 if obj.payload.on else 0.0, t_ms)

    def check(self, t_ms: int) -> list[Alert]:
        """Periodic model-layer evaluation over the shadow process image."""
        if not self.enabled("model"):
            self.active_model_alerts = []
            return []
        grid = _with_breakers(self.ctx.grid, breaker_states(self.image, self.ctx.grid, self.ctx.datapoints))
        found = model_check(self.image, grid, self.ctx.datapoints, self.cfg.model, t_ms, self.start_ms)
        self.active_model_alerts = found
        return [e for e in (self._emit(a) for a in found) if e is not None]

    @property
    def alerts(self) -> list[Alert]:
        return list(self._alerts)


# -- offline re-derivation ----------------------------------------------------


def rederive(alert: Alert, ctx: IdsContext) -> bool:
    """Re-run the rule named by ``alert`` on its stored evidence."""
    ev = alert.evidence
    rule = alert.rule_id
    if alert.layer == "acl" and rule != "scan":
        got = acl_check(packet_from_summary(ev["packet"]), ctx.acl, ctx.book, alert.t_ms)
        return got is not None and (got.rule_id, got.source_node, got.subject_device) == (
            rule, alert.source_node, alert.subject_device)
    if rule == "scan":
        contacts = [tuple(c) for c in ev["contacts"]]
        return scan_detect(contacts, ev["k"], ev["windowMs"])
    if alert.layer == "protocol":
        if rule == "malformed":
            try:
                decode_stream(bytes.fromhex(ev["packet"]["payload"]))
            except DecodeError:
                return True
            return False
        (apdu,) = decode_stream(bytes.fromhex(ev["frame"]))
        s = ev["session"]
        state = SessionState(s["started"], s["nextSend"], s["nextExpected"], s["peerAcked"])
        _, events = session_accept(state, apdu, "inbound")
        found = protocol_findings(Flow.parse(ev["flow"]), ev["direction"], apdu, ctx.protocol, events)
        return any(r == rule for r, _, _ in found)
    if rule == "bad-data":
        flagged = {b: [tuple(t) for t in terms] for b, terms in ev["flagged"].items()}
        terms = flagged[ev["bus"]]
        r = sum(sign * v for _, sign, v in terms)
        if abs(r) <= ev["threshold"]:
            return False
        scores = _suspect(ctx.datapoints, flagged)
        return _pick_subject(ctx.datapoints, [i for i, _, _ in terms], scores) == alert.subject_device
    if rule == "limit-violation":
        return abs(ev["value"]) > ev["rating"]
    if rule == "stale-data":
        return all(a > ev["staleAfterMs"] for a in ev["ages"].values())
    if rule == "implausible-command":
        return not ev["pMin"] <= ev["value"] <= ev["pMax"]
    if rule == "islanding-command":
        net = _with_breakers(ctx.grid, ev["breakers"])
        return would_island(net, ev["branch"]) == ev["islanded"] != []
    return False


__all__ = [
    "AclWhitelist", "AddressBook", "Alert", "Detector", "Flow", "FlowProfile", "IdsConfig", "IdsContext",
    "ImageEntry", "ModelCheckConfig", "ProtocolWhitelist", "ScanDetector", "acl_check", "breaker_states",
    "command_plausibility", "derive_whitelists", "model_check", "packet_summary", "protocol_check",
    "protocol_findings", "rederive", "rtu_profile", "scan_detect",
]
