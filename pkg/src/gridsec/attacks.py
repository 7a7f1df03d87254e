"""Scripted attack actions and their ground-truth labels.

Each action kind has a parser that validates its parameters against the
scenario at load time, and a small generator or mutator that the engine
drives on the shared clock. Every action yields a :class:`GroundTruth`
record naming the devices an alert must reference to count as a detection.
"""

from __future__ import annotations

import ipaddress
import logging
from dataclasses import dataclass, field, replace
from typing import Any, Callable

from .codec import (
    TELECONTROL_PORT, Apdu, Asdu, Cot, DecodeError, IFrame, InformationObject, MeasuredFloat,
    SetpointFloat, SingleCommand, TypeId, UFrame, UFunction, decode_stream, encode_apdu, i_frame, u_frame,
)
from .netsim import Packet, TopologyNode, build_topology

log = logging.getLogger(__name__)

ATTACK_KINDS = (
    "NetworkScan", "UnauthorizedConnect", "FalseDataInjection", "RogueCommand",
    "ConfigTamper", "CoverUp", "TrafficCopy",
)
FDI_MODES = ("offset", "replace", "freeze")


class AttackError(Exception):
    pass


class UnknownSubnet(AttackError):
    pass


class IoaNotOnPath(AttackError):
    pass


class UnknownRtu(AttackError):
    pass


class InconsistentParams(AttackError):
    pass


@dataclass(frozen=True)
class AttackAction:
    id: str
    kind: str
    start_ms: int
    params: dict[str, Any] = field(hash=False, compare=True)
    label: str = ""
    devices: tuple[str, ...] = ()
    expect_detection: bool | None = None
    note: str = ""


@dataclass(frozen=True)
class GroundTruth:
    attack_id: str
    kind: str
    label: str
    devices: tuple[str, ...]
    start_ms: int
    end_ms: int
    expect_detection: bool
    note: str = ""

    def to_dict(self) -> dict:
        return {
            "id": self.attack_id,
            "kind": self.kind,
            "label": self.label,
            "devices": list(self.devices),
            "startMs": self.start_ms,
            "endMs": self.end_ms,
            "expectDetection": self.expect_detection,
            "note": self.note,
        }

    @classmethod
    def from_dict(cls, d: dict) -> GroundTruth:
        return cls(d["id"], d["kind"], d["label"], tuple(d["devices"]), d["startMs"], d["endMs"],
                   d["expectDetection"], d.get("note", ""))


# -- parsing ----------------------------------------------------------------


def _node(scenario, node_id: str) -> TopologyNode:
    for n in scenario.topology.nodes:
        if n.id == node_id:
            return n
    raise AttackError(f"unknown node {node_id!r}")


def _ports(spec) -> tuple[int, ...]:
    if isinstance(spec, int):
        return (spec,)
    if isinstance(spec, str) and "-" in spec:
        lo, hi = (int(x) for x in spec.split("-"))
        if lo > hi:
            raise AttackError(f"empty port range {spec}")
        return tuple(range(lo, hi + 1))
    if isinstance(spec, (list, tuple)):
        return tuple(int(p) for p in spec)
    return (int(spec),)


def scan_targets(nodes, attacker: str, subnet: str) -> list[TopologyNode]:
    try:
        net = ipaddress.ip_network(subnet, strict=False)
    except ValueError:
        raise UnknownSubnet(subnet) from None
    targets = [n for n in nodes if n.id != attacker and ipaddress.ip_address(n.l3) in net]
    if not targets:
        raise UnknownSubnet(subnet)
    return sorted(targets, key=lambda n: ipaddress.ip_address(n.l3))


def on_path(route: list[tuple[str, str]], link_id: str) -> bool:
    return any(link == link_id for link, _ in route)


def _route(scenario, src: str, dst: str):
    return build_topology(scenario.topology).route(src, dst)


def parse_attack(raw: dict, scenario, index: int = 0) -> AttackAction | None:
    """Validate one attack entry against the scenario."""
    kind = raw.get("kind")
    if kind not in ATTACK_KINDS:
        raise AttackError(f"unknown attack kind {kind!r}")
    attack_id = str(raw.get("id", f"{kind.lower()}{index}"))
    start = int(raw.get("start_ms", 0))
    label = str(raw.get("label", attack_id))
    expect = raw.get("expect_detection")
    note = str(raw.get("note", ""))
    duration = scenario.duration_ms
    if start < 0:
        raise AttackError("start_ms must not be negative")
    if start >= duration and kind != "FalseDataInjection":
        raise AttackError(f"start_ms={start} is beyond the run duration {duration}")
    p: dict[str, Any] = {}
    dpmap = scenario.datapoints

    if kind == "NetworkScan":
        attacker = _node(scenario, raw["attacker"]).id
        targets = scan_targets(scenario.topology.nodes, attacker, raw["subnet"])
        rate = float(raw.get("rate_per_s", 10))
        if rate <= 0:
            raise AttackError("rate_per_s must be positive")
        p = {"attacker": attacker, "subnet": raw["subnet"], "ports": _ports(raw.get("ports", TELECONTROL_PORT)),
             "rate_per_s": rate, "targets": tuple(t.id for t in targets)}
        devices = (attacker,)
    elif kind == "UnauthorizedConnect":
        attacker = _node(scenario, raw["attacker"]).id
        target = _node(scenario, raw.get("target", scenario.scada_id)).id
        spoof = raw.get("spoof_as")
        if spoof is not None:
            _node(scenario, spoof)
        p = {"attacker": attacker, "target": target, "port": int(raw.get("port", TELECONTROL_PORT)),
             "spoof_as": spoof}
        devices = (attacker,)
    elif kind == "FalseDataInjection":
        link = raw["link"]
        if link not in {lk.id for lk in scenario.topology.links}:
            raise AttackError(f"unknown link {link!r}")
        ioas = tuple(int(i) for i in raw["ioas"])
        mode = raw.get("mode", "offset")
        if mode not in FDI_MODES:
            raise AttackError(f"unknown mode {mode!r}")
        value = raw.get("value", 0.0)
        if mode == "replace" and value == "last":
            mode = "freeze"
        for ioa in ioas:
            if ioa not in dpmap or dpmap[ioa].kind not in ("injection", "flow"):
                raise IoaNotOnPath(f"ioa {ioa} is not an analog measurement")
            if not on_path(_route(scenario, dpmap[ioa].rtu, scenario.scada_id), link):
                raise IoaNotOnPath(f"ioa {ioa} does not cross link {link}")
        length = int(raw.get("duration_ms", duration - start))
        p = {"link": link, "ioas": ioas, "mode": mode,
             "value": 0.0 if mode == "freeze" else float(value), "end_ms": min(start + length, duration)}
        devices = tuple(sorted({dpmap[i].rtu for i in ioas}))
    elif kind == "RogueCommand":
        attacker = _node(scenario, raw["attacker"]).id
        target = raw["target"]
        if target not in dpmap.rtus:
            raise UnknownRtu(target)
        cmd = raw["command"]
        if "switch" in cmd:
            dp = dpmap.lookup("switch", cmd["switch"])
            type_id, value = TypeId.C_SC_NA, bool(cmd.get("close", False))
        elif "setpoint" in cmd:
            dp = dpmap.lookup("setpoint", cmd["setpoint"])
            type_id, value = TypeId.C_SE_NC, float(cmd["value"])
        else:
            raise AttackError("command needs a switch or setpoint entry")
        if dp is None or dp.rtu != target:
            raise InconsistentParams(f"{target} does not own the commanded point")
        p = {"attacker": attacker, "target": target, "ioa": dp.ioa, "type_id": int(type_id), "value": value,
             "common_address": scenario.common_addresses[target]}
        devices = (attacker, target)
    elif kind == "ConfigTamper":
        target = raw["target"]
        if target not in dpmap.rtus:
            raise UnknownRtu(target)
        changes = []
        for ch in raw.get("changes", ()):
            if "scaling" in ch:
                ioa = int(ch["scaling"])
                if ioa not in dpmap or dpmap[ioa].rtu != target:
                    raise InconsistentParams(f"ioa {ioa} not owned by {target}")
                changes.append(("scaling", ioa, float(ch["factor"])))
            elif "maintenance" in ch:
                changes.append(("maintenance", 0, bool(ch["maintenance"])))
            else:
                raise AttackError(f"unknown config change {ch}")
        if not changes:
            raise AttackError("config tamper without changes")
        p = {"target": target, "changes": tuple(changes)}
        devices = (target,)
        if expect is None:
            expect = any(c[0] == "scaling" and c[2] != 1.0 for c in changes)
    elif kind == "CoverUp":
        asset_id = raw["asset"]
        try:
            asset = scenario.grid.asset(asset_id)
        except Exception:
            raise AttackError(f"unknown asset {asset_id!r}") from None
        sp = dpmap.lookup("setpoint", asset_id)
        if sp is None:
            raise InconsistentParams(f"asset {asset_id} has no controlling RTU")
        forced = raw.get("forced", "pmax")
        forced = asset.p_max_pu if forced == "pmax" else asset.p_min_pu if forced == "pmin" else float(forced)
        if not asset.p_min_pu <= forced <= asset.p_max_pu:
            raise InconsistentParams(f"forced setpoint {forced} outside the capability of {asset_id}")
        ioas = tuple(int(i) for i in raw.get("falsified_ioas", ()))
        for ioa in ioas:
            if ioa not in dpmap or dpmap[ioa].rtu != sp.rtu:
                raise InconsistentParams(f"ioa {ioa} is not owned by {sp.rtu}")
        length = int(raw.get("duration_ms", duration - start))
        p = {"asset": asset_id, "forced": forced, "ioas": ioas, "rtu": sp.rtu,
             "end_ms": min(start + length, duration)}
        devices = (sp.rtu,)
        if expect is None:
            expect = forced != asset.p_set_pu
    else:  # TrafficCopy
        attacker = _node(scenario, raw["attacker"]).id
        point = raw["point"]
        if point not in {lk.id for lk in scenario.topology.links} | {n.id for n in scenario.topology.nodes}:
            raise AttackError(f"unknown tap point {point!r}")
        p = {"attacker": attacker, "point": point}
        devices = (attacker,)
        if expect is None:
            expect = False
            note = note or "undetectable: passive copy leaves no trace on monitored spans"
    return AttackAction(attack_id, kind, start, p, label, devices,
                        None if expect is None else bool(expect), note)


# -- generators ---------------------------------------------------------------


def inject_scan(targets: list[TopologyNode], attacker: TopologyNode, ports, rate_per_s: float,
                start_ms: int, label: str, src_port: int = 50_000) -> list[tuple[int, Packet]]:
    """One probe per (target, port), in address then port order, at a fixed rate."""
    out = []
    i = 0
    for node in targets:
        for port in ports:
            t = start_ms + int(i * 1000 // rate_per_s)
            out.append((t, Packet(attacker.l2, node.l2, attacker.l3, node.l3, src_port, port, "probe", label=label)))
            i += 1
    return out


def connect_attempt(attacker: TopologyNode, target: TopologyNode, port: int, src_port: int, label: str,
                    spoof: TopologyNode | None = None) -> Packet:
    """Connection request; a spoofed attempt borrows another node's L3 address."""
    src_l3 = spoof.l3 if spoof is not None else attacker.l3
    return Packet(attacker.l2, target.l2, src_l3, target.l3, src_port, port, "connectRequest", label=label)


class FalseDataMutator:
    """In-path rewrite of measured values on one link."""

    def __init__(self, ioas, mode: str, value: float, start_ms: int, end_ms: int, label: str):
        self.ioas = set(ioas)
        self.mode = mode
        self.value = value
        self.start_ms = start_ms
        self.end_ms = end_ms
        self.label = label
        self.last_seen: dict[int, float] = {}
        self.mutated = 0

    def _new_value(self, ioa: int, old: float) -> float:
        if self.mode == "offset":
            return old + self.value
        if self.mode == "replace":
            return self.value
        return self.last_seen.get(ioa, old)

    def __call__(self, pkt: Packet, t_ms: int) -> Packet:
        if pkt.kind != "data" or pkt.src_port != TELECONTROL_PORT:
            return pkt
        try:
            frames = decode_stream(pkt.payload)
        except DecodeError:
            return pkt
        active = self.start_ms <= t_ms < self.end_ms
        changed = False
        out = []
        for frame in frames:
            asdu = frame.asdu
            if asdu is None or asdu.type_id is not TypeId.M_ME_NC:
                out.append(frame)
                continue
            objs = []
            for obj in asdu.objects:
                if obj.ioa in self.ioas:
                    if active:
                        obj = InformationObject(obj.ioa, MeasuredFloat(self._new_value(obj.ioa, obj.payload.value),
                                                                       obj.payload.quality))
                        changed = True
                    else:
                        self.last_seen[obj.ioa] = obj.payload.value
                objs.append(obj)
            out.append(Apdu(frame.control, replace(asdu, objects=tuple(objs))))
        if not changed:
            return pkt
        self.mutated += 1
        return replace(pkt, payload=b"".join(encode_apdu(f) for f in out), label=self.label)


class RogueClient:
    """Attacker-side telecontrol client: connect, start, command, leave."""

    def __init__(self, attacker: TopologyNode, target: TopologyNode, asdu: Asdu, src_port: int, label: str):
        self.attacker = attacker
        self.target = target
        self.asdu = asdu
        self.src_port = src_port
        self.label = label
        self.done = False
        self.finished_ms: int | None = None
        self.sent = 0

    def _pkt(self, kind: str, payload: bytes = b"") -> Packet:
        a, t = self.attacker, self.target
        return Packet(a.l2, t.l2, a.l3, t.l3, self.src_port, TELECONTROL_PORT, kind, payload, label=self.label)

    def start(self) -> Packet:
        return self._pkt("connectRequest")

    def owns(self, pkt: Packet) -> bool:
        return pkt.dst_port == self.src_port and pkt.src_l3 == self.target.l3

    def on_packet(self, pkt: Packet, t_ms: int) -> list[Packet]:
        if self.done:
            return []
        if pkt.kind == "connectAccept":
            return [self._pkt("data", encode_apdu(u_frame(UFunction.STARTDT_ACT)))]
        if pkt.kind != "data":
            return []
        out = []
        try:
            frames = decode_stream(pkt.payload)
        except DecodeError:
            return []
        for f in frames:
            if isinstance(f.control, UFrame) and f.control.function is UFunction.STARTDT_CON:
                out.append(self._pkt("data", encode_apdu(i_frame(self.sent, 0, self.asdu))))
                self.sent += 1
            elif isinstance(f.control, IFrame) and f.asdu is not None and f.asdu.cot is Cot.ACT_CON:
                self.done = True
                self.finished_ms = t_ms
                out.append(self._pkt("disconnect"))
        return out


def rogue_asdu(params: dict) -> Asdu:
    type_id = TypeId(params["type_id"])
    payload = SingleCommand(params["value"]) if type_id is TypeId.C_SC_NA else SetpointFloat(params["value"])
    return Asdu(type_id, Cot.ACTIVATION, params["common_address"], (InformationObject(params["ioa"], payload),))


def apply_config_tamper(config, changes) -> tuple[Any, list[str]]:
    """Mutated RTU config plus the entries the RTU writes to its own log."""
    entries = []
    scaling = dict(config.scaling)
    maintenance = config.maintenance_mode
    for what, ioa, value in changes:
        if what == "scaling":
            scaling[ioa] = value
            entries.append(f"configuration changed: scaling factor of ioa {ioa} set to {value}")
        else:
            maintenance = value
            entries.append("maintenance access" if value else "maintenance mode left")
    return replace(config, scaling=scaling, maintenance_mode=maintenance), entries


class CoverUpFilter:
    """Keeps reporting pre-attack values for the falsified points."""

    def __init__(self, ioas, start_ms: int, end_ms: int):
        self.ioas = set(ioas)
        self.start_ms = start_ms
        self.end_ms = end_ms
        self.frozen: dict[int, float] = {}

    def capture(self, last_reported: dict[int, float]) -> None:
        self.frozen = {i: v for i, v in last_reported.items() if i in self.ioas}

    def __call__(self, ioa: int, value: float, t_ms: int) -> float:
        if ioa in self.frozen and self.start_ms <= t_ms < self.end_ms:
            return self.frozen[ioa]
        return value


OutputFilter = Callable[[int, float, int], float]
