"""Co-simulation of the grid, the OT network, SCADA, RTUs and attackers.

One :class:`Simulation` owns a network simulator, the current grid state and
all agents. Grid steps, IDS checks, heartbeats, scheduled commands and attack
actions are timer events on the network's clock, so everything interleaves
deterministically with packet deliveries.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from . import attacks as atk
from .codec import (
    TELECONTROL_PORT, Asdu, Cot, DecodeError, FrameReader, IFrame, InformationObject,
    InterrogationQualifier, MeasuredFloat, ReplyWith, SessionState, SetpointFloat, SingleCommand,
    SinglePoint, TypeId, UFunction, encode_apdu, i_frame, session_accept, u_frame,
)
from .correlation import assess_compromise, correlate, format_report
from .grid import (
    CapabilityViolation, GridNetwork, Setpoint, Switch, UnknownTarget, apply_command,
    generate_measurements, solve_energized,
)
from .ids import AddressBook, Detector, IdsContext, derive_whitelists, packet_from_summary, packet_summary
from .metrics import compute_metrics
from .monitoring import (
    BreakerOpen, FreshnessTick, Heartbeat, LinkChange, classify_disturbance, initial_board,
    snapshot, update_status,
)
from .netsim import (
    DeliveryEvent, DropEvent, LinkEvent, Packet, TapEvent, TimerEvent, build_topology,
)
from .scenario import Scenario

log = logging.getLogger(__name__)

MONITOR_PORT = 4000
SCADA_FIRST_PORT = 30_000
ATTACKER_FIRST_PORT = 50_000


def dumps(obj: Any) -> str:
    return json.dumps(obj, separators=(",", ":"))


def record(t_ms: int, kind: str, source: str, payload: Any) -> str:
    return dumps({"tMs": t_ms, "kind": kind, "source": source, "payload": payload})


@dataclass(frozen=True)
class RtuConfig:
    reporting_period_ms: int = 1000
    scaling: dict[int, float] = field(default_factory=dict)
    maintenance_mode: bool = False


@dataclass(frozen=True)
class ImplausibleCommandEvent:
    rtu: str
    asset: str
    value: float
    p_min: float
    p_max: float


@dataclass
class _Conn:
    peer_l2: str
    peer_l3: str
    peer_port: int
    local_port: int
    state: SessionState = field(default_factory=SessionState)
    reader: FrameReader = field(default_factory=FrameReader)
    accepted: bool = False


def _frame_asdus(conn: _Conn, asdus: list[Asdu]) -> bytes:
    out = []
    for asdu in asdus:
        frame = i_frame(conn.state.next_send, conn.state.next_expected, asdu)
        conn.state, _ = session_accept(conn.state, frame, "outbound")
        out.append(encode_apdu(frame))
    return b"".join(out)


class RtuAgent:
    def __init__(self, node, points, common_address: int, config: RtuConfig, master_l3: str):
        self.node = node
        self.points = sorted(points, key=lambda dp: dp.ioa)
        self.owned = {dp.ioa: dp for dp in self.points}
        self.common_address = common_address
        self.config = config
        self.master_l3 = master_l3
        self.conns: dict[tuple[str, int], _Conn] = {}
        self.latest: dict[int, float] = {}
        self.last_sent: dict[int, float] = {}
        self.filters: list[atk.OutputFilter] = []
        self.log: list[tuple[int, str]] = []

    @property
    def node_id(self) -> str:
        return self.node.id

    def master(self) -> _Conn | None:
        for (l3, _), conn in sorted(self.conns.items()):
            if l3 == self.master_l3 and conn.state.started:
                return conn
        return None

    def outgoing(self, ioa: int, value: float, t_ms: int) -> float:
        value *= self.config.scaling.get(ioa, 1.0)
        for f in self.filters:
            value = f(ioa, value, t_ms)
        return value

    def report(self, cot: Cot, t_ms: int) -> list[Asdu]:
        analog, status = [], []
        for dp in self.points:
            if dp.ioa not in self.latest:
                continue
            if dp.kind in ("injection", "flow"):
                v = self.outgoing(dp.ioa, self.latest[dp.ioa], t_ms)
                self.last_sent[dp.ioa] = v
                analog.append(InformationObject(dp.ioa, MeasuredFloat(v)))
            elif dp.kind == "breaker":
                status.append(InformationObject(dp.ioa, SinglePoint(self.latest[dp.ioa] >= 0.5)))
        out = []
        if analog:
            out.append(Asdu(TypeId.M_ME_NC, cot, self.common_address, tuple(analog)))
        if status:
            out.append(Asdu(TypeId.M_SP_NA, cot, self.common_address, tuple(status)))
        return out


def _confirm(asdu: Asdu, cot: Cot, negative: bool = False) -> Asdu:
    return Asdu(asdu.type_id, cot, asdu.common_address, asdu.objects, negative)


def rtu_handle_command(rtu: RtuAgent, asdu: Asdu, grid: GridNetwork, t_ms: int = 0):
    """Execute a command ASDU against ``grid``.

    Returns (reply ASDUs, accepted grid command or None, events). Rejections
    are negative confirmations, never exceptions.
    """
    events: list[Any] = []
    if asdu.type_id is TypeId.C_IC_NA:
        if asdu.cot is not Cot.ACTIVATION or asdu.common_address != rtu.common_address:
            return [_confirm(asdu, Cot.ACT_CON, True)], None, events
        replies = [_confirm(asdu, Cot.ACT_CON)] + rtu.report(Cot.INTERROGATED, t_ms) + [_confirm(asdu, Cot.ACT_TERM)]
        return replies, None, events
    if asdu.cot is not Cot.ACTIVATION or asdu.common_address != rtu.common_address or len(asdu.objects) != 1:
        return [_confirm(asdu, Cot.ACT_CON, True)], None, events
    obj = asdu.objects[0]
    dp = rtu.owned.get(obj.ioa)
    command = None
    if asdu.type_id is TypeId.C_SE_NC and dp is not None and dp.kind == "setpoint":
        command = Setpoint(dp.ref, obj.payload.value)
    elif asdu.type_id is TypeId.C_SC_NA and dp is not None and dp.kind == "switch":
        command = Switch(dp.ref, obj.payload.on)
    if command is None:
        return [_confirm(asdu, Cot.ACT_CON, True)], None, events
    try:
        apply_command(grid, command)
    except CapabilityViolation as exc:
        events.append(ImplausibleCommandEvent(rtu.node_id, exc.asset_id, exc.p_pu, exc.p_min, exc.p_max))
        return [_confirm(asdu, Cot.ACT_CON, True)], None, events
    except UnknownTarget:
        return [_confirm(asdu, Cot.ACT_CON, True)], None, events
    return [_confirm(asdu, Cot.ACT_CON)], command, events


class ScadaAgent:
    def __init__(self, node):
        self.node = node
        self.sessions: dict[str, _Conn] = {}
        self.image: dict[int, tuple[float, int]] = {}
        self.pending: dict[tuple[str, int], tuple[int, Asdu]] = {}
        self._ports = SCADA_FIRST_PORT

    def next_port(self) -> int:
        self._ports += 1
        return self._ports


@dataclass
class RunArtifacts:
    event_log: list[str]
    alert_log: list[str]
    monitoring_log: list[str]
    incident_report: str
    metrics: dict

    FILES = ("events.jsonl", "alerts.jsonl", "monitoring.jsonl", "incidents.txt", "metrics.json")

    def write(self, out_dir: str | Path) -> list[Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        texts = (
            "".join(line + "\n" for line in self.event_log),
            "".join(line + "\n" for line in self.alert_log),
            "".join(line + "\n" for line in self.monitoring_log),
            self.incident_report,
            json.dumps(self.metrics, indent=2) + "\n",
        )
        paths = []
        for name, text in zip(self.FILES, texts):
            p = out / name
            p.write_text(text)
            paths.append(p)
        return paths


class Simulation:
    """One scenario run; ``run_until`` allows stepping for inspection."""

    def __init__(self, scenario: Scenario):
        self.sc = scenario
        self.period = scenario.reporting_period_ms
        self.duration = scenario.duration_ms
        self.net = build_topology(scenario.topology)
        self.nodes = {n.id: n for n in scenario.topology.nodes}
        self.grid = scenario.grid
        self.normal_breakers = {br.id: br.breaker_closed for br in scenario.grid.branches}
        self.rng = np.random.default_rng(scenario.seed)
        self.events: list[str] = []
        self.monitoring_log: list[str] = []
        self.truth: list[dict] = []
        self.ids_taps = {self.net.attach_tap(p, owner="ids") for p in scenario.ids_taps}
        self._logged: set[int] = set()

        acl, proto = derive_whitelists(scenario)
        self.ctx = IdsContext(acl, proto, scenario.ids, scenario.grid, scenario.datapoints,
                              AddressBook.from_topology(scenario.topology))
        self.detector = Detector(self.ctx)
        self._record(0, "run-info", "engine", {
            "scenario": scenario.name, "seed": scenario.seed, "durationMs": self.duration,
            "reportingPeriodMs": self.period,
        })
        self._record(0, "ids-config", "engine", self.ctx.to_dict())

        self.scada = ScadaAgent(self.nodes[scenario.scada_id])
        self.rtus = {
            rtu: RtuAgent(self.nodes[rtu], scenario.datapoints.owned_by(rtu), scenario.common_addresses[rtu],
                          RtuConfig(self.period), self.scada.node.l3)
            for rtu in scenario.rtu_ids
        }
        self.board = initial_board(
            {rtu: ([dp.ioa for dp in a.points if dp.kind in ("injection", "flow", "breaker")],
                   self.net.attached_links(rtu)) for rtu, a in self.rtus.items()},
            scenario.monitoring,
        )
        self.verdict = None
        self.verdicts_seen: list[str] = []
        self.ground_truth: dict[str, atk.GroundTruth] = {}
        self.rogues: dict[int, atk.RogueClient] = {}
        self.fdi: dict[str, atk.FalseDataMutator] = {}
        self.copies: dict[str, int] = {}
        self._attacker_ports = ATTACKER_FIRST_PORT
        self._prepare_attacks()

        self.net.schedule(0, ("connect",))
        self.net.schedule(0, ("grid-step",))
        self.net.schedule(scenario.ids.check_offset_ms, ("ids-check",))
        hb = scenario.monitoring.heartbeat_period_ms
        if hb < self.duration:
            self.net.schedule(hb, ("heartbeat",))
        for item in scenario.schedule:
            self.net.schedule(item.t_ms, ("schedule", item))
        for action in scenario.attacks:
            if action.start_ms < self.duration:
                self.net.schedule(action.start_ms, ("attack", action))
        self.finished = False

    # -- logging -------------------------------------------------------------

    def _record(self, t: int, kind: str, source: str, payload: Any) -> None:
        self.events.append(record(t, kind, source, payload))

    def _monitor(self, t: int, kind: str, payload: Any) -> None:
        self.monitoring_log.append(record(t, kind, "monitoring", payload))

    # -- packet helpers --------------------------------------------------------

    def _send(self, pkt: Packet, origin: str | None = None) -> None:
        self.net.send(pkt, self.net.now, origin)

    def _data(self, src, dst_l2, dst_l3, sport, dport, payload: bytes, label=None) -> Packet:
        return Packet(src.l2, dst_l2, src.l3, dst_l3, sport, dport, "data", payload, label=label)

    # -- main loop -------------------------------------------------------------

    def run_until(self, t_ms: int) -> None:
        limit = min(t_ms, self.duration - 1)
        while True:
            nxt = self.net.next_time()
            if nxt is None or nxt > limit:
                break
            for ev in self.net.step(nxt):
                self._dispatch(ev)

    def run(self) -> RunArtifacts:
        self.run_until(self.duration)
        return self.finish()

    def _dispatch(self, ev) -> None:
        if isinstance(ev, TimerEvent):
            self._timer(ev.t_ms, ev.payload)
        elif isinstance(ev, TapEvent):
            self._tap(ev)
        elif isinstance(ev, DropEvent):
            self._record(ev.t_ms, "drop", ev.node, {
                "packetId": ev.packet.packet_id, "reason": ev.reason, "kind": ev.packet.kind,
                "srcL3": ev.packet.src_l3, "dstL3": ev.packet.dst_l3, "dstPort": ev.packet.dst_port,
                "label": ev.packet.label,
            })
        elif isinstance(ev, LinkEvent):
            self._link(ev)
        elif isinstance(ev, DeliveryEvent):
            self._deliver(ev)

    def _tap(self, ev: TapEvent) -> None:
        pkt = ev.packet
        if ev.tap_id in self.ids_taps:
            if pkt.packet_id in self._logged:
                return
            self._logged.add(pkt.packet_id)
            self._record(ev.t_ms, "packet", ev.point, {"packet": packet_summary(pkt), "label": pkt.label})
            self.detector.observe(ev.t_ms, pkt)
        else:
            owner = self.net.tap_owner(ev.tap_id)
            self.copies[owner] = self.copies.get(owner, 0) + 1

    # -- timers ------------------------------------------------------------------

    def _timer(self, t: int, payload: tuple) -> None:
        what = payload[0]
        if what == "connect":
            for rtu in self.rtus:
                self._scada_connect(rtu)
        elif what == "grid-step":
            self._grid_step(t)
            if t + self.period < self.duration:
                self.net.schedule(t + self.period, ("grid-step",))
        elif what == "ids-check":
            self._ids_check(t)
            if t + self.period < self.duration:
                self.net.schedule(t + self.period, ("ids-check",))
        elif what == "heartbeat":
            self._heartbeats(t)
            nxt = t + self.sc.monitoring.heartbeat_period_ms
            if nxt < self.duration:
                self.net.schedule(nxt, ("heartbeat",))
        elif what == "schedule":
            self._scheduled(t, payload[1])
        elif what == "attack":
            self._attack(t, payload[1])

    def _grid_step(self, t: int) -> None:
        mult = self.sc.profile.multiplier(t)
        grid = self.grid
        for load, peak in self.sc.load_peaks.items():
            grid = grid.with_setpoint(load, -peak * mult)
        self.grid = grid
        sol = solve_energized(grid)
        self._record(t, "grid", "grid", {
            "flows": {k: round(v, 12) for k, v in sol.branch_flows_pu.items()},
            "injections": {k: round(v, 12) for k, v in sol.injections_pu.items()},
            "closed": sol.branch_closed,
        })
        self.truth.append({"t": t, "flows": sol.branch_flows_pu, "injections": sol.injections_pu})
        meas = generate_measurements(sol, self.sc.datapoints, self.sc.noise_sigma, self.rng, t)
        values = meas.as_values()
        for rtu in self.rtus.values():
            rtu.latest = {ioa: values[ioa] for ioa in rtu.owned if ioa in values}
            conn = rtu.master()
            if conn is not None:
                self._rtu_send(rtu, conn, rtu.report(Cot.SPONTANEOUS, t))

    def _ids_check(self, t: int) -> None:
        self._record(t, "ids-check", "ids", {})
        self.detector.check(t)
        last = {ioa: ts for ioa, (_, ts) in self.scada.image.items()}
        self.board = update_status(self.board, FreshnessTick(t, last))
        residual = sum(1 for a in self.detector.active_model_alerts if a.rule_id == "bad-data")
        image = {ioa: v for ioa, (v, _) in self.scada.image.items()}
        cls = classify_disturbance(self.board, image, self._breaker_events(), residual)
        if cls.verdict != self.verdict:
            self.verdict = cls.verdict
            if cls.verdict not in self.verdicts_seen:
                self.verdicts_seen.append(cls.verdict)
            self._monitor(t, "verdict", snapshot(self.board, cls))
        elif t % self.sc.monitoring.heartbeat_period_ms == self.sc.ids.check_offset_ms % self.sc.monitoring.heartbeat_period_ms:
            self._monitor(t, "snapshot", snapshot(self.board, cls))

    def _breaker_events(self) -> list[BreakerOpen]:
        out = []
        dpmap = self.sc.datapoints
        for br, normal in sorted(self.normal_breakers.items()):
            dp = dpmap.lookup("breaker", br)
            if dp is None or not normal or dp.ioa not in self.scada.image:
                continue
            if self.scada.image[dp.ioa][0] < 0.5:
                flow = dpmap.lookup("flow", br)
                out.append(BreakerOpen(br, dp.rtu, flow.ioa if flow else None))
        return out

    def _heartbeats(self, t: int) -> None:
        scada = self.scada.node
        for rtu in self.rtus.values():
            n = rtu.node
            self._send(Packet(n.l2, scada.l2, n.l3, scada.l3, MONITOR_PORT, MONITOR_PORT, "heartbeat"))

    def _scheduled(self, t: int, item) -> None:
        dpmap = self.sc.datapoints
        if item.action == "interrogation":
            targets = list(self.rtus) if item.target == "all" else [item.target]
            for rtu in targets:
                ca = self.sc.common_addresses[rtu]
                self._scada_command(rtu, Asdu(TypeId.C_IC_NA, Cot.ACTIVATION, ca,
                                              (InformationObject(0, InterrogationQualifier()),)))
        elif item.action == "setpoint":
            dp = dpmap.lookup("setpoint", item.target)
            self._scada_command(dp.rtu, Asdu(TypeId.C_SE_NC, Cot.ACTIVATION, self.sc.common_addresses[dp.rtu],
                                             (InformationObject(dp.ioa, SetpointFloat(item.value)),)))
        elif item.action == "switch":
            dp = dpmap.lookup("switch", item.target)
            self._scada_command(dp.rtu, Asdu(TypeId.C_SC_NA, Cot.ACTIVATION, self.sc.common_addresses[dp.rtu],
                                             (InformationObject(dp.ioa, SingleCommand(item.close)),)))
        elif item.action == "trip":
            self.grid = self.grid.with_breaker(item.target, False)
            self._record(t, "trip", "grid", {"branch": item.target})
        elif item.action == "link":
            self.net.set_link_state(item.target, item.up)

    # -- SCADA side --------------------------------------------------------------

    def _scada_connect(self, rtu_id: str) -> None:
        rtu = self.rtus[rtu_id].node
        port = self.scada.next_port()
        self.scada.sessions[rtu_id] = _Conn(rtu.l2, rtu.l3, TELECONTROL_PORT, port)
        s = self.scada.node
        self._send(Packet(s.l2, rtu.l2, s.l3, rtu.l3, port, TELECONTROL_PORT, "connectRequest"))

    def _scada_command(self, rtu_id: str, asdu: Asdu) -> None:
        conn = self.scada.sessions.get(rtu_id)
        t = self.net.now
        if conn is None or not conn.state.started:
            self._record(t, "command-skipped", self.scada.node.id, {"rtu": rtu_id, "typeId": int(asdu.type_id)})
            return
        self._record(t, "command", self.scada.node.id, {
            "rtu": rtu_id, "typeId": int(asdu.type_id), "ioa": asdu.objects[0].ioa,
        })
        s = self.scada.node
        self._send(self._data(s, conn.peer_l2, conn.peer_l3, conn.local_port, TELECONTROL_PORT,
                              _frame_asdus(conn, [asdu])))

    def _scada_receive(self, t: int, pkt: Packet) -> None:
        if pkt.kind == "heartbeat":
            rtu = self.ctx.book.by_l3(pkt.src_l3)
            if rtu in self.rtus:
                self.board = update_status(self.board, Heartbeat(rtu, t))
            return
        rtu_id = next((r for r, c in self.scada.sessions.items()
                       if c.peer_l3 == pkt.src_l3 and c.local_port == pkt.dst_port), None)
        if rtu_id is None:
            return
        conn = self.scada.sessions[rtu_id]
        s = self.scada.node
        if pkt.kind == "connectAccept":
            conn.accepted = True
            frame = u_frame(UFunction.STARTDT_ACT)
            conn.state, _ = session_accept(conn.state, frame, "outbound")
            self._send(self._data(s, conn.peer_l2, conn.peer_l3, conn.local_port, TELECONTROL_PORT, encode_apdu(frame)))
            return
        if pkt.kind != "data":
            return
        try:
            frames = conn.reader.feed(pkt.payload)
        except DecodeError:
            conn.reader = FrameReader()
            return
        for frame in frames:
            conn.state, events = session_accept(conn.state, frame, "inbound")
            for ev in events:
                if isinstance(ev, ReplyWith):
                    reply = u_frame(ev.function)
                    conn.state, _ = session_accept(conn.state, reply, "outbound")
                    self._send(self._data(s, conn.peer_l2, conn.peer_l3, conn.local_port, TELECONTROL_PORT,
                                          encode_apdu(reply)))
            asdu = frame.asdu
            if asdu is None:
                continue
            if asdu.type_id in (TypeId.M_ME_NC, TypeId.M_SP_NA):
                for obj in asdu.objects:
                    if isinstance(obj.payload, MeasuredFloat):
                        self.scada.image[obj.ioa] = (obj.payload.value, t)
                    elif isinstance(obj.payload, SinglePoint):
                        self.scada.image[obj.ioa] = (1.0 if obj.payload.on else 0.0, t)
            elif asdu.cot is Cot.ACT_CON and asdu.type_id is not TypeId.C_IC_NA:
                self._record(t, "command-result", s.id, {
                    "rtu": rtu_id, "typeId": int(asdu.type_id), "ioa": asdu.objects[0].ioa,
                    "accepted": not asdu.negative,
                })

    # -- RTU side ----------------------------------------------------------------

    def _rtu_send(self, rtu: RtuAgent, conn: _Conn, asdus: list[Asdu]) -> None:
        if not asdus:
            return
        self._send(self._data(rtu.node, conn.peer_l2, conn.peer_l3, TELECONTROL_PORT, conn.peer_port,
                              _frame_asdus(conn, asdus)))

    def _rtu_receive(self, t: int, rtu: RtuAgent, pkt: Packet) -> None:
        key = (pkt.src_l3, pkt.src_port)
        n = rtu.node
        if pkt.kind == "connectRequest" and pkt.dst_port == TELECONTROL_PORT:
            rtu.conns[key] = _Conn(pkt.src_l2, pkt.src_l3, pkt.src_port, TELECONTROL_PORT, accepted=True)
            self._send(Packet(n.l2, pkt.src_l2, n.l3, pkt.src_l3, TELECONTROL_PORT, pkt.src_port, "connectAccept"))
            return
        conn = rtu.conns.get(key)
        if conn is None:
            return
        if pkt.kind == "disconnect":
            del rtu.conns[key]
            return
        if pkt.kind != "data":
            return
        try:
            frames = conn.reader.feed(pkt.payload)
        except DecodeError:
            conn.reader = FrameReader()
            return
        for frame in frames:
            conn.state, events = session_accept(conn.state, frame, "inbound")
            for ev in events:
                if isinstance(ev, ReplyWith):
                    reply = u_frame(ev.function)
                    conn.state, _ = session_accept(conn.state, reply, "outbound")
                    self._send(self._data(n, conn.peer_l2, conn.peer_l3, TELECONTROL_PORT, conn.peer_port,
                                          encode_apdu(reply)))
            if frame.asdu is None or not frame.asdu.is_command or not isinstance(frame.control, IFrame):
                continue
            replies, command, evs = rtu_handle_command(rtu, frame.asdu, self.grid, t)
            for ev in evs:
                self._record(t, "implausible-command", rtu.node_id, {
                    "asset": ev.asset, "value": ev.value, "pMin": ev.p_min, "pMax": ev.p_max,
                })
            if command is not None:
                self.grid = apply_command(self.grid, command)
                self._record(t, "grid-command", rtu.node_id, {
                    "peer": pkt.src_l3,
                    **({"asset": command.asset_id, "value": command.p_pu} if isinstance(command, Setpoint)
                       else {"branch": command.branch_id, "close": command.close}),
                })
            self._rtu_send(rtu, conn, replies)

    # -- attackers -----------------------------------------------------------------

    def _attacker_receive(self, t: int, pkt: Packet) -> None:
        client = self.rogues.get(pkt.dst_port)
        if client is None or not client.owns(pkt):
            return
        for out in client.on_packet(pkt, t):
            self._send(out, origin=client.attacker.id)

    def _deliver(self, ev: DeliveryEvent) -> None:
        node = self.nodes[ev.node]
        if ev.node == self.scada.node.id:
            self._scada_receive(ev.t_ms, ev.packet)
        elif ev.node in self.rtus:
            self._rtu_receive(ev.t_ms, self.rtus[ev.node], ev.packet)
        elif node.kind == "attackerHost":
            self._attacker_receive(ev.t_ms, ev.packet)

    def _link(self, ev: LinkEvent) -> None:
        self._record(ev.t_ms, "link", ev.link_id, {"up": ev.up})
        self.board = update_status(self.board, LinkChange(ev.link_id, ev.up, ev.t_ms))
        scada = self.scada.node.id
        for rtu_id, rtu in self.rtus.items():
            crosses = any(link == ev.link_id for link, _ in self.net.route(scada, rtu_id))
            if not crosses:
                continue
            if not ev.up:
                # the transport connection does not survive the outage
                conn = self.scada.sessions.pop(rtu_id, None)
                if conn is not None:
                    rtu.conns.pop((self.scada.node.l3, conn.local_port), None)
                    self._record(ev.t_ms, "session-reset", scada, {"rtu": rtu_id})
            elif rtu_id not in self.scada.sessions and self._path_up(scada, rtu_id):
                self._scada_connect(rtu_id)

    def _path_up(self, a: str, b: str) -> bool:
        return all(self.net.links[link].up for link, _ in self.net.route(a, b))

    def _prepare_attacks(self) -> None:
        for action in self.sc.attacks:
            p = action.params
            if action.kind == "FalseDataInjection":
                if action.start_ms >= self.duration:
                    self._record(0, "warning", "attacks", {"id": action.id, "message": "window outside run"})
                    continue
                mut = atk.FalseDataMutator(p["ioas"], p["mode"], p["value"], action.start_ms, p["end_ms"],
                                           action.label)
                self.net.add_link_hook(p["link"], mut)
                self.fdi[action.id] = mut

    def _attack(self, t: int, action: atk.AttackAction) -> None:
        p = action.params
        end = self.duration
        expect = action.expect_detection
        note = action.note
        if action.kind == "NetworkScan":
            attacker = self.nodes[p["attacker"]]
            targets = [self.nodes[n] for n in p["targets"]]
            probes = atk.inject_scan(targets, attacker, p["ports"], p["rate_per_s"], t, action.label,
                                     self._attacker_port())
            for at, pkt in probes:
                self.net.send(pkt, at, origin=attacker.id)
            end = probes[-1][0]
        elif action.kind == "UnauthorizedConnect":
            attacker = self.nodes[p["attacker"]]
            spoof = self.nodes[p["spoof_as"]] if p["spoof_as"] else None
            pkt = atk.connect_attempt(attacker, self.nodes[p["target"]], p["port"], self._attacker_port(),
                                      action.label, spoof)
            self._send(pkt, origin=attacker.id)
            end = t
        elif action.kind == "FalseDataInjection":
            end = p["end_ms"]
        elif action.kind == "RogueCommand":
            port = self._attacker_port()
            client = atk.RogueClient(self.nodes[p["attacker"]], self.nodes[p["target"]], atk.rogue_asdu(p),
                                     port, action.label)
            self.rogues[port] = client
            self._send(client.start(), origin=client.attacker.id)
        elif action.kind == "ConfigTamper":
            rtu = self.rtus[p["target"]]
            rtu.config, entries = atk.apply_config_tamper(rtu.config, p["changes"])
            for entry in entries:
                rtu.log.append((t, entry))
                self._record(t, "rtu-log", rtu.node_id, {"entry": entry, "scheduled": False})
        elif action.kind == "CoverUp":
            rtu = self.rtus[p["rtu"]]
            filt = atk.CoverUpFilter(p["ioas"], t, p["end_ms"])
            filt.capture(rtu.last_sent)
            rtu.filters.append(filt)
            before = self.grid.asset(p["asset"]).p_set_pu
            self.grid = self.grid.with_setpoint(p["asset"], p["forced"])
            if expect is None:
                expect = abs(p["forced"] - before) > self.sc.ids.model.residual_threshold_pu
                if not expect:
                    note = note or "setpoint unchanged: no observable effect"
            end = p["end_ms"]
        elif action.kind == "TrafficCopy":
            self.net.attach_tap(p["point"], owner=p["attacker"])
        gt = atk.GroundTruth(action.id, action.kind, action.label, action.devices, t, end,
                             True if expect is None else expect, note)
        self.ground_truth[action.id] = gt
        self._record(t, "attack", "attacks", {**gt.to_dict(), "params": _jsonable(p)})

    def _attacker_port(self) -> int:
        self._attacker_ports += 1
        return self._attacker_ports

    # -- wrap-up ---------------------------------------------------------------------

    def finish(self) -> RunArtifacts:
        if self.finished:
            raise RuntimeError("simulation already finished")
        self.finished = True
        end = self.duration
        for aid, gt in sorted(self.ground_truth.items()):
            if gt.kind == "RogueCommand":
                client = next(c for c in self.rogues.values() if c.label == gt.label)
                if client.finished_ms is not None:
                    gt = atk.GroundTruth(gt.attack_id, gt.kind, gt.label, gt.devices, gt.start_ms,
                                         client.finished_ms, gt.expect_detection, gt.note)
            if gt.kind == "TrafficCopy":
                gt = atk.GroundTruth(gt.attack_id, gt.kind, gt.label, gt.devices, gt.start_ms, end,
                                     gt.expect_detection, f"{gt.note}; {self.copies.get(gt.devices[0], 0)} copies")
            self.ground_truth[aid] = gt
            self._record(end, "ground-truth", "attacks", gt.to_dict())
        alerts = self.detector.alerts
        alert_log = [dumps(a.to_record()) for a in alerts]
        incidents = correlate(alerts, self.net)
        assessment = assess_compromise(incidents, self.net)
        report = format_report(incidents, assessment)
        metrics = compute_metrics(alerts, list(self.ground_truth.values()), self.period)
        metrics["scenario"] = self.sc.name
        metrics["alerts"] = len(alerts)
        metrics["monitoring"] = {"verdicts": self.verdicts_seen, "final": self.verdict}
        self._monitor(end, "final", snapshot(self.board))
        return RunArtifacts(self.events, alert_log, self.monitoring_log, report, metrics)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    return obj


def run(scenario: Scenario) -> RunArtifacts:
    return Simulation(scenario).run()


def replay_alerts(event_lines: list[str]) -> list[str]:
    """Re-run the IDS over a stored event log and return fresh alert lines."""
    detector = None
    for line in event_lines:
        if not line.strip():
            continue
        rec = json.loads(line)
        kind = rec["kind"]
        if kind == "ids-config":
            detector = Detector(IdsContext.from_dict(rec["payload"]))
        elif kind in ("packet", "ids-check") and detector is None:
            raise ValueError("event log has packets before its ids-config record")
        elif kind == "packet":
            detector.observe(rec["tMs"], packet_from_summary(rec["payload"]["packet"]))
        elif kind == "ids-check":
            detector.check(rec["tMs"])
    if detector is None:
        raise ValueError("event log has no ids-config record")
    return [dumps(a.to_record()) for a in detector.alerts]


__all__ = [
    "ImplausibleCommandEvent", "RtuAgent", "RtuConfig", "RunArtifacts", "ScadaAgent", "Simulation",
    "replay_alerts", "rtu_handle_command", "run",
]
