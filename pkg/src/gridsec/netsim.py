"""Deterministic discrete-event simulation of the OT/ICT network.

Time is integer milliseconds. Every scheduled item (delivery, drop, tap copy,
link change, timer) sits in one queue ordered by (time, insertion sequence),
so identical inputs always produce identical event lists.
"""

from __future__ import annotations

import heapq
import ipaddress
import itertools
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Any, Callable

NODE_KINDS = ("scada", "rtu", "ied", "switch", "firewall", "terminalServer", "attackerHost", "monitor")
ZONES = ("otNetwork", "companyNetwork", "internet")
PACKET_KINDS = ("connectRequest", "connectAccept", "data", "disconnect", "probe", "heartbeat")


class NetsimError(Exception):
    pass


class DuplicateAddress(NetsimError):
    pass


class DanglingLink(NetsimError):
    pass


class NoRoute(NetsimError):
    pass


class UnknownAttachPoint(NetsimError):
    pass


class NotEstablished(NetsimError):
    pass


@dataclass(frozen=True)
class TopologyNode:
    id: str
    kind: str
    l2: str
    l3: str
    zone: str = "otNetwork"


@dataclass(frozen=True)
class Link:
    id: str
    a: str
    b: str
    latency_ms: int = 5
    up: bool = True

    def other(self, node_id: str) -> str:
        return self.b if node_id == self.a else self.a


@dataclass(frozen=True)
class FirewallRule:
    src: str = "*"
    dst: str = "*"
    port: str = "*"
    action: str = "allow"

    def matches(self, src_l3: str, dst_l3: str, dst_port: int) -> bool:
        return _addr_match(self.src, src_l3) and _addr_match(self.dst, dst_l3) and _port_match(self.port, dst_port)


def _addr_match(pattern: str, addr: str) -> bool:
    if pattern == "*":
        return True
    try:
        return ipaddress.ip_address(addr) in ipaddress.ip_network(pattern, strict=False)
    except ValueError:
        return False


def _port_match(pattern: str | int, port: int) -> bool:
    pattern = str(pattern)
    if pattern == "*":
        return True
    if "-" in pattern:
        lo, hi = pattern.split("-", 1)
        return int(lo) <= port <= int(hi)
    return int(pattern) == port


@dataclass(frozen=True)
class TopologySpec:
    nodes: tuple[TopologyNode, ...]
    links: tuple[Link, ...]
    firewalls: dict[str, tuple[FirewallRule, ...]] = field(default_factory=dict)


@dataclass(frozen=True)
class Packet:
    src_l2: str
    dst_l2: str
    src_l3: str
    dst_l3: str
    src_port: int
    dst_port: int
    kind: str
    payload: bytes = b""
    sent_at_ms: int | None = None
    delivered_at_ms: int | None = None
    packet_id: int | None = None
    label: str | None = None

    def __post_init__(self):
        if self.kind not in PACKET_KINDS:
            raise ValueError(f"unknown packet kind {self.kind!r}")
        for p in (self.src_port, self.dst_port):
            if not 0 <= p <= 65535:
                raise ValueError(f"port {p} outside 0..65535")


@dataclass(frozen=True)
class DeliveryEvent:
    t_ms: int
    seq: int
    packet: Packet
    node: str


@dataclass(frozen=True)
class DropEvent:
    t_ms: int
    seq: int
    packet: Packet
    node: str
    reason: str


@dataclass(frozen=True)
class TapEvent:
    t_ms: int
    seq: int
    tap_id: str
    point: str
    packet: Packet


@dataclass(frozen=True)
class LinkEvent:
    t_ms: int
    seq: int
    link_id: str
    up: bool


@dataclass(frozen=True)
class TimerEvent:
    t_ms: int
    seq: int
    payload: Any


LinkHook = Callable[[Packet, int], Packet]


@dataclass
class _Tap:
    id: str
    point: str
    owner: str


class Network:
    """Topology, routing tables and the global event queue."""

    def __init__(self, spec: TopologySpec):
        self.nodes: dict[str, TopologyNode] = {}
        self.links: dict[str, Link] = {}
        self.firewalls = {k: tuple(v) for k, v in spec.firewalls.items()}
        self._by_l3: dict[str, str] = {}
        self._by_l2: dict[str, str] = {}
        for node in spec.nodes:
            if node.id in self.nodes:
                raise DuplicateAddress(f"duplicate node id {node.id}")
            if node.kind not in NODE_KINDS:
                raise ValueError(f"node {node.id}: unknown kind {node.kind!r}")
            if node.zone not in ZONES:
                raise ValueError(f"node {node.id}: unknown zone {node.zone!r}")
            if node.l3 in self._by_l3:
                raise DuplicateAddress(f"l3 address {node.l3} used by {self._by_l3[node.l3]} and {node.id}")
            if node.l2.lower() in self._by_l2:
                raise DuplicateAddress(f"l2 address {node.l2} used by {self._by_l2[node.l2.lower()]} and {node.id}")
            self.nodes[node.id] = node
            self._by_l3[node.l3] = node.id
            self._by_l2[node.l2.lower()] = node.id
        self._adj: dict[str, list[tuple[str, str]]] = {n: [] for n in self.nodes}
        for link in spec.links:
            if link.id in self.links:
                raise DanglingLink(f"duplicate link id {link.id}")
            if link.a not in self.nodes or link.b not in self.nodes or link.a == link.b:
                raise DanglingLink(f"link {link.id} endpoints {link.a}-{link.b} invalid")
            if link.latency_ms < 0:
                raise ValueError(f"link {link.id} has negative latency")
            self.links[link.id] = link
            self._adj[link.a].append((link.b, link.id))
            self._adj[link.b].append((link.a, link.id))
        for fw in self.firewalls:
            if fw not in self.nodes:
                raise DanglingLink(f"firewall rules for unknown node {fw}")
        for n in self._adj:
            self._adj[n].sort()
        self._next_hop = {n: self._bfs(n) for n in self.nodes}

        self._queue: list[tuple[int, int, Any]] = []
        self._seq = itertools.count()
        self._packet_ids = itertools.count(1)
        self._tap_ids = itertools.count(1)
        self._taps: dict[str, _Tap] = {}
        self._hooks: dict[str, list[tuple[int, LinkHook]]] = {}
        self._hook_ids = itertools.count(1)
        self._established: set[tuple] = set()
        self.now = 0

    # -- topology -----------------------------------------------------------

    def _bfs(self, src: str) -> dict[str, tuple[str, str]]:
        """dst -> (first link, first neighbour) on a shortest-hop path from src."""
        first: dict[str, tuple[str, str]] = {}
        seen = {src}
        queue = deque()
        for nbr, link in self._adj[src]:
            if nbr not in seen:
                seen.add(nbr)
                first[nbr] = (link, nbr)
                queue.append(nbr)
        while queue:
            cur = queue.popleft()
            for nbr, _ in self._adj[cur]:
                if nbr not in seen:
                    seen.add(nbr)
                    first[nbr] = first[cur]
                    queue.append(nbr)
        return first

    def route(self, src: str, dst: str) -> list[tuple[str, str]]:
        """Ordered (link id, next node) hops from src to dst."""
        if src not in self.nodes or dst not in self.nodes:
            raise NoRoute(f"{src} -> {dst}")
        hops = []
        cur = src
        while cur != dst:
            if dst not in self._next_hop[cur]:
                raise NoRoute(f"{src} -> {dst}")
            link, nxt = self._next_hop[cur][dst]
            hops.append((link, nxt))
            cur = nxt
        return hops

    def path_latency(self, src: str, dst: str) -> int:
        return sum(self.links[link].latency_ms for link, _ in self.route(src, dst))

    def node_by_l3(self, l3: str) -> str | None:
        return self._by_l3.get(l3)

    def node_by_l2(self, l2: str) -> str | None:
        return self._by_l2.get(l2.lower())

    def neighbours(self, node_id: str) -> list[str]:
        return [n for n, _ in self._adj[node_id]]

    def attached_links(self, node_id: str) -> list[str]:
        return [link for _, link in self._adj[node_id]]

    # -- scheduling ---------------------------------------------------------

    def _push(self, t_ms: int, make) -> int:
        seq = next(self._seq)
        heapq.heappush(self._queue, (t_ms, seq, make(t_ms, seq)))
        return seq

    def schedule(self, at_ms: int, payload: Any) -> int:
        if at_ms < self.now:
            raise ValueError(f"cannot schedule at {at_ms} before now={self.now}")
        return self._push(at_ms, lambda t, s: TimerEvent(t, s, payload))

    def set_link_state(self, link_id: str, up: bool, at_ms: int | None = None) -> None:
        if link_id not in self.links:
            raise UnknownAttachPoint(link_id)
        t = self.now if at_ms is None else at_ms
        self.links[link_id] = replace(self.links[link_id], up=up)
        self._push(t, lambda tt, s: LinkEvent(tt, s, link_id, up))

    def attach_tap(self, at: str, owner: str = "ids") -> str:
        if at not in self.nodes and at not in self.links:
            raise UnknownAttachPoint(at)
        tap_id = f"tap{next(self._tap_ids)}"
        self._taps[tap_id] = _Tap(tap_id, at, owner)
        return tap_id

    def detach_tap(self, tap_id: str) -> None:
        if self._taps.pop(tap_id, None) is None:
            raise UnknownAttachPoint(tap_id)

    def taps(self) -> dict[str, str]:
        return {t.id: t.point for t in self._taps.values()}

    def tap_owner(self, tap_id: str) -> str:
        return self._taps[tap_id].owner

    def add_link_hook(self, link_id: str, hook: LinkHook) -> int:
        """Register an in-path packet transformation on a link."""
        if link_id not in self.links:
            raise UnknownAttachPoint(link_id)
        hook_id = next(self._hook_ids)
        self._hooks.setdefault(link_id, []).append((hook_id, hook))
        return hook_id

    def is_established(self, pkt: Packet) -> bool:
        return _conn_key(pkt) in self._established

    def send(self, pkt: Packet, at_ms: int, origin: str | None = None) -> int:
        """Inject a packet; returns its packet id.

        Delivery (or a drop) is scheduled at ``at_ms`` plus the latencies of
        the traversed links. ``origin`` defaults to the owner of ``src_l2``.
        """
        if at_ms < self.now:
            raise ValueError(f"cannot send at {at_ms} before now={self.now}")
        if origin is None:
            origin = self.node_by_l2(pkt.src_l2) or self.node_by_l3(pkt.src_l3)
        if origin is None or origin not in self.nodes:
            raise NoRoute(f"unknown sender for {pkt.src_l2}/{pkt.src_l3}")
        dst = self.node_by_l3(pkt.dst_l3)
        if dst is None:
            raise NoRoute(f"no node owns {pkt.dst_l3}")
        if pkt.kind == "data" and not self.is_established(pkt):
            raise NotEstablished(f"{pkt.src_l3}:{pkt.src_port} -> {pkt.dst_l3}:{pkt.dst_port}")
        hops = self.route(origin, dst)
        pkt = replace(pkt, sent_at_ms=at_ms, packet_id=next(self._packet_ids))
        t = at_ms
        self._tap_copies(origin, pkt, t)
        cur = origin
        for link_id, nxt in hops:
            if not self.links[link_id].up:
                self._push(t, lambda tt, s, p=pkt, n=cur: DropEvent(tt, s, p, n, "linkDown"))
                return pkt.packet_id
            for _, hook in self._hooks.get(link_id, ()):
                pkt = hook(pkt, t)
            self._tap_copies(link_id, pkt, t)
            t += self.links[link_id].latency_ms
            cur = nxt
            self._tap_copies(cur, pkt, t)
            if cur != dst and cur in self.firewalls and not self._firewall_allows(cur, pkt):
                self._push(t, lambda tt, s, p=pkt, n=cur: DropEvent(tt, s, p, n, "firewall"))
                return pkt.packet_id
        final = replace(pkt, delivered_at_ms=t)
        self._push(t, lambda tt, s: DeliveryEvent(tt, s, final, dst))
        return pkt.packet_id

    def _firewall_allows(self, fw: str, pkt: Packet) -> bool:
        for rule in self.firewalls[fw]:
            if rule.matches(pkt.src_l3, pkt.dst_l3, pkt.dst_port):
                return rule.action == "allow"
        return False

    def _tap_copies(self, point: str, pkt: Packet, t: int) -> None:
        for tap in self._taps.values():
            if tap.point == point:
                self._push(t, lambda tt, s, tid=tap.id: TapEvent(tt, s, tid, point, pkt))

    def next_time(self) -> int | None:
        return self._queue[0][0] if self._queue else None

    def step(self, until_ms: int) -> list:
        """Pop every queued event with time <= until_ms, in (time, seq) order."""
        out = []
        while self._queue and self._queue[0][0] <= until_ms:
            t, _, ev = heapq.heappop(self._queue)
            self.now = t
            if isinstance(ev, TapEvent) and ev.tap_id not in self._taps:
                continue
            if isinstance(ev, DeliveryEvent):
                key = _conn_key(ev.packet)
                if ev.packet.kind == "connectAccept":
                    self._established.add(key)
                elif ev.packet.kind == "disconnect":
                    self._established.discard(key)
            out.append(ev)
        self.now = max(self.now, until_ms)
        return out


def _conn_key(pkt: Packet) -> tuple:
    a = (pkt.src_l3, pkt.src_port)
    b = (pkt.dst_l3, pkt.dst_port)
    return (a, b) if a <= b else (b, a)


def build_topology(spec: TopologySpec) -> Network:
    return Network(spec)
