import random

import pytest

from gridsec.netsim import (
    DanglingLink, DeliveryEvent, DropEvent, DuplicateAddress, FirewallRule,
    Link, LinkEvent, NoRoute, NotEstablished, Packet, TapEvent,
    TopologyNode, TopologySpec, UnknownAttachPoint, build_topology,
)


def node(i, kind, l3, zone="otNetwork"):
    return TopologyNode(i, kind, f"02:00:00:00:00:{len(l3):02x}{l3[-1]}"[:17], l3, zone)


def small_net(fw_rules=()):
    nodes = (
        TopologyNode("scada", "scada", "02:00:00:00:00:01", "10.0.0.10"),
        TopologyNode("sw", "switch", "02:00:00:00:00:02", "10.0.0.2"),
        TopologyNode("rtu1", "rtu", "02:00:00:00:00:03", "10.0.1.11"),
        TopologyNode("rtu2", "rtu", "02:00:00:00:00:04", "10.0.1.12"),
        TopologyNode("fw", "firewall", "02:00:00:00:00:05", "10.0.0.1"),
        TopologyNode("attacker", "attackerHost", "02:00:00:00:00:06", "192.0.2.66", "internet"),
    )
    links = (
        Link("l_scada", "scada", "sw", 5),
        Link("l_rtu1", "sw", "rtu1", 5),
        Link("l_rtu2", "sw", "rtu2", 5),
        Link("l_fw", "fw", "sw", 5),
        Link("l_att", "attacker", "fw", 5),
    )
    return build_topology(TopologySpec(nodes, links, {"fw": tuple(fw_rules)}))


def pkt(net, src, dst, kind="probe", sport=40000, dport=2404, payload=b""):
    s, d = net.nodes[src], net.nodes[dst]
    return Packet(s.l2, d.l2, s.l3, d.l3, sport, dport, kind, payload)


def drain(net):
    out = []
    while net.next_time() is not None:
        out += net.step(net.next_time())
    return out


def test_duplicate_l3_rejected():
    nodes = (TopologyNode("a", "rtu", "02:00:00:00:00:01", "10.0.0.1"),
             TopologyNode("b", "rtu", "02:00:00:00:00:02", "10.0.0.1"))
    with pytest.raises(DuplicateAddress):
        build_topology(TopologySpec(nodes, ()))


def test_dangling_link_rejected():
    nodes = (TopologyNode("a", "rtu", "02:00:00:00:00:01", "10.0.0.1"),)
    with pytest.raises(DanglingLink):
        build_topology(TopologySpec(nodes, (Link("l", "a", "b"),)))


def test_single_link_route():
    nodes = (TopologyNode("a", "rtu", "02:00:00:00:00:01", "10.0.0.1"),
             TopologyNode("b", "rtu", "02:00:00:00:00:02", "10.0.0.2"))
    net = build_topology(TopologySpec(nodes, (Link("ab", "a", "b", 5),)))
    assert net.route("a", "b") == [("ab", "b")]
    assert net.path_latency("a", "b") == 5


def test_latency_is_summed_over_path():
    net = small_net()
    net.step(100)
    net.send(pkt(net, "scada", "rtu1"), at_ms=100)
    (ev,) = drain(net)
    assert isinstance(ev, DeliveryEvent)
    assert ev.t_ms == 110 and ev.packet.delivered_at_ms == 110 and ev.node == "rtu1"


def test_no_route_for_unknown_address():
    net = small_net()
    p = pkt(net, "scada", "rtu1")
    with pytest.raises(NoRoute):
        net.send(Packet(p.src_l2, p.dst_l2, p.src_l3, "10.9.9.9", 1, 2, "probe"), 0)


def test_firewall_denies_inbound():
    net = small_net([FirewallRule(src="10.0.0.0/16", action="allow")])
    net.send(pkt(net, "attacker", "rtu1"), 0)
    (ev,) = drain(net)
    assert isinstance(ev, DropEvent) and ev.reason == "firewall" and ev.node == "fw"
    net.send(pkt(net, "rtu1", "attacker"), net.now)
    (ev,) = drain(net)
    assert isinstance(ev, DeliveryEvent)


def test_firewall_port_rule():
    net = small_net([FirewallRule(src="192.0.2.0/24", dst="10.0.1.0/24", port="2404", action="allow")])
    net.send(pkt(net, "attacker", "rtu1", dport=2404), 0)
    net.send(pkt(net, "attacker", "rtu1", dport=2405), 0)
    a, b = drain(net)
    kinds = sorted(type(e).__name__ for e in (a, b))
    assert kinds == ["DeliveryEvent", "DropEvent"]


def test_link_down_mid_path_drops():
    net = small_net()
    net.set_link_state("l_rtu1", False)
    net.send(pkt(net, "scada", "rtu1"), 0)
    link_ev, drop = drain(net)
    assert isinstance(link_ev, LinkEvent) and not link_ev.up
    assert isinstance(drop, DropEvent) and drop.reason == "linkDown" and drop.node == "sw"
    assert drop.t_ms == 5


def test_same_ms_deliveries_keep_insertion_order():
    net = small_net()
    first = net.send(pkt(net, "scada", "rtu1", sport=1), 0)
    second = net.send(pkt(net, "scada", "rtu2", sport=2), 0)
    evs = drain(net)
    assert [e.packet.packet_id for e in evs] == [first, second]
    assert evs[0].t_ms == evs[1].t_ms


def test_empty_queue_steps_to_nothing():
    assert small_net().step(1000) == []


def test_data_requires_established_connection():
    net = small_net()
    with pytest.raises(NotEstablished):
        net.send(pkt(net, "scada", "rtu1", kind="data", payload=b"x"), 0)
    net.send(pkt(net, "scada", "rtu1", kind="connectRequest", sport=50001), 0)
    drain(net)
    net.send(pkt(net, "rtu1", "scada", kind="connectAccept", sport=2404, dport=50001), net.now)
    drain(net)
    net.send(pkt(net, "scada", "rtu1", kind="data", sport=50001, payload=b"x"), net.now)
    (ev,) = drain(net)
    assert ev.packet.payload == b"x"


def test_timers_interleave_with_deliveries():
    net = small_net()
    net.send(pkt(net, "scada", "rtu1"), 0)
    net.schedule(10, "tick")
    net.schedule(3, "early")
    evs = drain(net)
    assert [type(e).__name__ for e in evs] == ["TimerEvent", "DeliveryEvent", "TimerEvent"]
    assert evs[0].payload == "early"


def test_tap_on_switch_sees_both_directions():
    net = small_net()
    tap = net.attach_tap("sw")
    net.send(pkt(net, "scada", "rtu1"), 0)
    net.send(pkt(net, "rtu1", "scada"), 0)
    taps = [e for e in drain(net) if isinstance(e, TapEvent)]
    assert {(e.packet.src_l3, e.packet.dst_l3) for e in taps} == {
        ("10.0.0.10", "10.0.1.11"), ("10.0.1.11", "10.0.0.10")}
    assert all(e.tap_id == tap and e.t_ms == 5 for e in taps)


def test_dropped_packet_visible_only_before_firewall():
    net = small_net([])
    before = net.attach_tap("l_att")
    after = net.attach_tap("l_fw")
    net.send(pkt(net, "attacker", "scada"), 0)
    taps = [e.tap_id for e in drain(net) if isinstance(e, TapEvent)]
    assert taps == [before] and after not in taps


def test_removing_tap_stops_copies():
    net = small_net()
    tap = net.attach_tap("l_rtu1")
    net.detach_tap(tap)
    net.send(pkt(net, "scada", "rtu1"), 0)
    assert not any(isinstance(e, TapEvent) for e in drain(net))
    with pytest.raises(UnknownAttachPoint):
        net.attach_tap("nowhere")


def test_link_hook_mutates_downstream_copies_only():
    net = small_net()
    up = net.attach_tap("rtu1")
    down = net.attach_tap("scada")
    net.add_link_hook("l_rtu1", lambda p, t: Packet(**{**p.__dict__, "payload": b"forged"}))
    net.send(pkt(net, "rtu1", "scada", payload=b"real"), 0)
    evs = drain(net)
    seen = {e.tap_id: e.packet.payload for e in evs if isinstance(e, TapEvent)}
    assert seen == {up: b"real", down: b"forged"}
    assert evs[-1].packet.payload == b"forged"


def _random_run(seed, with_taps):
    net = small_net([FirewallRule(src="10.0.0.0/16", action="allow")])
    if with_taps:
        net.attach_tap("sw")
        net.attach_tap("fw")
    rng = random.Random(seed)
    names = list(net.nodes)
    for _ in range(10_000):
        src, dst = rng.sample(names, 2)
        net.send(pkt(net, src, dst, sport=rng.randrange(65536)), rng.randrange(100_000))
    return [(type(e).__name__, e.t_ms, e.packet.packet_id, getattr(e, "reason", None))
            for e in net.step(10**9) if not isinstance(e, TapEvent)]


def test_runs_are_deterministic_and_taps_are_transparent():
    a = _random_run(1, with_taps=False)
    assert a == _random_run(1, with_taps=False)
    assert a == _random_run(1, with_taps=True)
    assert [e[1] for e in a] == sorted(e[1] for e in a)


def test_firewall_soundness_under_random_traffic():
    net = small_net([FirewallRule(src="10.0.0.0/16", action="allow")])
    rng = random.Random(4)
    for _ in range(2000):
        net.send(pkt(net, "attacker", rng.choice(["scada", "rtu1", "rtu2"]), dport=rng.randrange(65536)), 0)
    assert all(isinstance(e, DropEvent) for e in net.step(10**9))
