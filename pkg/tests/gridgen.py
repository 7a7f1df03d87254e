"""Random test networks and an independent dense power-flow oracle."""

import random

import numpy as np

from gridsec.grid import Asset, Branch, Bus, GridNetwork


def random_radial(seed, max_buses=50, extra_links=0):
    rng = random.Random(seed)
    n = rng.randint(2, max_buses)
    buses = [Bus(f"b{i:02d}") for i in range(n)]
    branches = []
    for i in range(1, n):
        parent = rng.randrange(i)
        branches.append(Branch(f"l{i:02d}", f"b{parent:02d}", f"b{i:02d}",
                               rng.uniform(0.01, 0.5), 100.0))
    for k in range(extra_links):
        a, b = rng.sample(range(n), 2)
        branches.append(Branch(f"m{k:02d}", f"b{a:02d}", f"b{b:02d}", rng.uniform(0.01, 0.5), 100.0))
    assets = [Asset("feeder", "b00", "feeder", -100.0, 100.0, 0.0)]
    for i in range(1, n):
        p = rng.uniform(-1.0, 1.0)
        assets.append(Asset(f"a{i:02d}", f"b{i:02d}", "load", -1.0, 1.0, p))
    return GridNetwork(buses, branches, "b00", assets)


def dense_oracle(net):
    """Angles and flows from an explicitly assembled dense system."""
    ids = [b.id for b in net.buses]
    pos = {b: i for i, b in enumerate(ids)}
    closed = [br for br in net.branches if br.breaker_closed]
    incidence = np.zeros((len(closed), len(ids)))
    for k, br in enumerate(closed):
        incidence[k, pos[br.from_bus]] = 1.0
        incidence[k, pos[br.to_bus]] = -1.0
    ydiag = np.diag([1.0 / br.reactance_pu for br in closed])
    bfull = incidence.T @ ydiag @ incidence
    p = np.zeros(len(ids))
    for a in net.assets:
        if a.bus_id != net.slack_bus_id:
            p[pos[a.bus_id]] += a.p_set_pu
    keep = [i for i, b in enumerate(ids) if b != net.slack_bus_id]
    theta = np.zeros(len(ids))
    theta[keep] = np.linalg.solve(bfull[np.ix_(keep, keep)], p[keep])
    flows = ydiag @ incidence @ theta
    return dict(zip(ids, theta)), {br.id: f for br, f in zip(closed, flows)}


def tree_flows(net):
    """Radial-only oracle: each branch carries the net injection downstream of it."""
    children = {}
    for br in net.branches:
        children.setdefault(br.from_bus, []).append(br)
    inj = {b.id: 0.0 for b in net.buses}
    for a in net.assets:
        if a.bus_id != net.slack_bus_id:
            inj[a.bus_id] += a.p_set_pu

    flows = {}

    def downstream(bus):
        total = inj[bus]
        for br in children.get(bus, []):
            sub = downstream(br.to_bus)
            flows[br.id] = -sub
            total += sub
        return total

    downstream(net.slack_bus_id)
    return flows
