"""DC power-flow model of a medium-voltage distribution feeder.

Quantities are per unit on a 1 MVA base, angles in radians. Branch flows are
positive in the from->to direction. The slack bus closes the active power
balance.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field, replace
from typing import Iterable, Mapping, Union

import numpy as np
from scipy.sparse import csc_matrix
from scipy.sparse.linalg import splu

ASSET_KINDS = ("battery", "pv", "chp", "load", "feeder")


class GridError(Exception):
    pass


class InvalidNetwork(GridError):
    pass


class IslandedBus(GridError):
    def __init__(self, buses):
        self.buses = tuple(buses)
        super().__init__(f"buses disconnected from slack: {', '.join(self.buses)}")


class SingularSystem(GridError):
    pass


class UnknownTarget(GridError):
    pass


class CapabilityViolation(GridError):
    def __init__(self, asset_id: str, p_pu: float, p_min: float, p_max: float):
        self.asset_id = asset_id
        self.p_pu = p_pu
        self.p_min = p_min
        self.p_max = p_max
        super().__init__(f"{asset_id}: {p_pu} pu outside [{p_min}, {p_max}]")


class MissingDatapoint(GridError):
    pass


@dataclass(frozen=True)
class Bus:
    id: str
    nominal_kv: float = 10.0


@dataclass(frozen=True)
class Branch:
    id: str
    from_bus: str
    to_bus: str
    reactance_pu: float
    rating_pu: float
    breaker_closed: bool = True


@dataclass(frozen=True)
class Asset:
    id: str
    bus_id: str
    kind: str
    p_min_pu: float
    p_max_pu: float
    p_set_pu: float = 0.0


@dataclass(frozen=True)
class GridNetwork:
    buses: tuple[Bus, ...]
    branches: tuple[Branch, ...]
    slack_bus_id: str
    assets: tuple[Asset, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "buses", tuple(self.buses))
        object.__setattr__(self, "branches", tuple(self.branches))
        object.__setattr__(self, "assets", tuple(self.assets))
        bus_ids = [b.id for b in self.buses]
        if len(set(bus_ids)) != len(bus_ids):
            raise InvalidNetwork("duplicate bus id")
        if self.slack_bus_id not in bus_ids:
            raise InvalidNetwork(f"slack bus {self.slack_bus_id!r} not among buses")
        known = set(bus_ids)
        for br in self.branches:
            if br.from_bus not in known or br.to_bus not in known:
                raise InvalidNetwork(f"branch {br.id} references an unknown bus")
            if br.from_bus == br.to_bus:
                raise InvalidNetwork(f"branch {br.id} is a self loop")
            if br.reactance_pu <= 0 or br.rating_pu <= 0:
                raise InvalidNetwork(f"branch {br.id} needs positive reactance and rating")
        for a in self.assets:
            if a.bus_id not in known:
                raise InvalidNetwork(f"asset {a.id} on unknown bus {a.bus_id}")
            if a.kind not in ASSET_KINDS:
                raise InvalidNetwork(f"asset {a.id} has unknown kind {a.kind!r}")
            if not a.p_min_pu <= a.p_set_pu <= a.p_max_pu:
                raise InvalidNetwork(f"asset {a.id} setpoint outside its capability")
        all_closed = [replace(br, breaker_closed=True) for br in self.branches]
        unreachable = _unreachable(bus_ids, all_closed, self.slack_bus_id)
        if unreachable:
            raise InvalidNetwork(f"network not connected: {', '.join(unreachable)}")

    @property
    def bus_ids(self) -> list[str]:
        return [b.id for b in self.buses]

    def branch(self, branch_id: str) -> Branch:
        for br in self.branches:
            if br.id == branch_id:
                return br
        raise UnknownTarget(f"branch {branch_id!r}")

    def asset(self, asset_id: str) -> Asset:
        for a in self.assets:
            if a.id == asset_id:
                return a
        raise UnknownTarget(f"asset {asset_id!r}")

    def incident_branches(self, bus_id: str) -> list[Branch]:
        return [br for br in self.branches if bus_id in (br.from_bus, br.to_bus)]

    def with_setpoint(self, asset_id: str, p_pu: float) -> GridNetwork:
        """Setpoint change without capability checks (used for load profiles)."""
        self.asset(asset_id)
        assets = tuple(replace(a, p_set_pu=p_pu) if a.id == asset_id else a for a in self.assets)
        return replace(self, assets=assets)

    def with_breaker(self, branch_id: str, closed: bool) -> GridNetwork:
        self.branch(branch_id)
        branches = tuple(
            replace(br, breaker_closed=closed) if br.id == branch_id else br for br in self.branches
        )
        return replace(self, branches=branches)


def _unreachable(bus_ids: Iterable[str], branches: Iterable[Branch], slack: str) -> list[str]:
    adj: dict[str, list[str]] = {b: [] for b in bus_ids}
    for br in branches:
        if br.breaker_closed:
            adj[br.from_bus].append(br.to_bus)
            adj[br.to_bus].append(br.from_bus)
    seen = {slack}
    queue = deque([slack])
    while queue:
        for nxt in adj[queue.popleft()]:
            if nxt not in seen:
                seen.add(nxt)
                queue.append(nxt)
    return [b for b in adj if b not in seen]


def energized_buses(net: GridNetwork) -> set[str]:
    dead = set(_unreachable(net.bus_ids, net.branches, net.slack_bus_id))
    return {b for b in net.bus_ids if b not in dead}


def would_island(net: GridNetwork, branch_id: str) -> list[str]:
    """Buses that lose their connection to the slack if ``branch_id`` opens."""
    before = energized_buses(net)
    after = energized_buses(net.with_breaker(branch_id, False))
    return sorted(before - after)


@dataclass(frozen=True)
class FlowSolution:
    angles_rad: dict[str, float]
    branch_flows_pu: dict[str, float]
    injections_pu: dict[str, float]
    branch_closed: dict[str, bool] = field(default_factory=dict)


def bus_injections(net: GridNetwork, energized: set[str] | None = None) -> dict[str, float]:
    """Asset setpoints summed per bus; the slack balances the live buses."""
    live = energized if energized is not None else set(net.bus_ids)
    inj = {b: 0.0 for b in net.bus_ids}
    for a in net.assets:
        if a.bus_id != net.slack_bus_id and a.bus_id in live:
            inj[a.bus_id] += a.p_set_pu
    inj[net.slack_bus_id] = -sum(v for b, v in inj.items() if b != net.slack_bus_id)
    return inj


def _solve(net: GridNetwork, live: set[str]) -> FlowSolution:
    inj = bus_injections(net, live)
    order = [b for b in net.bus_ids if b in live and b != net.slack_bus_id]
    index = {b: i for i, b in enumerate(order)}
    angles = {b: 0.0 for b in net.bus_ids}
    closed = [br for br in net.branches if br.breaker_closed and br.from_bus in live]
    if order:
        rows, cols, vals = [], [], []
        for br in closed:
            y = 1.0 / br.reactance_pu
            i, j = index.get(br.from_bus), index.get(br.to_bus)
            for a, b, v in ((i, i, y), (j, j, y), (i, j, -y), (j, i, -y)):
                if a is not None and b is not None:
                    rows.append(a)
                    cols.append(b)
                    vals.append(v)
        n = len(order)
        bmat = csc_matrix((vals, (rows, cols)), shape=(n, n))
        rhs = np.array([inj[b] for b in order])
        try:
            theta = splu(bmat).solve(rhs)
        except RuntimeError as exc:
            raise SingularSystem(str(exc)) from None
        if not np.all(np.isfinite(theta)):
            raise SingularSystem("non-finite angles")
        for b, t in zip(order, theta):
            angles[b] = float(t)
    flows = {}
    for br in net.branches:
        if br.breaker_closed and br.from_bus in live:
            flows[br.id] = (angles[br.from_bus] - angles[br.to_bus]) / br.reactance_pu
        else:
            flows[br.id] = 0.0
    return FlowSolution(
        angles_rad=angles,
        branch_flows_pu=flows,
        injections_pu=inj,
        branch_closed={br.id: br.breaker_closed for br in net.branches},
    )


def solve_dc_power_flow(net: GridNetwork) -> FlowSolution:
    """Solve B'theta = P with the slack row removed.

    Raises IslandedBus when a bus has no closed path to the slack.
    """
    dead = _unreachable(net.bus_ids, net.branches, net.slack_bus_id)
    if dead:
        raise IslandedBus(dead)
    return _solve(net, set(net.bus_ids))


def solve_energized(net: GridNetwork) -> FlowSolution:
    """Like solve_dc_power_flow, but de-energized islands carry no power."""
    return _solve(net, energized_buses(net))


def balance_mismatch(sol: FlowSolution, net: GridNetwork) -> dict[str, float]:
    """injection - sum of outgoing flows, per bus."""
    out = dict(sol.injections_pu)
    for br in net.branches:
        f = sol.branch_flows_pu[br.id]
        out[br.from_bus] -= f
        out[br.to_bus] += f
    return out


# -- commands ---------------------------------------------------------------


@dataclass(frozen=True)
class Setpoint:
    asset_id: str
    p_pu: float


@dataclass(frozen=True)
class Switch:
    branch_id: str
    close: bool


GridCommand = Union[Setpoint, Switch]


def apply_command(net: GridNetwork, cmd: GridCommand) -> GridNetwork:
    """Return the network after ``cmd``; out-of-capability setpoints are rejected."""
    if isinstance(cmd, Setpoint):
        asset = net.asset(cmd.asset_id)
        if not asset.p_min_pu <= cmd.p_pu <= asset.p_max_pu:
            raise CapabilityViolation(asset.id, cmd.p_pu, asset.p_min_pu, asset.p_max_pu)
        return net.with_setpoint(asset.id, cmd.p_pu)
    if isinstance(cmd, Switch):
        return net.with_breaker(cmd.branch_id, cmd.close)
    raise UnknownTarget(f"unsupported command {cmd!r}")


@dataclass(frozen=True)
class LimitViolation:
    branch_id: str
    flow_abs_pu: float
    rating_pu: float


def check_limits(sol: FlowSolution, net: GridNetwork) -> list[LimitViolation]:
    return [
        LimitViolation(br.id, abs(sol.branch_flows_pu[br.id]), br.rating_pu)
        for br in net.branches
        if abs(sol.branch_flows_pu[br.id]) > br.rating_pu
    ]


# -- datapoints and measurements --------------------------------------------

MEASURED_KINDS = ("injection", "flow", "breaker")
COMMAND_KINDS = ("setpoint", "switch")


@dataclass(frozen=True)
class Datapoint:
    ioa: int
    rtu: str
    kind: str
    ref: str


class DatapointMap:
    """IOA <-> physical quantity <-> owning RTU."""

    def __init__(self, points: Iterable[Datapoint]):
        self.by_ioa: dict[int, Datapoint] = {}
        self._by_quantity: dict[tuple[str, str], Datapoint] = {}
        for dp in sorted(points, key=lambda d: d.ioa):
            if dp.ioa in self.by_ioa:
                raise ValueError(f"duplicate ioa {dp.ioa}")
            if dp.kind not in MEASURED_KINDS + COMMAND_KINDS:
                raise ValueError(f"ioa {dp.ioa}: unknown datapoint kind {dp.kind!r}")
            key = (dp.kind, dp.ref)
            if key in self._by_quantity:
                raise ValueError(f"{dp.kind} of {dp.ref} mapped twice")
            self.by_ioa[dp.ioa] = dp
            self._by_quantity[key] = dp

    def __iter__(self):
        return iter(self.by_ioa.values())

    def __len__(self):
        return len(self.by_ioa)

    def __contains__(self, ioa):
        return ioa in self.by_ioa

    def __getitem__(self, ioa: int) -> Datapoint:
        return self.by_ioa[ioa]

    def lookup(self, kind: str, ref: str) -> Datapoint | None:
        return self._by_quantity.get((kind, ref))

    def measured(self) -> list[Datapoint]:
        return [dp for dp in self if dp.kind in MEASURED_KINDS]

    def owned_by(self, rtu: str) -> list[Datapoint]:
        return [dp for dp in self if dp.rtu == rtu]

    @property
    def rtus(self) -> list[str]:
        return sorted({dp.rtu for dp in self})


@dataclass(frozen=True)
class Measurement:
    value: float
    quality: str = "good"


@dataclass
class MeasurementSet:
    t_ms: int
    values: dict[int, Measurement]

    def as_values(self) -> dict[int, float]:
        return {ioa: m.value for ioa, m in self.values.items()}


def true_value(sol: FlowSolution, dp: Datapoint) -> float:
    if dp.kind == "injection":
        return sol.injections_pu[dp.ref]
    if dp.kind == "flow":
        return sol.branch_flows_pu[dp.ref]
    if dp.kind == "breaker":
        return 1.0 if sol.branch_closed[dp.ref] else 0.0
    raise ValueError(f"ioa {dp.ioa} is a command point")


def generate_measurements(
    sol: FlowSolution,
    dpmap: DatapointMap,
    noise_sigma: float,
    rng: np.random.Generator,
    t_ms: int = 0,
) -> MeasurementSet:
    """Truth plus zero-mean gaussian noise on analog points; statuses are exact."""
    points = dpmap.measured()
    analog = [dp for dp in points if dp.kind != "breaker"]
    noise = rng.normal(0.0, noise_sigma, size=len(analog)) if noise_sigma > 0 else np.zeros(len(analog))
    values = {}
    for dp, n in zip(analog, noise):
        values[dp.ioa] = Measurement(true_value(sol, dp) + float(n))
    for dp in points:
        if dp.kind == "breaker":
            values[dp.ioa] = Measurement(true_value(sol, dp))
    return MeasurementSet(t_ms, dict(sorted(values.items())))


def residual_terms(net: GridNetwork, dpmap: DatapointMap, bus_id: str) -> list[tuple[int, float]]:
    """(ioa, sign) pairs whose signed sum is the balance residual at a bus."""
    inj = dpmap.lookup("injection", bus_id)
    if inj is None:
        raise MissingDatapoint(f"no injection datapoint for {bus_id}")
    terms = [(inj.ioa, 1.0)]
    for br in net.incident_branches(bus_id):
        dp = dpmap.lookup("flow", br.id)
        if dp is None:
            raise MissingDatapoint(f"no flow datapoint for {br.id}")
        terms.append((dp.ioa, -1.0 if br.from_bus == bus_id else 1.0))
    return terms


def power_balance_residuals(
    meas: MeasurementSet | Mapping[int, float],
    net: GridNetwork,
    dpmap: DatapointMap,
    buses: Iterable[str] | None = None,
) -> dict[str, float]:
    """measured injection minus measured outgoing flows, per bus."""
    values = meas.as_values() if isinstance(meas, MeasurementSet) else meas
    out = {}
    for bus_id in (buses if buses is not None else net.bus_ids):
        total = 0.0
        for ioa, sign in residual_terms(net, dpmap, bus_id):
            if ioa not in values:
                raise MissingDatapoint(f"ioa {ioa} has no value")
            total += sign * values[ioa]
        out[bus_id] = total
    return out
