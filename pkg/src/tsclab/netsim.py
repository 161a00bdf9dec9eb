"""Deterministic lane-queue traffic simulator for grids of 4-way intersections.

Every directed road carries three lanes (left, straight, right); a vehicle on a
road picks the lane of the turn it will make at the road's downstream
intersection. A lane holds an in-transit list (vehicles still driving toward
the stop line, each with a ready time) followed by a FIFO queue of stopped
vehicles. Each 1 s tick:

1. in-transit vehicles whose ready time has come join the queue, or leave the
   network if the lane is the last one on their route;
2. every green lane releases up to ``sat_flow`` vehicles from the queue head
   into the next lane of their route, provided that lane is below capacity
   (a blocked head vehicle blocks the lane);
3. scheduled arrivals are placed on their entry lane, or wait in a boundary
   backlog while the entry lane is full.

Phase switching is instant; there is no yellow interval.
"""

from __future__ import annotations

import hashlib
import json
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

ROADNET_FORMAT = "metavim-roadnet-v1"
DIRS = ("N", "E", "S", "W")
TURNS = ("left", "straight", "right")
N_PHASES = 4
OBS_DIM = 12 + N_PHASES
PHASE_NAMES = ("NS-straight", "NS-left", "EW-straight", "EW-left")
_OPP = {0: 2, 1: 3, 2: 0, 3: 1}


class RoadnetError(ValueError):
    """Roadnet document does not follow the schema."""


class SimError(ValueError):
    """Invalid simulator call (unknown intersection, bad phase, ...)."""


def heading_after(approach: int, turn: int) -> int:
    """Direction (index into DIRS) a vehicle leaves toward.

    ``approach`` is the side it arrives from; ``turn`` is 0 left, 1 straight,
    2 right.
    """
    heading = _OPP[approach]
    if turn == 0:
        return (heading - 1) % 4
    if turn == 2:
        return (heading + 1) % 4
    return heading


# ---------------------------------------------------------------------------
# static network


@dataclass
class Lane:
    id: str
    index: int
    road: tuple[str, str]
    lane_no: int
    length: float = 300.0
    free_flow_time: int = 20
    capacity: int = 40
    saturation_flow: float = 1.0
    upstream: int = -1    # intersection index, -1 for network boundary
    downstream: int = -1  # intersection index, -1 for network boundary


@dataclass
class IntersectionNode:
    id: str
    index: int
    grid_pos: tuple[int, int] | None
    incoming_lanes: list[int]
    outgoing_lanes: list[int]
    phase_table: list[frozenset[tuple[int, int]]]
    green_lanes: list[tuple[int, ...]]
    neighbors: dict[str, int | None]
    initial_phase: int = 0


@dataclass
class RoadNetwork:
    intersections: list[IntersectionNode]
    lanes: list[Lane]
    adjacency: list[dict[str, int | None]]
    entry_lanes: list[int]
    exit_lanes: list[int]
    lane_index: dict[str, int] = field(default_factory=dict)
    node_index: dict[str, int] = field(default_factory=dict)

    @property
    def n(self) -> int:
        return len(self.intersections)

    def lane(self, lane_id: str) -> Lane:
        try:
            return self.lanes[self.lane_index[lane_id]]
        except KeyError:
            raise SimError(f"unknown lane {lane_id!r}") from None

    def neighbor_list(self, i: int) -> list[tuple[int, int]]:
        """(direction index, neighbor index) pairs of intersection ``i``."""
        return [(d, j) for d, name in enumerate(DIRS)
                if (j := self.adjacency[i][name]) is not None]

    def road_lanes(self, u: str, v: str) -> list[int]:
        return [self.lane_index[f"{u}->{v}#{k}"] for k in range(3)]


def grid_document(rows: int, cols: int, **lane_defaults: Any) -> dict:
    """Expand the ``{"grid": {...}}`` shorthand into a full roadnet document."""
    if rows < 1 or cols < 1:
        raise RoadnetError("grid.rows and grid.cols must be >= 1")

    def nid(r: int, c: int) -> str:
        return f"i{r}_{c}"

    inters = []
    for r in range(rows):
        for c in range(cols):
            inters.append({
                "id": nid(r, c),
                "grid_pos": [r, c],
                "neighbors": {
                    "N": nid(r - 1, c) if r > 0 else None,
                    "E": nid(r, c + 1) if c < cols - 1 else None,
                    "S": nid(r + 1, c) if r < rows - 1 else None,
                    "W": nid(r, c - 1) if c > 0 else None,
                },
            })
    defaults = {"length_m": 300.0, "free_flow_s": 20, "capacity": 40, "sat_flow": 1.0}
    defaults.update(lane_defaults)
    return {"format": ROADNET_FORMAT, "intersections": inters, "lane_defaults": defaults}


def load_network(doc: dict | str | Path) -> RoadNetwork:
    """Build a :class:`RoadNetwork` from a roadnet document, a JSON string or a path."""
    if isinstance(doc, Path) or (isinstance(doc, str) and not doc.lstrip().startswith("{")):
        doc = json.loads(Path(doc).read_text())
    elif isinstance(doc, str):
        doc = json.loads(doc)
    if not isinstance(doc, dict):
        raise RoadnetError("roadnet document must be an object")
    if "grid" in doc:
        g = doc["grid"]
        try:
            rows, cols = int(g["rows"]), int(g["cols"])
        except (KeyError, TypeError, ValueError) as exc:
            raise RoadnetError(f"grid: bad or missing field ({exc})") from None
        full = grid_document(rows, cols, **doc.get("lane_defaults", {}))
        if "lane_overrides" in doc:
            full["lane_overrides"] = doc["lane_overrides"]
        doc = full
    if doc.get("format") != ROADNET_FORMAT:
        raise RoadnetError(f"format: expected {ROADNET_FORMAT!r}, got {doc.get('format')!r}")
    if "intersections" not in doc or not isinstance(doc["intersections"], list):
        raise RoadnetError("intersections: missing or not a list")

    defaults = {"length_m": 300.0, "free_flow_s": 20, "capacity": 40, "sat_flow": 1.0}
    for k, v in doc.get("lane_defaults", {}).items():
        if k not in defaults:
            raise RoadnetError(f"lane_defaults.{k}: unknown field")
        defaults[k] = v
    overrides = doc.get("lane_overrides", {})

    node_index: dict[str, int] = {}
    raw_nbrs: list[dict[str, str | None]] = []
    positions = []
    for k, entry in enumerate(doc["intersections"]):
        if "id" not in entry:
            raise RoadnetError(f"intersections[{k}].id: missing")
        iid = str(entry["id"])
        if iid in node_index:
            raise RoadnetError(f"intersections[{k}].id: duplicate {iid!r}")
        node_index[iid] = k
        nb = entry.get("neighbors", {})
        if not isinstance(nb, dict) or any(d not in DIRS for d in nb):
            raise RoadnetError(f"intersections[{k}].neighbors: keys must be N/E/S/W")
        raw_nbrs.append({d: nb.get(d) for d in DIRS})
        gp = entry.get("grid_pos")
        positions.append(tuple(gp) if gp is not None else None)

    adjacency: list[dict[str, int | None]] = []
    for k, nb in enumerate(raw_nbrs):
        adj = {}
        for d, j in nb.items():
            if j is None:
                adj[d] = None
            elif str(j) not in node_index:
                raise RoadnetError(f"intersections[{k}].neighbors.{d}: unknown id {j!r}")
            else:
                adj[d] = node_index[str(j)]
        adjacency.append(adj)
    for k, adj in enumerate(adjacency):
        for d, j in adj.items():
            if j is None:
                continue
            back = adjacency[j][DIRS[_OPP[DIRS.index(d)]]]
            if back != k:
                raise RoadnetError(
                    f"asymmetric adjacency: {d}-neighbor of {doc['intersections'][k]['id']!r} "
                    f"does not point back")

    ids = [str(e["id"]) for e in doc["intersections"]]
    lanes: list[Lane] = []
    lane_index: dict[str, int] = {}

    def add_road(u: str, v: str, up: int, down: int) -> None:
        for k in range(3):
            lid = f"{u}->{v}#{k}"
            ov = overrides.get(lid, {})
            for key in ov:
                if key not in defaults:
                    raise RoadnetError(f"lane_overrides.{lid}.{key}: unknown field")
            prm = {**defaults, **ov}
            lane = Lane(id=lid, index=len(lanes), road=(u, v), lane_no=k,
                        length=float(prm["length_m"]), free_flow_time=int(round(prm["free_flow_s"])),
                        capacity=int(prm["capacity"]), saturation_flow=float(prm["sat_flow"]),
                        upstream=up, downstream=down)
            if lane.capacity < 1 or lane.saturation_flow <= 0 or lane.free_flow_time < 1:
                raise RoadnetError(f"lane {lid}: capacity>=1, sat_flow>0, free_flow_s>=1 required")
            lane_index[lid] = lane.index
            lanes.append(lane)

    entry_lanes, exit_lanes = [], []
    for k, iid in enumerate(ids):
        for d_i, d in enumerate(DIRS):
            j = adjacency[k][d]
            if j is None:
                b = f"{iid}~{d}"
                add_road(b, iid, -1, k)
                entry_lanes.extend(lane_index[f"{b}->{iid}#{q}"] for q in range(3))
                add_road(iid, b, k, -1)
                exit_lanes.extend(lane_index[f"{iid}->{b}#{q}"] for q in range(3))
            else:
                add_road(ids[j], iid, j, k)

    for lid in overrides:
        if lid not in lane_index:
            raise RoadnetError(f"lane_overrides.{lid}: unknown lane")

    def upstream_node(k: int, d: str) -> str:
        j = adjacency[k][d]
        return ids[j] if j is not None else f"{ids[k]}~{d}"

    inters = []
    for k, iid in enumerate(ids):
        incoming, outgoing = [], []
        for d in DIRS:
            u = upstream_node(k, d)
            incoming.extend(lane_index[f"{u}->{iid}#{t}"] for t in range(3))
        for d in DIRS:
            v = upstream_node(k, d)
            outgoing.extend(lane_index[f"{iid}->{v}#{t}"] for t in range(3))
        # movement pairs: each incoming lane feeds all three lanes of its target road
        moves: dict[int, list[tuple[int, int]]] = {}
        for a in range(4):
            for t in range(3):
                lin = incoming[3 * a + t]
                h = heading_after(a, t)
                moves[lin] = [(lin, outgoing[3 * h + q]) for q in range(3)]
        phase_lanes = [
            [(0, 1), (2, 1)],  # NS straight
            [(0, 0), (2, 0)],  # NS left
            [(1, 1), (3, 1)],  # EW straight
            [(1, 0), (3, 0)],  # EW left
        ]
        rights = [incoming[3 * a + 2] for a in range(4)]
        table, greens = [], []
        for spec in phase_lanes:
            lanes_on = [incoming[3 * a + t] for a, t in spec] + rights
            greens.append(tuple(lanes_on))
            table.append(frozenset(p for lin in lanes_on for p in moves[lin]))
        inters.append(IntersectionNode(
            id=iid, index=k, grid_pos=positions[k], incoming_lanes=incoming,
            outgoing_lanes=outgoing, phase_table=table, green_lanes=greens,
            neighbors={d: adjacency[k][d] for d in DIRS}))

    return RoadNetwork(intersections=inters, lanes=lanes, adjacency=adjacency,
                       entry_lanes=entry_lanes, exit_lanes=exit_lanes,
                       lane_index=lane_index, node_index=node_index)


def grid_network(rows: int, cols: int, **lane_defaults: Any) -> RoadNetwork:
    return load_network(grid_document(rows, cols, **lane_defaults))


# ---------------------------------------------------------------------------
# dynamic state


class Vehicle:
    __slots__ = ("id", "route", "leg", "entry_time", "exit_time", "ready_at")

    def __init__(self, vid: int, route: tuple[int, ...], entry_time: float) -> None:
        self.id = vid
        self.route = route
        self.leg = 0
        self.entry_time = entry_time
        self.exit_time: float | None = None
        self.ready_at = 0

    def key(self) -> tuple:
        return (self.id, self.leg, self.entry_time, self.exit_time, self.ready_at)


@dataclass
class ArrivalSchedule:
    """Time-sorted ``(entry_time_s, route)`` pairs; routes are lane-id tuples."""

    arrivals: list[tuple[float, tuple[str, ...]]]
    horizon: float = 3600.0

    def __len__(self) -> int:
        return len(self.arrivals)


@dataclass
class SimState:
    network: RoadNetwork
    clock: int
    phases: list[int]
    transit: list[deque]
    queue: list[deque]
    backlog: list[deque]
    counts: list[int]
    credit: list[float]
    pending: list[tuple[float, tuple[int, ...]]]
    next_arrival: int
    vehicles: list[Vehicle]
    n_exited: int
    rng: np.random.Generator
    seed: int
    horizon: float

    @property
    def n_entered(self) -> int:
        return len(self.vehicles)

    @property
    def n_on_network(self) -> int:
        return (sum(len(q) for q in self.transit) + sum(len(q) for q in self.queue)
                + sum(len(q) for q in self.backlog))

    @property
    def n_pending(self) -> int:
        return len(self.pending) - self.next_arrival

    def digest(self) -> str:
        """Hash of the full dynamic state; equal digests mean identical states."""
        h = hashlib.sha256()
        h.update(repr((self.clock, self.phases, self.counts, self.credit,
                       self.next_arrival, self.n_exited)).encode())
        for group in (self.transit, self.queue, self.backlog):
            for q in group:
                h.update(repr([v.id for v in q]).encode())
        h.update(repr([v.key() for v in self.vehicles]).encode())
        h.update(repr(self.rng.bit_generator.state).encode())
        return h.hexdigest()


def reset(network: RoadNetwork, demand: ArrivalSchedule | None = None, seed: int = 0,
          horizon: float = 3600.0) -> SimState:
    """Fresh state at clock 0 with ``demand`` loaded as pending arrivals."""
    demand = ArrivalSchedule([], horizon) if demand is None else demand
    if demand.horizon > horizon:
        raise SimError(f"schedule horizon {demand.horizon} exceeds episode horizon {horizon}")
    pending = []
    for t, route in demand.arrivals:
        pending.append((float(t), tuple(network.lane(lid).index for lid in route)))
    n_lanes = len(network.lanes)
    return SimState(
        network=network, clock=0, phases=[0] * network.n,
        transit=[deque() for _ in range(n_lanes)], queue=[deque() for _ in range(n_lanes)],
        backlog=[deque() for _ in range(n_lanes)], counts=[0] * n_lanes,
        credit=[0.0] * n_lanes, pending=pending, next_arrival=0, vehicles=[],
        n_exited=0, rng=np.random.default_rng(seed), seed=seed, horizon=horizon)


def place_vehicle(state: SimState, route, queued: bool = True, remaining: int = 0) -> Vehicle:
    """Put a vehicle on the first lane of ``route`` at the current clock.

    It joins the back of that lane's queue, or with ``queued=False`` travels
    for ``remaining`` more seconds first. Used to set up hand-built scenarios.
    """
    net = state.network
    idx = tuple(net.lane(lid).index if isinstance(lid, str) else int(lid) for lid in route)
    li = idx[0]
    if state.counts[li] >= net.lanes[li].capacity:
        raise SimError(f"lane {net.lanes[li].id!r} is full")
    v = Vehicle(len(state.vehicles), idx, float(state.clock))
    state.vehicles.append(v)
    if queued:
        state.queue[li].append(v)
    else:
        v.ready_at = state.clock + int(remaining)
        state.transit[li].append(v)
    state.counts[li] += 1
    return v


def _check_id(state: SimState, i: int) -> None:
    if not isinstance(i, (int, np.integer)) or not 0 <= i < state.network.n:
        raise SimError(f"unknown intersection id {i!r}")


def _tick(state: SimState) -> None:
    net = state.network
    lanes = net.lanes
    t_new = state.clock + 1
    transit, queue, counts = state.transit, state.queue, state.counts

    for li in range(len(lanes)):
        tq = transit[li]
        while tq and tq[0].ready_at <= t_new:
            v = tq.popleft()
            if v.leg == len(v.route) - 1:
                v.exit_time = float(t_new)
                counts[li] -= 1
                state.n_exited += 1
            else:
                queue[li].append(v)

    credit = state.credit
    for node in net.intersections:
        for li in node.green_lanes[state.phases[node.index]]:
            q = queue[li]
            if not q:
                credit[li] = 0.0
                continue
            sat = lanes[li].saturation_flow
            credit[li] = min(credit[li] + sat, max(sat, 1.0))
            while q and credit[li] >= 1.0:
                v = q[0]
                nxt = v.route[v.leg + 1]
                if counts[nxt] >= lanes[nxt].capacity:
                    break
                q.popleft()
                counts[li] -= 1
                v.leg += 1
                v.ready_at = t_new + lanes[nxt].free_flow_time
                transit[nxt].append(v)
                counts[nxt] += 1
                credit[li] -= 1.0

    for li in net.entry_lanes:
        bq = state.backlog[li]
        while bq and counts[li] < lanes[li].capacity:
            v = bq.popleft()
            v.ready_at = t_new + lanes[li].free_flow_time
            transit[li].append(v)
            counts[li] += 1

    pending = state.pending
    while state.next_arrival < len(pending) and pending[state.next_arrival][0] < t_new:
        t, route = pending[state.next_arrival]
        state.next_arrival += 1
        v = Vehicle(len(state.vehicles), route, t)
        state.vehicles.append(v)
        li = route[0]
        if counts[li] < lanes[li].capacity and not state.backlog[li]:
            v.ready_at = t_new + lanes[li].free_flow_time
            transit[li].append(v)
            counts[li] += 1
        else:
            state.backlog[li].append(v)

    state.clock = t_new


def step(state: SimState, actions, dt: int = 5, on_tick=None) -> SimState:
    """Apply one phase per intersection, then simulate ``dt`` one-second ticks.

    Mutates and returns ``state``. ``on_tick(state)`` runs after every tick.
    """
    net = state.network
    if len(actions) != net.n:
        raise SimError(f"expected {net.n} actions, got {len(actions)}")
    for i, a in enumerate(actions):
        if int(a) != a or not 0 <= int(a) < N_PHASES:
            raise SimError(f"action {a!r} for intersection {i} outside 0..{N_PHASES - 1}")
    new_phases = [int(a) for a in actions]
    for node, old, a in zip(net.intersections, state.phases, new_phases):
        if old != a:
            # service credit is not carried across a phase change
            for li in node.incoming_lanes:
                state.credit[li] = 0.0
    state.phases = new_phases
    for _ in range(int(dt)):
        _tick(state)
        if on_tick is not None:
            on_tick(state)
    return state


def observe(state: SimState, i: int) -> np.ndarray:
    """Raw observation: 12 incoming-lane vehicle counts then a 4-way phase one-hot."""
    _check_id(state, i)
    node = state.network.intersections[i]
    obs = np.zeros(OBS_DIM)
    obs[:12] = [state.counts[li] for li in node.incoming_lanes]
    obs[12 + state.phases[i]] = 1.0
    return obs


def observe_all(state: SimState, normalized: bool = False) -> np.ndarray:
    net = state.network
    counts = np.asarray(state.counts, dtype=np.float64)
    inc = np.array([n.incoming_lanes for n in net.intersections])
    obs = np.zeros((net.n, OBS_DIM))
    obs[:, :12] = counts[inc]
    if normalized:
        caps = np.array([[net.lanes[li].capacity for li in row] for row in inc], dtype=float)
        obs[:, :12] /= caps
    obs[np.arange(net.n), 12 + np.asarray(state.phases)] = 1.0
    return obs


def queue_length(state: SimState, i: int, mode: str = "stopped") -> int:
    """Vehicles on the incoming lanes of ``i``: stopped ones, or all with ``mode='total'``."""
    _check_id(state, i)
    lanes = state.network.intersections[i].incoming_lanes
    if mode == "total":
        return sum(state.counts[li] for li in lanes)
    if mode != "stopped":
        raise SimError(f"unknown queue mode {mode!r}")
    return sum(len(state.queue[li]) for li in lanes)


def queue_lengths(state: SimState, mode: str = "stopped") -> np.ndarray:
    return np.array([queue_length(state, i, mode) for i in range(state.network.n)], dtype=float)


def pairs_pressure(counts, pairs) -> int:
    return int(sum(counts[a] - counts[b] for a, b in pairs))


def pressure(state: SimState, i: int, phase: int) -> int:
    """Sum over the phase's permitted (incoming, outgoing) lane pairs of count differences."""
    _check_id(state, i)
    if not 0 <= phase < N_PHASES:
        raise SimError(f"unknown phase {phase!r}")
    return pairs_pressure(state.counts, state.network.intersections[i].phase_table[phase])


def average_travel_time(state: SimState, horizon: float | None = None) -> float:
    """Mean of exit minus entry time; unfinished vehicles count up to ``horizon``."""
    if not state.vehicles:
        raise SimError("no vehicles spawned: average travel time is undefined")
    end = state.clock if horizon is None else horizon
    total = 0.0
    for v in state.vehicles:
        total += (v.exit_time if v.exit_time is not None else end) - v.entry_time
    return total / len(state.vehicles)
