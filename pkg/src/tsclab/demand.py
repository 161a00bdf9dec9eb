"""Arrival schedules: explicit replays and the piecewise-rate mixed profiles."""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .netsim import DIRS, ArrivalSchedule, RoadNetwork, SimError, heading_after

FLOW_FORMAT = "metavim-flow-v1"

# veh/s for each 600 s interval of the hour
MIXED_LOW_RATES = (0.30, 0.55, 1.05, 1.05, 0.55, 0.75)
MIXED_HIGH_RATES = (0.33, 0.55, 4.00, 0.33, 1.22, 1.52)
INTERVAL_S = 600.0


class FlowError(ValueError):
    """Flow document is malformed or references lanes the network lacks."""


def _check_route(network: RoadNetwork, route) -> tuple[str, ...]:
    if not route:
        raise FlowError("route must be non-empty")
    ids = []
    for lid in route:
        if lid not in network.lane_index:
            raise FlowError(f"route references unknown lane {lid!r}")
        ids.append(str(lid))
    if ids[0] not in {network.lanes[i].id for i in network.entry_lanes}:
        raise FlowError(f"route must start on an entry lane, got {ids[0]!r}")
    if ids[-1] not in {network.lanes[i].id for i in network.exit_lanes}:
        raise FlowError(f"route must end on an exit lane, got {ids[-1]!r}")
    for a, b in zip(ids[:-1], ids[1:]):
        la, lb = network.lane(a), network.lane(b)
        node = la.downstream
        if node < 0 or (la.index, lb.index) not in _movement_pairs(network, node):
            raise FlowError(f"lanes {a!r} -> {b!r} are not a permitted movement")
    return tuple(ids)


def _movement_pairs(network: RoadNetwork, node: int) -> frozenset:
    return frozenset().union(*network.intersections[node].phase_table)


def _segment_times(start: float, end: float, rate: float) -> list[float]:
    if rate <= 0:
        return []
    n = int(round((end - start) * rate))
    return [start + k / rate for k in range(n) if start + k / rate < end]


def build_replay(flow_document: dict | str | Path, network: RoadNetwork,
                 horizon: float = 3600.0) -> ArrivalSchedule:
    """Schedule equal to the document's explicit vehicle list, sorted by time.

    ``segments`` entries, when present, add deterministically spaced arrivals.
    """
    doc = _load(flow_document)
    if "vehicles" not in doc and "segments" not in doc:
        raise FlowError("flow document needs 'vehicles' and/or 'segments'")
    arrivals = []
    for k, veh in enumerate(doc.get("vehicles", [])):
        try:
            t = float(veh["entry_time_s"])
            route = veh["route"]
        except (KeyError, TypeError, ValueError):
            raise FlowError(f"vehicles[{k}]: needs route and entry_time_s") from None
        if not 0 <= t <= horizon:
            raise FlowError(f"vehicles[{k}].entry_time_s={t} outside [0, {horizon}]")
        arrivals.append((t, _check_route(network, route)))
    for k, seg in enumerate(doc.get("segments", [])):
        try:
            start, end, rate = float(seg["start_s"]), float(seg["end_s"]), float(seg["rate"])
            route = seg["route"]
        except (KeyError, TypeError, ValueError):
            raise FlowError(f"segments[{k}]: needs route, start_s, end_s, rate") from None
        if not (0 <= start < end <= horizon) or rate < 0:
            raise FlowError(f"segments[{k}]: need 0 <= start_s < end_s <= horizon and rate >= 0")
        r = _check_route(network, route)
        arrivals.extend((t, r) for t in _segment_times(start, end, rate))
    arrivals.sort(key=lambda a: a[0])
    return ArrivalSchedule(arrivals, horizon)


def _load(doc) -> dict:
    if isinstance(doc, Path) or (isinstance(doc, str) and not doc.lstrip().startswith("{")):
        doc = json.loads(Path(doc).read_text())
    elif isinstance(doc, str):
        doc = json.loads(doc)
    if doc.get("format") != FLOW_FORMAT:
        raise FlowError(f"format: expected {FLOW_FORMAT!r}, got {doc.get('format')!r}")
    return doc


def boundary_routes(network: RoadNetwork) -> list[tuple[str, ...]]:
    """Boundary-to-boundary routes: straight through, or with one left/right turn.

    Enumerated in a fixed order so seeded draws are reproducible.
    """
    routes = []
    for i, node in enumerate(network.intersections):
        for a, d in enumerate(DIRS):
            if network.adjacency[i][d] is not None:
                continue
            for plan in _turn_plans(network, i, a):
                routes.append(_plan_lanes(network, i, a, plan))
    return routes


def _walk(network: RoadNetwork, i: int, a: int, turn_at: int | None, turn: int):
    """Follow a route from approach ``a`` of node ``i``; yields (node, approach, turn)."""
    hops = []
    k = 0
    seen = set()
    while True:
        t = turn if k == turn_at else 1
        hops.append((i, a, t))
        if (i, a) in seen:
            return None
        seen.add((i, a))
        h = heading_after(a, t)
        j = network.adjacency[i][DIRS[h]]
        if j is None:
            return hops
        i, a = j, (h + 2) % 4
        k += 1


def _turn_plans(network: RoadNetwork, i: int, a: int):
    straight = _walk(network, i, a, None, 1)
    if straight is None:
        return
    yield straight
    for pos in range(len(straight)):
        for turn in (0, 2):
            hops = _walk(network, i, a, pos, turn)
            if hops is not None:
                yield hops


def _plan_lanes(network: RoadNetwork, i0: int, a0: int, hops) -> tuple[str, ...]:
    ids = [n.id for n in network.intersections]
    lanes = []
    for i, a, t in hops:
        j = network.adjacency[i][DIRS[a]]
        u = ids[j] if j is not None else f"{ids[i]}~{DIRS[a]}"
        lanes.append(f"{u}->{ids[i]}#{t}")
    i, a, t = hops[-1]
    h = heading_after(a, t)
    lanes.append(f"{ids[i]}->{ids[i]}~{DIRS[h]}#1")
    return tuple(lanes)


def build_mixed(profile: str, network: RoadNetwork, horizon: float = 3600.0, seed: int = 0,
                rates=None, poisson: bool = False) -> ArrivalSchedule:
    """Piecewise-constant arrival profile over six 10-minute intervals.

    Arrivals are spaced ``1/rate`` apart within each interval (exponential gaps
    when ``poisson`` is set); routes are drawn uniformly with ``seed``.
    """
    if rates is None:
        if profile == "low":
            rates = MIXED_LOW_RATES
        elif profile == "high":
            rates = MIXED_HIGH_RATES
        else:
            raise FlowError(f"unknown mixed profile {profile!r}")
    rates = tuple(float(r) for r in rates)
    if abs(horizon - INTERVAL_S * len(rates)) > 1e-9:
        raise FlowError(f"horizon {horizon} does not match {len(rates)} x {INTERVAL_S:g} s intervals")
    if any(r < 0 for r in rates):
        raise FlowError("rates must be non-negative")
    rng = np.random.default_rng(seed)
    times: list[float] = []
    for k, rate in enumerate(rates):
        start, end = k * INTERVAL_S, (k + 1) * INTERVAL_S
        if poisson:
            t = start
            while rate > 0:
                t += rng.exponential(1.0 / rate)
                if t >= end:
                    break
                times.append(t)
        else:
            times.extend(_segment_times(start, end, rate))
    if not times:
        return ArrivalSchedule([], horizon)
    routes = boundary_routes(network)
    if not routes:
        raise SimError("network has no boundary-to-boundary routes")
    picks = rng.integers(0, len(routes), size=len(times))
    return ArrivalSchedule([(t, routes[p]) for t, p in zip(times, picks)], horizon)


def build_schedule(kind: str, network: RoadNetwork, horizon: float = 3600.0, seed: int = 0,
                   flow_path: str | None = None, rates=None, poisson: bool = False) -> ArrivalSchedule:
    if kind == "mixed_low":
        return build_mixed("low", network, horizon, seed, rates, poisson)
    if kind == "mixed_high":
        return build_mixed("high", network, horizon, seed, rates, poisson)
    if kind == "replay":
        if flow_path is None:
            raise FlowError("replay flow needs a flow document path")
        return build_replay(flow_path, network, horizon)
    raise FlowError(f"unknown flow kind {kind!r}")
