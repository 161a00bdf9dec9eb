import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from tsclab import demand, netsim
from tsclab.demand import FLOW_FORMAT, FlowError

ROUTE = ["i0_0~N->i0_0#1", "i0_0->i0_0~S#1"]


def doc(vehicles=None, segments=None):
    d = {"format": FLOW_FORMAT}
    if vehicles is not None:
        d["vehicles"] = vehicles
    if segments is not None:
        d["segments"] = segments
    return d


def test_replay_empty(grid1):
    assert len(demand.build_replay(doc(vehicles=[]), grid1)) == 0


def test_replay_sorted(grid1):
    vs = [{"route": ROUTE, "entry_time_s": t} for t in (5, 1, 9)]
    sched = demand.build_replay(doc(vehicles=vs), grid1)
    assert [t for t, _ in sched.arrivals] == [1.0, 5.0, 9.0]


def test_replay_1775_records(grid2):
    rng = np.random.default_rng(0)
    routes = demand.boundary_routes(grid2)
    vs = [{"route": list(routes[rng.integers(len(routes))]), "entry_time_s": float(t)}
          for t in rng.uniform(0, 3600, 1775)]
    sched = demand.build_replay(json.dumps(doc(vehicles=vs)), grid2)
    assert len(sched) == 1775
    times = [t for t, _ in sched.arrivals]
    assert times == sorted(times)


def test_replay_from_path(tmp_path, grid1):
    p = tmp_path / "flow.json"
    p.write_text(json.dumps(doc(vehicles=[{"route": ROUTE, "entry_time_s": 3}])))
    assert len(demand.build_replay(p, grid1)) == 1
    assert len(demand.build_replay(str(p), grid1)) == 1


def test_replay_segments(grid1):
    sched = demand.build_replay(doc(segments=[{"route": ROUTE, "start_s": 0, "end_s": 10,
                                               "rate": 0.5}]), grid1)
    assert [t for t, _ in sched.arrivals] == [0.0, 2.0, 4.0, 6.0, 8.0]


@pytest.mark.parametrize("bad", [
    ["nope", "i0_0->i0_0~S#1"],
    ["i0_0->i0_0~S#1"],
    ["i0_0~N->i0_0#1"],
    ["i0_0~N->i0_0#1", "i0_0->i0_0~E#1"],
])
def test_replay_bad_routes(grid1, bad):
    with pytest.raises(FlowError):
        demand.build_replay(doc(vehicles=[{"route": bad, "entry_time_s": 0}]), grid1)


def test_replay_schema_errors(grid1):
    with pytest.raises(FlowError):
        demand.build_replay({"format": "x", "vehicles": []}, grid1)
    with pytest.raises(FlowError):
        demand.build_replay(doc(), grid1)
    with pytest.raises(FlowError):
        demand.build_replay(doc(vehicles=[{"route": ROUTE, "entry_time_s": 4000}]), grid1)
    with pytest.raises(FlowError):
        demand.build_replay(doc(segments=[{"route": ROUTE, "start_s": 5, "end_s": 5, "rate": 1}]),
                            grid1)


def test_mixed_low_total(grid2):
    assert len(demand.build_mixed("low", grid2, seed=0)) == 2550


def test_mixed_high_total_and_peak(grid2):
    sched = demand.build_mixed("high", grid2, seed=0)
    assert len(sched) == 4770
    assert sum(1 for t, _ in sched.arrivals if 1200 <= t < 1800) == 2400


def test_zero_rate_profile_is_empty(grid2):
    assert len(demand.build_mixed("low", grid2, rates=(0,) * 6)) == 0


def test_mixed_horizon_mismatch(grid2):
    with pytest.raises(FlowError):
        demand.build_mixed("low", grid2, horizon=1800)


def test_unknown_profile(grid2):
    with pytest.raises(FlowError):
        demand.build_mixed("medium", grid2)
    with pytest.raises(FlowError):
        demand.build_schedule("weird", grid2)


def test_route_count_2x2(grid2):
    assert len(demand.boundary_routes(grid2)) == 40


@settings(max_examples=20)
@given(st.integers(0, 2**32 - 1), st.sampled_from(["low", "high"]))
def test_mixed_deterministic_and_routes_valid(seed, profile):
    net = netsim.grid_network(2, 2)
    a = demand.build_mixed(profile, net, seed=seed)
    b = demand.build_mixed(profile, net, seed=seed)
    assert a.arrivals == b.arrivals
    entry = {net.lanes[i].id for i in net.entry_lanes}
    exit_ = {net.lanes[i].id for i in net.exit_lanes}
    times = [t for t, _ in a.arrivals]
    assert times == sorted(times) and 0 <= times[0] and times[-1] <= 3600
    for _, route in a.arrivals[:50]:
        assert route[0] in entry and route[-1] in exit_


@settings(max_examples=20)
@given(st.lists(st.floats(0, 3.0), min_size=6, max_size=6))
def test_cardinality_matches_rates(rates):
    net = netsim.grid_network(1, 1)
    sched = demand.build_mixed("low", net, rates=rates)
    assert len(sched) == sum(int(round(600 * r)) for r in rates)


def test_poisson_mode_is_seeded(grid2):
    a = demand.build_mixed("low", grid2, seed=3, poisson=True)
    b = demand.build_mixed("low", grid2, seed=3, poisson=True)
    assert a.arrivals == b.arrivals
    assert abs(len(a) - 2550) < 300
