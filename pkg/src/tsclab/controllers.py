"""Classical signal controllers: Random, Fixedtime(Offset), MaxPressure, SOTL."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .netsim import N_PHASES, SimState, pressure

KINDS = ("random", "fixedtime", "fixedtime_offset", "maxpressure", "sotl")


@dataclass
class ControllerSpec:
    kind: str
    plan: tuple[float, ...] = (30.0, 30.0, 30.0, 30.0)
    offsets: tuple[float, ...] = ()
    sotl_threshold: float = 30.0
    sotl_min_green: float = 10.0
    phases: tuple[int, ...] = tuple(range(N_PHASES))
    seed: int = 0

    def __post_init__(self) -> None:
        if self.kind not in KINDS:
            raise ValueError(f"unknown controller kind {self.kind!r}; expected one of {KINDS}")
        if self.kind.startswith("fixedtime"):
            if len(self.plan) == 0 or any(d <= 0 for d in self.plan):
                raise ValueError("fixed-time plan durations must be positive")
        if not self.phases:
            raise ValueError("phase list must not be empty")
        if self.sotl_threshold < 0 or self.sotl_min_green < 0:
            raise ValueError("SOTL thresholds must be non-negative")


def random_phase(spec: ControllerSpec, observation, rng: np.random.Generator) -> int:
    """A phase drawn uniformly from ``spec.phases``."""
    return int(spec.phases[rng.integers(len(spec.phases))])


def fixedtime_phase(spec: ControllerSpec, clock: float, offset: float = 0.0) -> int:
    cycle = float(sum(spec.plan))
    pos = (clock + offset) % cycle
    edge = 0.0
    for k, d in enumerate(spec.plan):
        edge += d
        if pos < edge:
            return int(spec.phases[k % len(spec.phases)])
    return int(spec.phases[(len(spec.plan) - 1) % len(spec.phases)])


def argmax_lowest(values) -> int:
    """Index of the largest value; ties go to the lowest index."""
    values = list(values)
    best = 0
    for k in range(1, len(values)):
        if values[k] > values[best]:
            best = k
    return best


def maxpressure_phase(state: SimState, i: int) -> int:
    return argmax_lowest(pressure(state, i, p) for p in range(N_PHASES))


def sotl_phase(spec: ControllerSpec, current_phase: int, green_elapsed: float,
               demand: float) -> int:
    """Hold ``current_phase`` until min green has passed and red demand crosses the threshold."""
    if green_elapsed >= spec.sotl_min_green and demand >= spec.sotl_threshold and demand > 0:
        return (current_phase + 1) % N_PHASES
    return current_phase


class Controller:
    """Network-wide wrapper: call ``select(state)`` once per control interval."""

    def __init__(self, spec: ControllerSpec, n: int, dt: float = 5.0) -> None:
        self.spec = spec
        self.n = n
        self.dt = dt
        self.rng = np.random.default_rng(spec.seed)
        offsets = spec.offsets or (0.0,) * n
        if len(offsets) != n:
            raise ValueError(f"need {n} offsets, got {len(offsets)}")
        self.offsets = tuple(float(o) for o in offsets)
        self.green_elapsed = np.zeros(n)
        self.demand = np.zeros(n)

    def select(self, state: SimState) -> list[int]:
        kind = self.spec.kind
        if kind == "random":
            return [random_phase(self.spec, None, self.rng) for _ in range(self.n)]
        if kind in ("fixedtime", "fixedtime_offset"):
            offs = self.offsets if kind == "fixedtime_offset" else (0.0,) * self.n
            return [fixedtime_phase(self.spec, state.clock, offs[i]) for i in range(self.n)]
        if kind == "maxpressure":
            return [maxpressure_phase(state, i) for i in range(self.n)]
        return self._sotl(state)

    def _sotl(self, state: SimState) -> list[int]:
        out = []
        for i, node in enumerate(state.network.intersections):
            cur = state.phases[i]
            green = set(node.green_lanes[cur])
            waiting = sum(len(state.queue[li]) for li in node.incoming_lanes if li not in green)
            self.demand[i] += waiting * self.dt
            nxt = sotl_phase(self.spec, cur, self.green_elapsed[i], self.demand[i])
            if nxt != cur:
                self.green_elapsed[i] = 0.0
                self.demand[i] = 0.0
            self.green_elapsed[i] += self.dt
            out.append(nxt)
        return out
