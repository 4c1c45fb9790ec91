"""Discrete-time point-queue simulator of a single four-approach intersection.

Each approach (N, S, E, W) has three lanes. Vehicles enter at the far end of a
lane at the speed limit, travel toward the stop line, stop at the back of the
queue, and leave from the head at the saturation headway while their approach
has green. All randomness comes from the generator stored on the state.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

DIRECTIONS = ("N", "S", "E", "W")
LANES_PER_DIRECTION = 3
N_LANES = len(DIRECTIONS) * LANES_PER_DIRECTION

MIN_SPACING = 7.5  # m, vehicle length + gap
STOP_SPEED = 0.1  # m/s, below this a vehicle counts as stopped for wait clocks
SATURATION_HEADWAY = 2.0  # s/veh/lane


class Phase(enum.IntEnum):
    NS = 0
    WE = 1

    @property
    def next(self) -> "Phase":
        return Phase.WE if self is Phase.NS else Phase.NS

    @property
    def directions(self) -> tuple[str, str]:
        return ("N", "S") if self is Phase.NS else ("E", "W")


def serves(phase: Phase, direction: str) -> bool:
    """True if `direction` has green under `phase` (right turns included)."""
    return direction in phase.directions


@dataclass
class Vehicle:
    id: int
    lane: int
    position: float
    speed: float
    entry_time: float
    last_stop_time: float | None = None
    exited: bool = False


@dataclass
class Lane:
    direction: str
    index: int
    length: float
    speed_limit: float
    vehicles: list[Vehicle] = field(default_factory=list)
    credit: float = 0.0  # fractional discharge credit carried between steps
    pending: int = 0  # arrivals blocked at the entrance, placed later

    @property
    def capacity(self) -> int:
        return int(self.length // MIN_SPACING)

    @property
    def name(self) -> str:
        return f"{self.direction}{self.index}"


def lane_number(direction: str, index: int) -> int:
    return DIRECTIONS.index(direction) * LANES_PER_DIRECTION + index


@dataclass(frozen=True)
class Layout:
    """Per-lane geometry, ordered N0..N2, S0..S2, E0..E2, W0..W2."""

    lengths: tuple[float, ...] = (300.0,) * N_LANES
    speed_limits: tuple[float, ...] = (14.0,) * N_LANES

    @classmethod
    def uniform(cls, length: float = 300.0, speed_limit: float = 14.0) -> "Layout":
        return cls((float(length),) * N_LANES, (float(speed_limit),) * N_LANES)


@dataclass(frozen=True)
class ArrivalEntry:
    direction: str
    rate: float  # veh/h
    start: float  # h
    end: float  # h


@dataclass(frozen=True)
class ArrivalSchedule:
    entries: tuple[ArrivalEntry, ...] = ()

    def __post_init__(self):
        for e in self.entries:
            if e.direction not in DIRECTIONS:
                raise ValueError(f"unknown direction {e.direction!r}")
            if not e.rate >= 0:
                raise ValueError(f"negative arrival rate {e.rate} for {e.direction}")
            if not e.start < e.end:
                raise ValueError(f"empty window [{e.start}, {e.end}) for {e.direction}")

    def rate(self, direction: str, t_seconds: float) -> float:
        hours = t_seconds / 3600.0
        return sum(e.rate for e in self.entries
                   if e.direction == direction and e.start <= hours < e.end)


class ExitEvent(NamedTuple):
    vehicle_id: int
    lane: int
    entry_time: float
    exit_time: float

    @property
    def travel_time(self) -> float:
        return self.exit_time - self.entry_time


@dataclass
class SimState:
    clock: float
    lanes: list[Lane]
    current_phase: Phase
    rng: np.random.Generator
    phase_elapsed: float = 0.0
    entered_total: int = 0
    exited_total: int = 0
    next_vehicle_id: int = 0
    headway: float = SATURATION_HEADWAY
    round_robin: dict[str, int] = field(default_factory=lambda: dict.fromkeys(DIRECTIONS, 0))

    @property
    def vehicles_inside(self) -> int:
        return sum(len(lane.vehicles) for lane in self.lanes)

    @property
    def deferred(self) -> int:
        return sum(lane.pending for lane in self.lanes)

    def conserved(self) -> bool:
        return self.entered_total == self.exited_total + self.vehicles_inside

    def switch_phase(self) -> None:
        self.current_phase = self.current_phase.next
        self.phase_elapsed = 0.0


def build_intersection(layout: Layout | None = None, seed: int = 0,
                       initial_phase: Phase = Phase.WE,
                       headway: float = SATURATION_HEADWAY) -> SimState:
    layout = layout or Layout()
    if len(layout.lengths) != N_LANES or len(layout.speed_limits) != N_LANES:
        raise ValueError(f"layout must describe {N_LANES} lanes")
    for i, (length, vmax) in enumerate(zip(layout.lengths, layout.speed_limits)):
        if not (length > 0 and vmax > 0):
            raise ValueError(f"lane {i}: length and speed limit must be positive, "
                             f"got {length}, {vmax}")
    if not headway > 0:
        raise ValueError("saturation headway must be positive")
    lanes = []
    for d in DIRECTIONS:
        for k in range(LANES_PER_DIRECTION):
            n = lane_number(d, k)
            lanes.append(Lane(d, k, float(layout.lengths[n]), float(layout.speed_limits[n])))
    return SimState(clock=0.0, lanes=lanes, current_phase=Phase(initial_phase),
                    rng=np.random.default_rng(seed), headway=headway)


def _place(state: SimState, lane_no: int) -> bool:
    lane = state.lanes[lane_no]
    if lane.vehicles and lane.vehicles[-1].position > lane.length - MIN_SPACING:
        return False
    lane.vehicles.append(Vehicle(id=state.next_vehicle_id, lane=lane_no,
                                 position=lane.length, speed=lane.speed_limit,
                                 entry_time=state.clock))
    state.next_vehicle_id += 1
    state.entered_total += 1
    return True


def spawn_arrivals(state: SimState, schedule: ArrivalSchedule, dt: float) -> int:
    """Draw Poisson arrivals for one step and place them at lane entrances.

    Arrivals that do not fit (entrance occupied) are kept as pending on their
    lane and placed first on later calls; see ``SimState.deferred``.
    Returns the number of vehicles placed in the network during this call.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    placed = 0
    for n, lane in enumerate(state.lanes):
        if lane.pending and _place(state, n):
            lane.pending -= 1
            placed += 1
    for d in DIRECTIONS:
        rate = schedule.rate(d, state.clock)
        if rate <= 0:
            continue
        count = int(state.rng.poisson(rate * dt / 3600.0))
        for _ in range(count):
            k = state.round_robin[d]
            state.round_robin[d] = (k + 1) % LANES_PER_DIRECTION
            n = lane_number(d, k)
            if state.lanes[n].pending == 0 and _place(state, n):
                placed += 1
            else:
                state.lanes[n].pending += 1
    return placed


def _advance_lane(state: SimState, lane: Lane, green: bool, dt: float,
                  exits: list[ExitEvent]) -> None:
    t0, t1 = state.clock, state.clock + dt
    vmax = lane.speed_limit
    reach = vmax * dt

    if green:
        lane.credit += dt / state.headway
        while lane.vehicles and lane.credit >= 1.0 and lane.vehicles[0].position <= reach:
            veh = lane.vehicles.pop(0)
            veh.exited = True
            lane.credit -= 1.0
            exits.append(ExitEvent(veh.id, veh.lane, veh.entry_time, t1))
        if not lane.vehicles or lane.vehicles[0].position > reach:
            lane.credit = min(lane.credit, 1.0)
    else:
        lane.credit = 0.0

    front = None
    for veh in lane.vehicles:
        limit = 0.0 if front is None else front + MIN_SPACING
        free = veh.position - reach
        if free > limit:
            veh.position = free
            veh.speed = vmax
            veh.last_stop_time = None
        else:
            new = min(veh.position, limit)
            if new < veh.position or veh.last_stop_time is None:
                # came to rest during this step, possibly after creeping up the queue
                veh.last_stop_time = t0 + (veh.position - new) / vmax
            veh.position = new
            veh.speed = 0.0
        front = veh.position


def advance(state: SimState, green_phase: Phase, dt: float) -> list[ExitEvent]:
    """Run the network forward by `dt` seconds with `green_phase` shown.

    Switches the signal first if `green_phase` differs from the current one.
    """
    if not dt > 0:
        raise ValueError("dt must be positive")
    if Phase(green_phase) is not state.current_phase:
        state.switch_phase()
    exits: list[ExitEvent] = []
    for lane in state.lanes:
        _advance_lane(state, lane, serves(state.current_phase, lane.direction), dt, exits)
    state.exited_total += len(exits)
    state.clock += dt
    state.phase_elapsed += dt
    return exits


@dataclass
class LaneSnapshot:
    """Per-lane readings at one instant; arrays are indexed by lane number."""

    time: float
    queue: np.ndarray
    count: np.ndarray
    wait: np.ndarray
    avg_speed: np.ndarray
    speed_limit: np.ndarray
    positions: list[np.ndarray]


def lane_snapshot(state: SimState) -> LaneSnapshot:
    q = np.zeros(N_LANES)
    v = np.zeros(N_LANES)
    w = np.zeros(N_LANES)
    speed = np.zeros(N_LANES)
    limits = np.array([lane.speed_limit for lane in state.lanes])
    positions = []
    for i, lane in enumerate(state.lanes):
        vehs = lane.vehicles
        v[i] = len(vehs)
        q[i] = sum(1 for veh in vehs if veh.speed == 0.0)
        w[i] = math.fsum(state.clock - veh.last_stop_time for veh in vehs
                         if veh.last_stop_time is not None)
        # empty lane: no delay by convention
        speed[i] = math.fsum(veh.speed for veh in vehs) / len(vehs) if vehs else lane.speed_limit
        positions.append(np.array([veh.position for veh in vehs]))
    return LaneSnapshot(state.clock, q, v, w, speed, limits, positions)

