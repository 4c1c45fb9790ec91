"""Agent-facing environment: observations, actions and the weighted reward."""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .simcore import (
    N_LANES,
    ArrivalSchedule,
    ExitEvent,
    Layout,
    Phase,
    SimState,
    advance,
    build_intersection,
    lane_snapshot,
    spawn_arrivals,
)


class Action(enum.IntEnum):
    KEEP = 0
    CHANGE = 1


def one_hot(phase: Phase) -> np.ndarray:
    out = np.zeros(len(Phase))
    out[int(phase)] = 1.0
    return out


@dataclass(eq=False)  # array fields; compare by identity
class Observation:
    q: np.ndarray
    v: np.ndarray
    w: np.ndarray
    phase: Phase
    grid: np.ndarray
    latent: np.ndarray | None = None  # set by the Q-network's encoder when requested

    @property
    def current_phase(self) -> np.ndarray:
        return one_hot(self.phase)

    @property
    def next_phase(self) -> np.ndarray:
        return one_hot(self.phase.next)

    def vector(self) -> np.ndarray:
        """Numeric part of the state: q, v, w and both phase one-hots."""
        return np.concatenate([self.q, self.v, self.w, self.current_phase, self.next_phase])


@dataclass(frozen=True)
class RewardWeights:
    delay: float = -0.25
    wait: float = -0.25
    queue: float = -0.25
    change: float = -5.0
    throughput: float = -1.0
    travel: float = -1.0

    def as_tuple(self) -> tuple[float, ...]:
        return (self.delay, self.wait, self.queue, self.change, self.throughput, self.travel)

    @classmethod
    def from_sequence(cls, betas: Sequence[float]) -> "RewardWeights":
        if len(betas) != 6:
            raise ValueError("expected six reward weights")
        return cls(*map(float, betas))


@dataclass(frozen=True)
class RewardBreakdown:
    sum_delay: float
    sum_wait: float
    sum_queue: float
    change_flag: int
    passed_count: int
    passed_travel_time: float
    total: float

    def factors(self) -> tuple[float, ...]:
        return (self.sum_delay, self.sum_wait, self.sum_queue,
                float(self.change_flag), float(self.passed_count), self.passed_travel_time)


def compute_delay(avg_speed, speed_limit):
    """1 - avg/limit; works elementwise on arrays."""
    avg_speed = np.asarray(avg_speed, dtype=float)
    speed_limit = np.asarray(speed_limit, dtype=float)
    if np.any(speed_limit <= 0):
        raise ValueError("speed limit must be positive")
    d = 1.0 - avg_speed / speed_limit
    return float(d) if d.ndim == 0 else d


def compute_reward(sum_delay: float, sum_wait: float, sum_queue: float, change_flag: int,
                   passed_count: int, passed_travel_time: float,
                   weights: RewardWeights = RewardWeights()) -> RewardBreakdown:
    factors = (float(sum_delay), float(sum_wait), float(sum_queue), float(change_flag),
               float(passed_count), float(passed_travel_time))
    if not all(math.isfinite(f) for f in factors):
        raise ValueError(f"non-finite reward factor in {factors}")
    total = sum(b * f for b, f in zip(weights.as_tuple(), factors))
    return RewardBreakdown(factors[0], factors[1], factors[2], int(change_flag),
                           int(passed_count), factors[5], total)


def rasterize_positions(state: SimState, cell_size: float = 5.0,
                        extent: float = 150.0) -> np.ndarray:
    """Binary occupancy grid, one row per lane, column k = [k, k+1) cells from the stop line."""
    if not cell_size > 0:
        raise ValueError("cell_size must be positive")
    n_cells = int(math.ceil(extent / cell_size))
    grid = np.zeros((N_LANES, n_cells))
    for i, lane in enumerate(state.lanes):
        for veh in lane.vehicles:
            k = int(veh.position // cell_size)
            if k < n_cells:
                grid[i, k] = 1.0
    return grid


@dataclass(frozen=True)
class EnvConfig:
    dt: float = 5.0  # decision step
    sim_dt: float = 1.0  # integration sub-step, must divide dt
    cell_size: float = 5.0
    grid_extent: float = 150.0
    weights: RewardWeights = field(default_factory=RewardWeights)
    travel_time_unit: float = 60.0  # seconds per unit of T_t in the reward (60 = minutes)

    @property
    def substeps(self) -> int:
        n = round(self.dt / self.sim_dt)
        if n < 1 or abs(n * self.sim_dt - self.dt) > 1e-9:
            raise ValueError(f"sim_dt {self.sim_dt} must divide dt {self.dt}")
        return n


def observe(state: SimState, cfg: EnvConfig = EnvConfig()) -> Observation:
    snap = lane_snapshot(state)
    grid = rasterize_positions(state, cfg.cell_size, cfg.grid_extent)
    return Observation(snap.queue, snap.count, snap.wait, state.current_phase, grid)


def _finish_step(state: SimState, cfg: EnvConfig, change_flag: int,
                 exits: list[ExitEvent]) -> tuple[Observation, RewardBreakdown]:
    snap = lane_snapshot(state)
    delay = compute_delay(snap.avg_speed, snap.speed_limit)
    reward = compute_reward(
        sum_delay=math.fsum(delay), sum_wait=math.fsum(snap.wait), sum_queue=math.fsum(snap.queue),
        change_flag=change_flag, passed_count=len(exits),
        passed_travel_time=math.fsum(e.travel_time for e in exits) / cfg.travel_time_unit,
        weights=cfg.weights)
    grid = rasterize_positions(state, cfg.cell_size, cfg.grid_extent)
    obs = Observation(snap.queue, snap.count, snap.wait, state.current_phase, grid)
    return obs, reward


def env_step(state: SimState, action: Action, schedule: ArrivalSchedule,
             cfg: EnvConfig = EnvConfig()) -> tuple[Observation, RewardBreakdown, list[ExitEvent]]:
    """Apply `action`, simulate one decision step, and score it.

    A change takes effect at the start of the step. Exit events of the step
    are returned alongside the observation and reward.
    """
    change = Action(action) is Action.CHANGE
    if change:
        state.switch_phase()
    return step_phases(state, [state.current_phase] * cfg.substeps, schedule, cfg,
                       change_flag=int(change))


def step_phases(state: SimState, phases: Sequence[Phase], schedule: ArrivalSchedule,
                cfg: EnvConfig = EnvConfig(), change_flag: int | None = None
                ) -> tuple[Observation, RewardBreakdown, list[ExitEvent]]:
    """Simulate one decision step showing ``phases[k]`` during sub-step k.

    Used by fixed-time plans whose switch instants fall inside a decision step.
    When `change_flag` is None it is 1 iff the signal switched during the step.
    """
    if len(phases) != cfg.substeps:
        raise ValueError(f"expected {cfg.substeps} sub-step phases, got {len(phases)}")
    switched = 0
    exits: list[ExitEvent] = []
    for p in map(Phase, phases):
        if p is not state.current_phase:
            switched = 1
        spawn_arrivals(state, schedule, cfg.sim_dt)
        exits.extend(advance(state, p, cfg.sim_dt))
    flag = switched if change_flag is None else change_flag
    obs, reward = _finish_step(state, cfg, flag, exits)
    return obs, reward, exits


class TrafficEnv:
    """Stateful wrapper bundling a simulator state with its arrival schedule."""

    def __init__(self, schedule: ArrivalSchedule, layout: Layout | None = None, seed: int = 0,
                 cfg: EnvConfig = EnvConfig(), initial_phase: Phase = Phase.WE):
        self.schedule = schedule
        self.layout = layout or Layout()
        self.seed = seed
        self.cfg = cfg
        self.initial_phase = initial_phase
        self.reset()

    def reset(self) -> Observation:
        self.state = build_intersection(self.layout, self.seed, self.initial_phase)
        return self.observe()

    @property
    def phase(self) -> Phase:
        return self.state.current_phase

    @property
    def clock(self) -> float:
        return self.state.clock

    def observe(self) -> Observation:
        return observe(self.state, self.cfg)

    def step(self, action: Action):
        return env_step(self.state, action, self.schedule, self.cfg)

    def step_phases(self, phases: Sequence[Phase]):
        return step_phases(self.state, phases, self.schedule, self.cfg)
