"""Offline pretraining from fixed timetables, then online epsilon-greedy training."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .env import Action, Observation, RewardBreakdown, TrafficEnv
from .nn import OptimizerConfig
from .qnet import PhaseGateQNet, QNetConfig, epsilon_greedy, td_targets, train_batch
from .replay import Experience, ReplayPalace
from .simcore import ExitEvent, Phase

log = logging.getLogger(__name__)

# callback(observation_after_step, reward, exit_events)
StepObserver = Callable[[Observation, RewardBreakdown, Sequence[ExitEvent]], None]


@dataclass(frozen=True)
class Timetable:
    ns_green: float
    we_green: float
    initial_phase: Phase = Phase.WE

    def __post_init__(self):
        if not (self.ns_green > 0 and self.we_green > 0):
            raise ValueError("green durations must be positive")

    @property
    def cycle(self) -> float:
        return self.ns_green + self.we_green

    def green(self, phase: Phase) -> float:
        return self.ns_green if phase is Phase.NS else self.we_green

    def validate(self, dt: float) -> None:
        for g in (self.ns_green, self.we_green):
            if abs(g / dt - round(g / dt)) > 1e-9:
                raise ValueError(f"green time {g} s is not a multiple of the {dt} s step")


def timetable_phase(tt: Timetable, t: float) -> Phase:
    """Phase shown at time `t` (seconds from the timetable's start)."""
    offset = math.fmod(t, tt.cycle)
    first = tt.initial_phase
    return first if offset < tt.green(first) else first.next


def timetable_action(tt: Timetable, t: float, dt: float = 5.0) -> Action:
    """CHANGE exactly at the instants where the timetable switches phase."""
    if t < 0:
        raise ValueError("t must be non-negative")
    if t == 0:
        return Action.KEEP
    return Action.CHANGE if timetable_phase(tt, t) is not timetable_phase(tt, t - dt) else Action.KEEP


DEFAULT_TIMETABLES = (
    Timetable(10, 10), Timetable(20, 20), Timetable(30, 30), Timetable(20, 10), Timetable(10, 20),
)


@dataclass(frozen=True)
class TrainConfig:
    dt: float = 5.0
    update_interval: float = 300.0
    gamma: float = 0.8
    epsilon: float = 0.05
    batch_size: int = 300
    offline_hours: float = 2.0
    total_hours: float = 20.0
    offline_epochs: int = 10
    steps_per_update_batch: int = 10  # gradient steps on each sampled batch
    memory_capacity: int = 1000
    optimizer: OptimizerConfig = field(default_factory=OptimizerConfig)
    network: QNetConfig = field(default_factory=QNetConfig)
    timetables: tuple[Timetable, ...] = DEFAULT_TIMETABLES
    seed: int = 0

    def __post_init__(self):
        if abs(self.update_interval / self.dt - round(self.update_interval / self.dt)) > 1e-9:
            raise ValueError("update_interval must be a multiple of dt")
        if not 0 <= self.offline_hours < self.total_hours:
            raise ValueError("offline_hours must be below total_hours")

    @property
    def steps_per_update(self) -> int:
        return round(self.update_interval / self.dt)

    @property
    def offline_steps(self) -> int:
        return round(self.offline_hours * 3600 / self.dt)

    @property
    def online_steps(self) -> int:
        return round((self.total_hours - self.offline_hours) * 3600 / self.dt)


@dataclass
class StepRecord:
    step: int
    sim_time_s: float
    phase: str
    action: str
    reward: float
    loss: float | None = None
    stage: str = "online"


STEP_LOG_COLUMNS = ("step", "sim_time_s", "phase", "action", "reward", "loss_if_update")


def write_step_log(path: str | Path, records: Sequence[StepRecord]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(STEP_LOG_COLUMNS)
        for r in records:
            w.writerow([r.step, f"{r.sim_time_s:g}", r.phase, r.action, repr(float(r.reward)),
                        "" if r.loss is None else repr(float(r.loss))])


def _slice_lengths(total: int, parts: int) -> list[int]:
    base, extra = divmod(total, parts)
    return [base + (1 if i < extra else 0) for i in range(parts)]


def collect_offline(env: TrafficEnv, timetables: Sequence[Timetable], cfg: TrainConfig,
                    observer: StepObserver | None = None,
                    records: list[StepRecord] | None = None) -> list[Experience]:
    """Drive the environment with each timetable in turn for an equal share of
    the offline window and record every transition."""
    if not timetables:
        raise ValueError("at least one timetable is required")
    for tt in timetables:
        tt.validate(cfg.dt)
    experiences: list[Experience] = []
    obs = env.observe()
    for tt, n in zip(timetables, _slice_lengths(cfg.offline_steps, len(timetables))):
        # start each slice in whatever phase the signal currently shows
        tt = replace(tt, initial_phase=env.phase)
        for k in range(n):
            action = timetable_action(tt, k * cfg.dt, cfg.dt)
            phase = env.phase if action is Action.KEEP else env.phase.next
            next_obs, reward, exits = env.step(action)
            experiences.append(Experience(obs, action, reward.total, next_obs))
            if observer:
                observer(next_obs, reward, exits)
            if records is not None:
                records.append(StepRecord(len(records) + 1, env.clock, phase.name, action.name,
                                          reward.total, stage="offline"))
            obs = next_obs
    return experiences


def fit_batch(net: PhaseGateQNet, batch, cfg: TrainConfig) -> float:
    """Targets from the current network, then ``steps_per_update_batch`` gradient
    steps on them. Returns the loss before the first step."""
    targets = td_targets(batch, net, cfg.gamma)
    first = train_batch(net, batch, targets, cfg.optimizer)
    for _ in range(cfg.steps_per_update_batch - 1):
        train_batch(net, batch, targets, cfg.optimizer)
    return first


def pretrain_network(net: PhaseGateQNet, palace: ReplayPalace, n_samples: int, cfg: TrainConfig,
                     rng: np.random.Generator) -> list[float]:
    """`offline_epochs` passes of balanced batches over the palace; returns batch losses."""
    losses = []
    batches = cfg.offline_epochs * math.ceil(n_samples / cfg.batch_size)
    for _ in range(batches):
        batch = palace.sample_balanced(cfg.batch_size, rng)
        losses.append(fit_batch(net, batch, cfg))
    return losses


def offline_pretrain(env: TrafficEnv, timetables: Sequence[Timetable], cfg: TrainConfig,
                     net: PhaseGateQNet | None = None, palace: ReplayPalace | None = None,
                     rng: np.random.Generator | None = None,
                     observer: StepObserver | None = None,
                     records: list[StepRecord] | None = None
                     ) -> tuple[PhaseGateQNet, list[Experience]]:
    if not timetables:
        raise ValueError("at least one timetable is required")
    net = net or PhaseGateQNet.initialize(cfg.network, cfg.seed)
    palace = palace if palace is not None else ReplayPalace(cfg.memory_capacity)
    rng = rng or np.random.default_rng(cfg.seed)
    experiences = collect_offline(env, timetables, cfg, observer, records)
    for e in experiences:
        palace.store(e)
    losses = pretrain_network(net, palace, len(experiences), cfg, rng)
    if losses:
        log.info("pretrained on %d samples: loss %.4g -> %.4g", len(experiences), losses[0], losses[-1])
    return net, experiences


def online_train(env: TrafficEnv, net: PhaseGateQNet, palace: ReplayPalace, cfg: TrainConfig,
                 n_steps: int | None = None, rng: np.random.Generator | None = None,
                 observer: StepObserver | None = None,
                 records: list[StepRecord] | None = None,
                 checkpoint_dir: str | Path | None = None) -> tuple[PhaseGateQNet, list[StepRecord]]:
    """Epsilon-greedy control with one balanced-batch update every
    ``cfg.steps_per_update`` steps. Appends one record per step."""
    n_steps = cfg.online_steps if n_steps is None else n_steps
    rng = rng or np.random.default_rng(cfg.seed)
    records = records if records is not None else []
    k_update = cfg.steps_per_update
    obs = env.observe()
    for step in range(1, n_steps + 1):
        q = net.q_batch([obs])[0]
        action = epsilon_greedy(q, cfg.epsilon, rng)
        phase = env.phase if action is Action.KEEP else env.phase.next
        next_obs, reward, exits = env.step(action)
        palace.store(Experience(obs, action, reward.total, next_obs))
        if observer:
            observer(next_obs, reward, exits)
        loss = None
        if step % k_update == 0:
            assert len(palace) > 0
            batch = palace.sample_balanced(cfg.batch_size, rng)
            loss = fit_batch(net, batch, cfg)
        records.append(StepRecord(len(records) + 1, env.clock, phase.name, action.name,
                                  reward.total, loss))
        if checkpoint_dir is not None and env.clock % 3600 == 0:
            net.save(Path(checkpoint_dir) / f"hour_{int(env.clock // 3600):02d}.npz",
                     {"sim_time_s": env.clock})
        obs = next_obs
    return net, records
