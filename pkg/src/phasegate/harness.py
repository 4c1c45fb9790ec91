"""Experiment scenarios, fixed-plan baselines, hourly metrics and comparisons."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from .env import EnvConfig, Observation, RewardBreakdown, RewardWeights, TrafficEnv
from .nn import OptimizerConfig
from .qnet import PhaseGateQNet, QNetConfig
from .replay import ReplayPalace
from .simcore import ArrivalEntry, ArrivalSchedule, ExitEvent, Layout, Phase
from .training import (
    StepRecord,
    Timetable,
    TrainConfig,
    offline_pretrain,
    online_train,
    timetable_phase,
    write_step_log,
)

log = logging.getLogger(__name__)

# (directions, veh/h per approach, start h, end h)
SCENARIO_FLOWS: dict[str, tuple[tuple[str, float, float, float], ...]] = {
    "balanced": (("WE", 720, 0, 20), ("NS", 720, 0, 20)),
    "imbalanced": (("WE", 1440, 0, 20), ("NS", 240, 0, 20)),
    "switch": (("WE", 1440, 0, 10), ("NS", 1440, 10, 20)),
    "hangzhou": (("WE", 716, 0, 20), ("NS", 1132, 0, 20)),
}

# (WE green s, NS green s, cycle s)
FIXED_PLANS: dict[str, tuple[float, float, float]] = {
    "balanced": (18, 18, 36),
    "imbalanced": (33, 6, 39),
    "switch": (28, 28, 56),
    "hangzhou": (16, 25, 41),
}

METRICS_HEADER = ("hour", "wait_s", "travel_s", "queue", "reward")


class ScenarioError(ValueError):
    pass


@dataclass(frozen=True)
class ScenarioSpec:
    name: str
    flows: tuple[tuple[str, float, float, float], ...]
    total_hours: float = 20.0

    @property
    def arrivals(self) -> ArrivalSchedule:
        """Each listed direction pair gets the rate on both of its approaches."""
        entries = []
        for dirs, rate, start, end in self.flows:
            for d in dirs:
                entries.append(ArrivalEntry(d, float(rate), float(start), float(end)))
        return ArrivalSchedule(tuple(entries))

    def with_hours(self, total_hours: float) -> "ScenarioSpec":
        """Same flows compressed onto a shorter (or longer) horizon."""
        k = total_hours / self.total_hours
        flows = tuple((d, r, s * k, e * k) for d, r, s, e in self.flows)
        return ScenarioSpec(self.name, flows, total_hours)


@dataclass(frozen=True)
class FixedPlan:
    we_green: float
    ns_green: float
    cycle: float

    def __post_init__(self):
        if not (self.we_green > 0 and self.ns_green > 0):
            raise ValueError("green times must be positive")
        if self.cycle != self.we_green + self.ns_green:
            raise ValueError(f"cycle {self.cycle} != {self.we_green} + {self.ns_green}")

    def timetable(self, initial_phase: Phase = Phase.WE) -> Timetable:
        return Timetable(self.ns_green, self.we_green, initial_phase)


def _validate_flows(flows) -> tuple[tuple[str, float, float, float], ...]:
    out = []
    for item in flows:
        try:
            dirs, rate, start, end = item["directions"], item["rate"], item["start"], item["end"]
        except (TypeError, KeyError) as exc:
            raise ScenarioError(f"flow entry {item!r} needs directions, rate, start, end") from exc
        if not dirs or any(d not in "NSEW" for d in dirs):
            raise ScenarioError(f"bad directions {dirs!r}")
        if not (isinstance(rate, (int, float)) and rate >= 0):
            raise ScenarioError(f"bad rate {rate!r}")
        if not start < end:
            raise ScenarioError(f"bad window [{start}, {end})")
        out.append((str(dirs), float(rate), float(start), float(end)))
    return tuple(out)


def load_scenario(name_or_path: str | Path) -> ScenarioSpec:
    """Built-in scenario by name, or a JSON file with ``name``, ``total_hours``
    and a ``flows`` list of {directions, rate, start, end}."""
    key = str(name_or_path)
    if key in SCENARIO_FLOWS:
        return ScenarioSpec(key, SCENARIO_FLOWS[key])
    path = Path(key)
    if not path.is_file():
        raise ScenarioError(f"unknown scenario {key!r}; built-ins are {sorted(SCENARIO_FLOWS)}")
    try:
        data = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path}: {exc}") from exc
    if not isinstance(data, dict) or "flows" not in data:
        raise ScenarioError(f"{path}: expected an object with a 'flows' list")
    hours = float(data.get("total_hours", 20.0))
    if not hours > 0:
        raise ScenarioError(f"{path}: total_hours must be positive")
    spec = ScenarioSpec(str(data.get("name", path.stem)), _validate_flows(data["flows"]), hours)
    spec.arrivals  # noqa: B018 - run schedule validation
    return spec


def fixed_plan_for(name: str) -> FixedPlan:
    try:
        return FixedPlan(*FIXED_PLANS[name])
    except KeyError:
        raise ScenarioError(f"no fixed plan for {name!r}") from None


# -- configuration ----------------------------------------------------------

@dataclass(frozen=True)
class SimConfig:
    lane_length: float = 300.0
    speed_limit: float = 14.0
    headway: float = 2.0

    @property
    def layout(self) -> Layout:
        return Layout.uniform(self.lane_length, self.speed_limit)


@dataclass(frozen=True)
class ExperimentConfig:
    sim: SimConfig = field(default_factory=SimConfig)
    env: EnvConfig = field(default_factory=EnvConfig)
    training: TrainConfig = field(default_factory=TrainConfig)

    def with_hours(self, offline_hours: float, total_hours: float) -> "ExperimentConfig":
        return replace(self, training=replace(self.training, offline_hours=offline_hours,
                                              total_hours=total_hours))


def _build(cls, data: dict, nested: dict | None = None):
    kwargs = {}
    nested = nested or {}
    names = {f.name for f in cls.__dataclass_fields__.values()}
    for k, v in data.items():
        if k not in names:
            raise ValueError(f"unknown {cls.__name__} key {k!r}")
        if k in nested:
            v = nested[k](v)
        elif isinstance(v, list):
            v = tuple(v)
        kwargs[k] = v
    return cls(**kwargs)


def config_from_dict(data: dict) -> ExperimentConfig:
    """Sections: ``simulator``, ``env`` (incl. ``reward_weights`` list),
    ``training`` (incl. ``optimizer``, ``timetables``) and ``network``."""
    known = {"simulator", "env", "training", "network", "scenario"}
    unknown = set(data) - known
    if unknown:
        raise ValueError(f"unknown config sections {sorted(unknown)}")
    sim = _build(SimConfig, data.get("simulator", {}))
    env_data = dict(data.get("env", {}))
    weights = env_data.pop("reward_weights", None)
    env = _build(EnvConfig, env_data)
    if weights is not None:
        env = replace(env, weights=RewardWeights.from_sequence(weights))
    network = _build(QNetConfig, data.get("network", {}))
    training = _build(TrainConfig, data.get("training", {}), {
        "optimizer": lambda d: _build(OptimizerConfig, d),
        "timetables": lambda items: tuple(
            Timetable(t["ns_green"], t["we_green"], Phase[t.get("initial_phase", "WE")])
            for t in items),
    })
    training = replace(training, network=network)
    return ExperimentConfig(sim, env, training)


def load_config(path: str | Path) -> tuple[ExperimentConfig, dict]:
    data = json.loads(Path(path).read_text())
    return config_from_dict(data), data


# -- metrics ----------------------------------------------------------------

@dataclass
class HourRow:
    hour: int
    wait_s: float
    travel_s: float
    queue: float
    reward: float
    steps: int = 0
    vehicle_steps: float = 0.0
    completed: int = 0
    stage: str = "online"


@dataclass
class MetricsReport:
    scenario: str
    kind: str  # "rl" | "fixed"
    seed: int
    total_hours: float
    offline_hours: float
    rows: list[HourRow]
    stragglers: int = 0

    def headline_rows(self) -> list[HourRow]:
        return [r for r in self.rows if r.hour >= self.offline_hours]

    def headline(self, hours: Sequence[int] | None = None) -> dict[str, float]:
        """Run-level means over `hours` (default: online hours), weighted by
        vehicle-steps for wait, completed trips for travel, steps otherwise."""
        rows = self.headline_rows() if hours is None else [r for r in self.rows if r.hour in set(hours)]
        vs = sum(r.vehicle_steps for r in rows)
        done = sum(r.completed for r in rows)
        steps = sum(r.steps for r in rows)
        return {
            "wait_s": sum(r.wait_s * r.vehicle_steps for r in rows) / vs if vs else 0.0,
            "travel_s": sum(r.travel_s * r.completed for r in rows if r.completed) / done if done else math.nan,
            "queue": sum(r.queue * r.steps for r in rows) / steps if steps else 0.0,
            "reward": sum(r.reward * r.steps for r in rows) / steps if steps else 0.0,
        }


class MetricsAccumulator:
    """Collects per-step readings and folds them into hourly rows.

    avg wait = total wait / total vehicle count over all step snapshots,
    avg travel = mean (exit - entry) of trips completed in the hour,
    avg queue = mean over lanes and steps of the stopped-vehicle count.
    """

    def __init__(self, dt: float, offline_hours: float = 0.0):
        self.dt = dt
        self.offline_hours = offline_hours
        self._acc: dict[int, dict[str, float]] = {}

    def record(self, t_end: float, obs: Observation, reward: RewardBreakdown,
               exits: Sequence[ExitEvent]) -> None:
        hour = int((t_end - self.dt) // 3600)
        a = self._acc.setdefault(hour, dict(steps=0, wait=0.0, vehicles=0.0, queue=0.0,
                                            reward=0.0, travel=0.0, completed=0))
        a["steps"] += 1
        a["wait"] += math.fsum(obs.w)
        a["vehicles"] += math.fsum(obs.v)
        a["queue"] += float(np.mean(obs.q))
        a["reward"] += reward.total
        a["travel"] += math.fsum(e.travel_time for e in exits)
        a["completed"] += len(exits)

    def rows(self) -> list[HourRow]:
        out = []
        for hour in sorted(self._acc):
            a = self._acc[hour]
            out.append(HourRow(
                hour=hour,
                wait_s=a["wait"] / a["vehicles"] if a["vehicles"] else 0.0,
                travel_s=a["travel"] / a["completed"] if a["completed"] else math.nan,
                queue=a["queue"] / a["steps"],
                reward=a["reward"] / a["steps"],
                steps=int(a["steps"]), vehicle_steps=a["vehicles"], completed=int(a["completed"]),
                stage="offline" if hour < self.offline_hours else "online"))
        return out


def _make_env(scenario: ScenarioSpec, cfg: ExperimentConfig, seed: int) -> TrafficEnv:
    env = TrafficEnv(scenario.arrivals, cfg.sim.layout, seed=seed, cfg=cfg.env)
    env.state.headway = cfg.sim.headway
    return env


def run_fixed_baseline(scenario: ScenarioSpec, plan: FixedPlan, seed: int = 0,
                       cfg: ExperimentConfig = ExperimentConfig(),
                       check_conservation: bool = False) -> MetricsReport:
    """Run the whole horizon under the fixed plan, switching on simulator sub-steps."""
    env = _make_env(scenario, cfg, seed)
    tt = plan.timetable(env.phase)
    acc = MetricsAccumulator(cfg.env.dt, cfg.training.offline_hours)
    n_steps = round(scenario.total_hours * 3600 / cfg.env.dt)
    sub = cfg.env.substeps
    for _ in range(n_steps):
        t0 = env.clock
        phases = [timetable_phase(tt, t0 + j * cfg.env.sim_dt) for j in range(sub)]
        obs, reward, exits = env.step_phases(phases)
        acc.record(env.clock, obs, reward, exits)
        if check_conservation and not env.state.conserved():
            raise AssertionError(f"conservation violated at t={env.clock}")
    return MetricsReport(scenario.name, "fixed", seed, scenario.total_hours,
                         cfg.training.offline_hours, acc.rows(),
                         stragglers=env.state.vehicles_inside + env.state.deferred)


@dataclass
class RLRun:
    report: MetricsReport
    records: list[StepRecord]
    net: PhaseGateQNet
    palace: ReplayPalace


def run_rl(scenario: ScenarioSpec, cfg: ExperimentConfig = ExperimentConfig(), seed: int = 0,
           out_dir: str | Path | None = None) -> RLRun:
    """Offline pretraining followed by online training over the scenario horizon."""
    tcfg = replace(cfg.training, total_hours=scenario.total_hours, seed=seed)
    env = _make_env(scenario, cfg, seed)
    net_seed, agent_seed = np.random.SeedSequence(seed).spawn(2)
    net = PhaseGateQNet.initialize(tcfg.network, int(net_seed.generate_state(1)[0]))
    rng = np.random.default_rng(agent_seed)
    palace = ReplayPalace(tcfg.memory_capacity)
    acc = MetricsAccumulator(cfg.env.dt, tcfg.offline_hours)
    records: list[StepRecord] = []

    def observer(obs, reward, exits):
        acc.record(env.clock, obs, reward, exits)

    ckpt = None
    if out_dir is not None:
        ckpt = Path(out_dir) / "checkpoints"
        ckpt.mkdir(parents=True, exist_ok=True)
    net, _ = offline_pretrain(env, tcfg.timetables, tcfg, net=net, palace=palace, rng=rng,
                              observer=observer, records=records)
    if ckpt is not None:
        net.save(ckpt / "pretrained.npz", {"sim_time_s": env.clock})
    net, records = online_train(env, net, palace, tcfg, rng=rng, observer=observer,
                                records=records, checkpoint_dir=ckpt)
    report = MetricsReport(scenario.name, "rl", seed, scenario.total_hours, tcfg.offline_hours,
                           acc.rows(), stragglers=env.state.vehicles_inside + env.state.deferred)
    run = RLRun(report, records, net, palace)
    if out_dir is not None:
        write_run(out_dir, report, records)
    return run


# -- learning-curve checks ------------------------------------------------------

def online_rewards(records: Sequence[StepRecord]) -> np.ndarray:
    return np.array([r.reward for r in records if r.stage == "online"])


def reward_trend(rewards: Sequence[float], fraction: float = 0.1) -> tuple[float, float]:
    """Mean reward over the first and over the last `fraction` of the steps."""
    r = np.asarray(rewards, dtype=float)
    n = int(len(r) * fraction)
    if n < 1:
        raise ValueError("too few steps for the requested fraction")
    return float(r[:n].mean()), float(r[-n:].mean())


def rolling_mean(rewards: Sequence[float], window: int) -> np.ndarray:
    """out[i] = mean of rewards[i : i + window]."""
    return np.convolve(np.asarray(rewards, dtype=float), np.ones(window) / window, "valid")


@dataclass(frozen=True)
class Dip:
    start_h: float  # end of the first window that dips
    level: float  # rolling mean there
    before: float  # rolling mean of the hour before
    recovered_h: float | None


def find_dip(rewards: Sequence[float], dt: float, t0_h: float = 0.0, search: tuple[float, float] = (0, math.inf),
             factor: float = 2.0, recover_within_h: float = 2.0, tolerance: float = 0.25) -> Dip | None:
    """First point in `search` (hours, window end times) where the 1 h rolling mean
    of a negative reward is at least `factor` times worse than the hour before.

    Recovery is the first later window, within `recover_within_h`, whose mean is
    back within `tolerance` of that preceding level. `rewards[0]` covers the step
    ending at ``t0_h + dt``.
    """
    w = round(3600 / dt)
    roll = rolling_mean(rewards, w)
    ends = t0_h + (np.arange(len(roll)) + w) * dt / 3600
    for i in range(w, len(roll)):
        if not search[0] <= ends[i] <= search[1]:
            continue
        before = roll[i - w]
        if before < 0 and roll[i] <= factor * before:
            limit = ends[i] + recover_within_h
            ok = np.flatnonzero((ends > ends[i]) & (ends <= limit)
                                & (roll >= (1 + tolerance) * before))
            return Dip(float(ends[i]), float(roll[i]), float(before),
                       float(ends[ok[0]]) if ok.size else None)
    return None


# -- comparison ---------------------------------------------------------------

@dataclass(frozen=True)
class ComparisonRow:
    metric: str
    fixed: float
    rl: float
    percent_change: float


def percent_change(fixed: float, rl: float) -> float:
    """(rl - fixed) / |fixed| * 100; the magnitude keeps reward gains positive."""
    if fixed == 0:
        return 0.0 if rl == 0 else math.copysign(math.inf, rl)
    return (rl - fixed) / abs(fixed) * 100.0


def compare(rl: MetricsReport, fixed: MetricsReport) -> list[ComparisonRow]:
    """Percent changes of the RL headline metrics against the fixed plan over
    the same (online) hours."""
    if rl.total_hours != fixed.total_hours or rl.scenario != fixed.scenario:
        raise ValueError(f"cannot compare {rl.scenario}/{rl.total_hours}h "
                         f"with {fixed.scenario}/{fixed.total_hours}h")
    hours = [r.hour for r in rl.headline_rows()]
    a, b = rl.headline(hours), fixed.headline(hours)
    return [ComparisonRow(m, b[m], a[m], percent_change(b[m], a[m])) for m in METRICS_HEADER[1:]]


def comparison_csv(rows: Sequence[ComparisonRow]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["metric", "fixed", "rl", "percent_change"])
    for r in rows:
        w.writerow([r.metric, repr(r.fixed), repr(r.rl), f"{r.percent_change:.1f}"])
    return buf.getvalue()


def format_comparison(rows: Sequence[ComparisonRow]) -> str:
    lines = [f"{'metric':<10}{'fixed':>12}{'rl':>12}{'change':>10}"]
    for r in rows:
        lines.append(f"{r.metric:<10}{r.fixed:>12.3f}{r.rl:>12.3f}{r.percent_change:>+9.1f}%")
    return "\n".join(lines)


# -- run directories ----------------------------------------------------------

def metrics_csv(report: MetricsReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(METRICS_HEADER)
    for r in report.rows:
        w.writerow([r.hour, repr(r.wait_s), repr(r.travel_s), repr(r.queue), repr(r.reward)])
    return buf.getvalue()


def summary_text(report: MetricsReport) -> str:
    h = report.headline()
    lines = [
        f"scenario: {report.scenario}",
        f"controller: {report.kind}",
        f"seed: {report.seed}",
        f"horizon: {report.total_hours:g} h (headline excludes the first {report.offline_hours:g} h)",
        f"avg wait (s): {h['wait_s']:.3f}",
        f"avg travel time (s): {h['travel_s']:.3f}",
        f"avg queue length: {h['queue']:.4f}",
        f"avg reward: {h['reward']:.3f}",
        f"completed trips: {sum(r.completed for r in report.headline_rows())}",
        f"vehicles unfinished at horizon: {report.stragglers}",
    ]
    return "\n".join(lines) + "\n"


def write_run(out_dir: str | Path, report: MetricsReport,
              records: Sequence[StepRecord] | None = None) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_text(metrics_csv(report))
    (out / "summary.txt").write_text(summary_text(report))
    meta = {k: v for k, v in asdict(report).items() if k != "rows"}
    meta["rows"] = [asdict(r) for r in report.rows]
    (out / "run.json").write_text(json.dumps(meta, indent=1, allow_nan=True))
    if records is not None:
        write_step_log(out / "steps.csv", records)
    return out


def read_run(run_dir: str | Path) -> MetricsReport:
    meta = json.loads((Path(run_dir) / "run.json").read_text())
    rows = [HourRow(**r) for r in meta.pop("rows")]
    return MetricsReport(rows=rows, **meta)
