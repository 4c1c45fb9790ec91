from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, strategies as st

from phasegate.env import Action, TrafficEnv
from phasegate.harness import load_scenario
from phasegate.qnet import PhaseGateQNet, QNetConfig, td_targets
from phasegate.replay import CELL_KEYS, ReplayPalace
from phasegate.simcore import Phase
from phasegate.training import (
    DEFAULT_TIMETABLES,
    STEP_LOG_COLUMNS,
    Timetable,
    TrainConfig,
    collect_offline,
    offline_pretrain,
    online_train,
    pretrain_network,
    timetable_action,
    timetable_phase,
    write_step_log,
)

SMALL = QNetConfig(conv_channels=(2,), shared_sizes=(16,), branch_sizes=(8,))
FAST = TrainConfig(offline_hours=0.2, total_hours=0.5, batch_size=40, offline_epochs=2,
                   steps_per_update_batch=2, network=SMALL)


def env_for(name="balanced", seed=0):
    return TrafficEnv(load_scenario(name).arrivals, seed=seed)


def test_worked_timetable_example():
    tt = Timetable(ns_green=20, we_green=10, initial_phase=Phase.WE)
    changes = [t for t in range(0, 100, 5) if timetable_action(tt, t) is Action.CHANGE]
    assert changes == [10, 30, 40, 60, 70, 90]


def test_timetable_start_is_keep():
    assert all(timetable_action(tt, 0) is Action.KEEP for tt in DEFAULT_TIMETABLES)


def test_timetable_phase():
    tt = Timetable(20, 10, Phase.WE)
    assert [timetable_phase(tt, t).name for t in (0, 9, 10, 29, 30)] == ["WE", "WE", "NS", "NS", "WE"]


@given(st.sampled_from([5, 10, 15, 20, 30, 45]), st.sampled_from([5, 10, 15, 20, 30, 45]),
       st.sampled_from(list(Phase)))
def test_timetable_replay_matches_phase(ns, we, first):
    tt = Timetable(ns, we, first)
    phase = first
    for k in range(1, 200):
        if timetable_action(tt, 5 * k) is Action.CHANGE:
            phase = phase.next
        assert phase is timetable_phase(tt, 5 * k)


def test_timetable_rejects_misaligned_greens():
    with pytest.raises(ValueError):
        Timetable(12, 10).validate(5.0)
    with pytest.raises(ValueError):
        Timetable(0, 10)


def test_default_step_counts():
    cfg = TrainConfig()
    assert cfg.offline_steps == 1440
    assert cfg.online_steps == 12960
    assert cfg.steps_per_update == 60
    assert cfg.online_steps // cfg.steps_per_update == 216


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(update_interval=7)
    with pytest.raises(ValueError):
        TrainConfig(offline_hours=20, total_hours=20)


def test_offline_collects_one_experience_per_step():
    cfg = replace(FAST, offline_hours=2.0, total_hours=3.0)
    exps = collect_offline(env_for(), DEFAULT_TIMETABLES, cfg)
    assert len(exps) == 1440
    cells = {(e.phase, e.action) for e in exps}
    assert cells == set(CELL_KEYS)
    changes = sum(e.action is Action.CHANGE for e in exps)
    assert changes == sum(1 for e in exps if e.next_obs.phase is not e.obs.phase)


def test_offline_empty_list():
    with pytest.raises(ValueError):
        offline_pretrain(env_for(), [], FAST)


def _td_loss(net, exps, gamma):
    y = td_targets(exps, net, gamma)
    q = net.q_batch([e.obs for e in exps])
    pred = q[np.arange(len(exps)), [int(e.action) for e in exps]]
    return float(np.mean((pred - y) ** 2))


def test_pretraining_improves_held_out_loss():
    cfg = replace(FAST, offline_hours=0.5, total_hours=1.0, offline_epochs=5)
    exps = collect_offline(env_for(), DEFAULT_TIMETABLES, cfg)
    rng = np.random.default_rng(0)
    idx = rng.permutation(len(exps))
    held = [exps[i] for i in idx[: len(exps) // 10]]
    train = [exps[i] for i in idx[len(exps) // 10:]]
    fresh = PhaseGateQNet.initialize(SMALL, seed=1)
    net = fresh.copy()
    palace = ReplayPalace()
    for e in train:
        palace.store(e)
    pretrain_network(net, palace, len(train), cfg, rng)
    assert _td_loss(net, held, cfg.gamma) < _td_loss(fresh, held, cfg.gamma)


def test_update_cadence_and_completeness():
    env = env_for()
    net = PhaseGateQNet.initialize(SMALL, seed=0)
    palace = ReplayPalace()
    net, records = online_train(env, net, palace, FAST, n_steps=250, rng=np.random.default_rng(0))
    assert len(records) == 250 and len(palace) == 250
    assert [r.step for r in records if r.loss is not None] == [60, 120, 180, 240]


class KeepNet:
    def q_batch(self, obs):
        return np.tile([1.0, 0.0], (len(obs), 1))


def test_greedy_keep_never_changes():
    env = env_for()
    cfg = replace(FAST, epsilon=0.0, update_interval=10_000)
    _, records = online_train(env, KeepNet(), ReplayPalace(), cfg, n_steps=100,
                              rng=np.random.default_rng(0))
    assert all(r.action == "KEEP" and r.phase == "WE" for r in records)


def _run(seed):
    env = env_for(seed=seed)
    rng = np.random.default_rng(seed)
    net, exps = offline_pretrain(env, DEFAULT_TIMETABLES, FAST, rng=rng)
    palace = ReplayPalace()
    for e in exps:
        palace.store(e)
    _, records = online_train(env, net, palace, FAST, n_steps=130, rng=rng)
    return [(r.action, r.reward, r.loss) for r in records]


def test_training_is_deterministic():
    assert _run(3) == _run(3)


def test_checkpoints_every_hour(tmp_path):
    env = env_for()
    net = PhaseGateQNet.initialize(SMALL, seed=0)
    cfg = replace(FAST, update_interval=3600)
    online_train(env, net, ReplayPalace(), cfg, n_steps=720, rng=np.random.default_rng(0),
                 checkpoint_dir=tmp_path)
    assert [p.name for p in tmp_path.iterdir()] == ["hour_01.npz"]
    assert PhaseGateQNet.load(tmp_path / "hour_01.npz").config == net.config


def test_step_log(tmp_path):
    env = env_for()
    net = PhaseGateQNet.initialize(SMALL, seed=0)
    _, records = online_train(env, net, ReplayPalace(), FAST, n_steps=61,
                              rng=np.random.default_rng(0))
    write_step_log(tmp_path / "steps.csv", records)
    lines = (tmp_path / "steps.csv").read_text().splitlines()
    assert lines[0] == ",".join(STEP_LOG_COLUMNS)
    assert len(lines) == 62
    assert lines[60].split(",")[-1] != "" and lines[59].split(",")[-1] == ""
