"""Phase-gated deep Q-network.

The occupancy grid goes through a small CNN; its latent vector is
concatenated with the queue/count/wait vectors and both phase one-hots, fed
through a shared dense stack, and then through exactly one of two
phase-specific branches chosen by the current phase. Each branch ends in two
outputs, (Q_keep, Q_change).
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field
from pathlib import Path
from typing import TYPE_CHECKING, Sequence

import numpy as np

from . import nn
from .env import Action, Observation
from .simcore import N_LANES, Phase

if TYPE_CHECKING:
    from .replay import Experience


@dataclass(frozen=True)
class QNetConfig:
    grid_shape: tuple[int, int] = (N_LANES, 30)
    conv_channels: tuple[int, ...] = (8, 16)
    kernel: int = 3
    stride: int = 2
    shared_sizes: tuple[int, ...] = (64,)
    branch_sizes: tuple[int, ...] = (32,)
    # fixed input scaling for (queue, count, wait); keeps raw seconds from swamping the stack
    input_scale: tuple[float, float, float] = (0.1, 0.1, 0.01)
    # Q = value_scale * head output, so heads work in O(1) units
    value_scale: float = 100.0

    @property
    def vector_dim(self) -> int:
        return 3 * N_LANES + 2 * len(Phase)

    def cnn_specs(self) -> list[nn.LayerSpec]:
        specs = []
        c_in = 1
        for c_out in self.conv_channels:
            specs += [nn.conv2d(c_in, c_out, self.kernel, self.kernel, self.stride), nn.relu()]
            c_in = c_out
        return specs + [nn.flatten()]

    @property
    def latent_dim(self) -> int:
        return nn.output_shape(self.cnn_specs(), (1, *self.grid_shape))[0]

    @property
    def feature_dim(self) -> int:
        return self.vector_dim + self.latent_dim

    def shared_specs(self) -> list[nn.LayerSpec]:
        specs, n = [], self.feature_dim
        for m in self.shared_sizes:
            specs += [nn.dense(n, m), nn.relu()]
            n = m
        return specs

    def branch_specs(self) -> list[nn.LayerSpec]:
        specs = []
        n = self.shared_sizes[-1] if self.shared_sizes else self.feature_dim
        for m in self.branch_sizes:
            specs += [nn.dense(n, m), nn.relu()]
            n = m
        return specs + [nn.dense(n, len(Action))]


@dataclass
class PhaseGateQNet:
    config: QNetConfig
    cnn: list
    shared: list
    branches: dict[Phase, list] = field(default_factory=dict)
    _adam: nn.Adam | None = field(default=None, repr=False, compare=False)

    @classmethod
    def initialize(cls, config: QNetConfig = QNetConfig(), seed: int = 0) -> "PhaseGateQNet":
        rng = np.random.default_rng(seed)
        cnn = nn.init_params(config.cnn_specs(), rng)
        shared = nn.init_params(config.shared_specs(), rng)
        branches = {ph: nn.init_params(config.branch_specs(), rng) for ph in Phase}
        return cls(config, cnn, shared, branches)

    def copy(self) -> "PhaseGateQNet":
        return copy.deepcopy(self)

    # -- evaluation ---------------------------------------------------------
    def _inputs(self, obs: Sequence[Observation]) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        cfg = self.config
        scale = np.concatenate([np.full(N_LANES, s) for s in cfg.input_scale]
                               + [np.ones(2 * len(Phase))])
        vec = np.stack([o.vector() for o in obs]) * scale
        grids = np.stack([o.grid for o in obs])[:, None, :, :]
        if vec.shape[1] != cfg.vector_dim or grids.shape[2:] != cfg.grid_shape:
            raise ValueError(f"observation dims {vec.shape[1]}/{grids.shape[2:]} do not match "
                             f"config {cfg.vector_dim}/{cfg.grid_shape}")
        phases = np.array([int(o.phase) for o in obs])
        return vec, grids, phases

    def _forward(self, obs: Sequence[Observation]):
        cfg = self.config
        vec, grids, phases = self._inputs(obs)
        cnn_acts = nn.forward(self.cnn, cfg.cnn_specs(), grids)
        feats = np.concatenate([vec, cnn_acts[-1]], axis=1)
        shared_acts = nn.forward(self.shared, cfg.shared_specs(), feats)
        hidden = shared_acts[-1]
        q = np.zeros((len(obs), len(Action)))
        branch_acts = {}
        for ph in Phase:
            idx = np.flatnonzero(phases == int(ph))
            if idx.size == 0:
                continue
            acts = nn.forward(self.branches[ph], cfg.branch_specs(), hidden[idx])
            q[idx] = cfg.value_scale * acts[-1]
            branch_acts[ph] = (idx, acts)
        return q, (cnn_acts, shared_acts, branch_acts)

    def q_batch(self, obs: Sequence[Observation]) -> np.ndarray:
        return self._forward(obs)[0]

    def encode(self, obs: Observation) -> np.ndarray:
        """Latent vector of the occupancy grid (also stored on ``obs.latent``)."""
        grid = np.asarray(obs.grid, dtype=float)[None, None]
        obs.latent = nn.forward(self.cnn, self.config.cnn_specs(), grid)[-1][0]
        return obs.latent

    # -- training -----------------------------------------------------------
    def loss_and_grads(self, obs: Sequence[Observation], actions: Sequence[int],
                       targets: np.ndarray) -> tuple[float, dict]:
        """Mean squared TD error on the taken actions and its gradients.

        Gradients come back as {"cnn", "shared", Phase.NS, Phase.WE}; a branch
        that no sample selects gets exact zeros.
        """
        cfg = self.config
        q, (cnn_acts, shared_acts, branch_acts) = self._forward(obs)
        n = len(obs)
        rows = np.arange(n)
        actions = np.asarray(actions, dtype=int)
        diff = q[rows, actions] - np.asarray(targets, dtype=float)
        loss = float(np.mean(diff ** 2))
        dq = np.zeros_like(q)
        dq[rows, actions] = 2.0 * diff / n

        grads: dict = {}
        dhidden = np.zeros_like(shared_acts[-1])
        for ph in Phase:
            if ph not in branch_acts:
                grads[ph] = [None if p is None else {k: np.zeros_like(v) for k, v in p.items()}
                             for p in self.branches[ph]]
                continue
            idx, acts = branch_acts[ph]
            grads[ph], dh = nn.backward(self.branches[ph], cfg.branch_specs(), acts,
                                        cfg.value_scale * dq[idx])
            dhidden[idx] = dh
        grads["shared"], dfeat = nn.backward(self.shared, cfg.shared_specs(), shared_acts, dhidden)
        dlatent = dfeat[:, cfg.vector_dim:]
        grads["cnn"], _ = nn.backward(self.cnn, cfg.cnn_specs(), cnn_acts, dlatent)
        return loss, grads

    def _groups(self):
        return [("cnn", self.cnn), ("shared", self.shared)] + [(ph, self.branches[ph]) for ph in Phase]

    def apply_gradients(self, grads: dict, opt: nn.OptimizerConfig) -> None:
        keys = [k for k, _ in self._groups()]
        flat_params = [p for _, ps in self._groups() for p in ps]
        flat_grads = [g for k in keys for g in grads[k]]
        if opt.method == "adam":
            if self._adam is None or self._adam.cfg != opt:
                self._adam = nn.Adam(opt)
            updated = self._adam.step(flat_params, flat_grads)
        else:
            updated = nn.apply_update(flat_params, flat_grads, opt)
        pos = 0
        for k, ps in self._groups():
            new = updated[pos:pos + len(ps)]
            pos += len(ps)
            if k == "cnn":
                self.cnn = new
            elif k == "shared":
                self.shared = new
            else:
                self.branches[k] = new

    # -- persistence --------------------------------------------------------
    def named_params(self) -> dict[str, np.ndarray]:
        out = {}
        for key, ps in self._groups():
            prefix = f"branch_{key.name}" if isinstance(key, Phase) else key
            for i, p in enumerate(ps):
                if p is not None:
                    for k, v in p.items():
                        out[f"{prefix}.{i}.{k}"] = v
        return out

    def save(self, path: str | Path, meta: dict | None = None) -> None:
        cfg = self.config
        info = {"config": {
            "grid_shape": list(cfg.grid_shape), "conv_channels": list(cfg.conv_channels),
            "kernel": cfg.kernel, "stride": cfg.stride, "shared_sizes": list(cfg.shared_sizes),
            "branch_sizes": list(cfg.branch_sizes), "input_scale": list(cfg.input_scale),
            "value_scale": cfg.value_scale}}
        info.update(meta or {})
        nn.save_params(path, self.named_params(), info)

    @classmethod
    def load(cls, path: str | Path) -> "PhaseGateQNet":
        named, meta = nn.load_params(path)
        c = meta["config"]
        config = QNetConfig(tuple(c["grid_shape"]), tuple(c["conv_channels"]), c["kernel"],
                            c["stride"], tuple(c["shared_sizes"]), tuple(c["branch_sizes"]),
                            tuple(c["input_scale"]), c["value_scale"])
        net = cls.initialize(config, seed=0)
        for key, ps in net._groups():
            prefix = f"branch_{key.name}" if isinstance(key, Phase) else key
            for i, p in enumerate(ps):
                if p is not None:
                    for k in p:
                        arr = named[f"{prefix}.{i}.{k}"]
                        if arr.shape != p[k].shape:
                            raise ValueError(f"{prefix}.{i}.{k}: shape {arr.shape} != {p[k].shape}")
                        p[k] = arr.copy()
        return net


def q_values(net: PhaseGateQNet, obs: Observation) -> tuple[float, float]:
    q = net.q_batch([obs])[0]
    return float(q[Action.KEEP]), float(q[Action.CHANGE])


def greedy_action(q: Sequence[float]) -> Action:
    """Argmax over (Q_keep, Q_change); ties go to KEEP."""
    return Action.CHANGE if q[Action.CHANGE] > q[Action.KEEP] else Action.KEEP


def epsilon_greedy(q: Sequence[float], epsilon: float, rng: np.random.Generator) -> Action:
    if not 0 <= epsilon <= 1:
        raise ValueError("epsilon must lie in [0, 1]")
    if rng.random() < epsilon:
        return Action(int(rng.integers(len(Action))))
    return greedy_action(q)


def td_targets(batch: Sequence["Experience"], net: PhaseGateQNet, gamma: float) -> np.ndarray:
    """y = R + gamma * max_a Q(s', a) under the current parameters."""
    if not 0 <= gamma <= 1:
        raise ValueError("gamma must lie in [0, 1]")
    rewards = np.array([e.reward for e in batch], dtype=float)
    if gamma == 0:
        return rewards
    q_next = net.q_batch([e.next_obs for e in batch])
    return rewards + gamma * q_next.max(axis=1)


def train_batch(net: PhaseGateQNet, batch: Sequence["Experience"], targets: np.ndarray,
                opt: nn.OptimizerConfig) -> float:
    """One gradient step on the batch; returns the loss before the step."""
    if len(batch) == 0:
        raise ValueError("cannot train on an empty batch")
    if len(targets) != len(batch):
        raise ValueError("one target per experience required")
    loss, grads = net.loss_and_grads([e.obs for e in batch], [int(e.action) for e in batch], targets)
    net.apply_gradients(grads, opt)
    return loss
