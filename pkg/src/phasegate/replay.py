"""Replay memory partitioned by (phase, action), sampled with equal quotas."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass

import numpy as np

from .env import Action, Observation
from .simcore import Phase

CELL_KEYS: tuple[tuple[Phase, Action], ...] = tuple((ph, a) for ph in Phase for a in Action)


class EmptyMemoryError(RuntimeError):
    pass


@dataclass(frozen=True)
class Experience:
    obs: Observation
    action: Action
    reward: float
    next_obs: Observation

    @property
    def phase(self) -> Phase:
        return self.obs.phase


class ReplayPalace:
    def __init__(self, capacity: int = 1000):
        if capacity < 1:
            raise ValueError("capacity must be at least 1")
        self.capacity = capacity
        self.cells: dict[tuple[Phase, Action], deque[Experience]] = {
            key: deque(maxlen=capacity) for key in CELL_KEYS}
        self.evictions = dict.fromkeys(CELL_KEYS, 0)

    def __len__(self) -> int:
        return sum(len(c) for c in self.cells.values())

    def store(self, e: Experience) -> None:
        key = (Phase(e.phase), Action(e.action))
        cell = self.cells[key]
        if len(cell) == self.capacity:
            self.evictions[key] += 1
        cell.append(e)

    def quotas(self, batch_size: int) -> dict[tuple[Phase, Action], int]:
        """Equal split over the non-empty cells; remainder goes to the earliest keys."""
        if batch_size < 1:
            raise ValueError("batch_size must be positive")
        live = [k for k in CELL_KEYS if self.cells[k]]
        if not live:
            raise EmptyMemoryError("all replay cells are empty")
        base, extra = divmod(batch_size, len(live))
        return {k: base + (1 if i < extra else 0) for i, k in enumerate(live)}

    def sample_balanced(self, batch_size: int, rng: np.random.Generator) -> list[Experience]:
        batch: list[Experience] = []
        for key, n in self.quotas(batch_size).items():
            cell = self.cells[key]
            batch.extend(cell[i] for i in rng.integers(0, len(cell), size=n))
        return batch

    def stats(self) -> dict[str, dict[str, int]]:
        return {f"{ph.name}/{a.name}": {"count": len(self.cells[(ph, a)]),
                                        "evicted": self.evictions[(ph, a)]}
                for ph, a in CELL_KEYS}
