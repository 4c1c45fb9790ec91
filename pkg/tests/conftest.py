import numpy as np
import pytest

from phasegate.env import Action, Observation
from phasegate.replay import Experience
from phasegate.simcore import Phase


def random_obs(rng, phase=None):
    phase = Phase(int(rng.integers(2))) if phase is None else phase
    return Observation(
        q=rng.integers(0, 10, 12).astype(float),
        v=rng.integers(0, 20, 12).astype(float),
        w=rng.uniform(0, 60, 12),
        phase=phase,
        grid=(rng.random((12, 30)) < 0.3).astype(float),
    )


def zero_obs(phase=Phase.NS):
    return Observation(np.zeros(12), np.zeros(12), np.zeros(12), phase, np.zeros((12, 30)))


def random_experience(rng, phase=None, action=None):
    obs = random_obs(rng, phase)
    action = Action(int(rng.integers(2))) if action is None else action
    nxt = random_obs(rng, obs.phase.next if action is Action.CHANGE else obs.phase)
    return Experience(obs, action, float(rng.normal(-10, 3)), nxt)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
