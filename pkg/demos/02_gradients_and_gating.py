"""
Checking gradients and the phase gate
=====================================

The network toolkit has hand-written backward passes, so it ships a
central-difference checker. The Q-network routes each sample through the
branch of its current phase only.
"""

import numpy as np

from phasegate import nn
from phasegate.env import Observation
from phasegate.qnet import PhaseGateQNet, q_values
from phasegate.simcore import Phase

rng = np.random.default_rng(0)

# a conv layer feeding a small dense head
specs = [nn.conv2d(1, 4, 3, 3, 2), nn.relu(), nn.flatten(), nn.dense(4 * 2 * 3, 2)]
params = nn.init_params(specs, rng)
for p in params:
    if p is not None:
        p["b"] = rng.uniform(-0.2, 0.2, p["b"].shape)
x = rng.normal(size=(3, 1, 6, 8))
print("output shape:", nn.output_shape(specs, (1, 6, 8)))
print("closest relu input to a kink:", round(nn.relu_margin(params, specs, x), 4))
print("max relative error:", nn.finite_difference_check(params, specs, x, rng.normal(size=(3, 2))))

# phase gate: scrambling the west-east branch leaves a north-south decision alone
net = PhaseGateQNet.initialize(seed=1)
obs = Observation(rng.integers(0, 5, 12).astype(float), rng.integers(0, 9, 12).astype(float),
                  rng.uniform(0, 30, 12), Phase.NS, (rng.random((12, 30)) < 0.2).astype(float))
before = q_values(net, obs)
for p in net.branches[Phase.WE]:
    if p is not None:
        p["W"] = rng.normal(size=p["W"].shape)
print("Q (keep, change):", np.round(before, 3), "unchanged:", before == q_values(net, obs))

_, grads = net.loss_and_grads([obs], [0], np.array([-10.0]))
print("largest WE-branch gradient:", max(np.abs(v).max() for g in grads[Phase.WE] if g for v in g.values()))
