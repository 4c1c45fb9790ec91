"""
Queue discharge at a single intersection
========================================

Vehicles line up at the stop line and leave one per saturation headway
while their approach shows green. Fractional headway credit carries over
between steps.
"""

from phasegate.env import Action, TrafficEnv, observe
from phasegate.simcore import ArrivalSchedule, Phase, Vehicle, advance, build_intersection, lane_number

# an empty intersection, west-east green
state = build_intersection(seed=42)
print("lanes:", len(state.lanes), "phase:", state.current_phase.name)

# park five stopped cars in the first eastbound lane, 7.5 m apart
lane = lane_number("E", 0)
for k in range(5):
    state.lanes[lane].vehicles.append(Vehicle(k, lane, 7.5 * k, 0.0, 0.0, 0.0))
state.entered_total = state.next_vehicle_id = 5

# one 5 s step at a 2 s headway lets two cars out and keeps half a car of credit
exits = advance(state, Phase.WE, 5.0)
print("exits:", [e.vehicle_id for e in exits], "credit left:", state.lanes[lane].credit)

# the agent sees queue, count and wait per lane plus an occupancy grid
obs = observe(state)
print("queue:", obs.q.astype(int))
print("grid row of that lane:", obs.grid[lane, :8].astype(int))

# a north-south car stuck at red keeps accumulating wait
env = TrafficEnv(ArrivalSchedule(()), seed=0)
n = lane_number("N", 1)
env.state.lanes[n].vehicles.append(Vehicle(0, n, 0.0, 0.0, 0.0, 0.0))
env.state.entered_total = env.state.next_vehicle_id = 1
for k in range(3):
    obs, reward, _ = env.step(Action.KEEP)
    print(f"t={env.clock:4.0f}s wait={obs.w[n]:4.0f}s reward={reward.total:6.2f}")

# switching costs the change penalty and releases the car
obs, reward, exits = env.step(Action.CHANGE)
print("after change:", env.phase.name, "reward", round(reward.total, 2), "exited", len(exits))
print("vehicles conserved:", env.state.conserved())
