"""
Learning to beat a fixed-time plan
==================================

A short run on the imbalanced scenario: half an hour of timetable control
to fill the replay memory, then online epsilon-greedy learning. The fixed
33/6 plan sees the same arrivals. Takes well under a minute.
"""

from phasegate.harness import (
    ExperimentConfig,
    compare,
    fixed_plan_for,
    format_comparison,
    load_scenario,
    run_fixed_baseline,
    run_rl,
)

scenario = load_scenario("imbalanced").with_hours(3)
cfg = ExperimentConfig().with_hours(0.5, 3)

fixed = run_fixed_baseline(scenario, fixed_plan_for("imbalanced"), seed=0, cfg=cfg)
run = run_rl(scenario, cfg, seed=0)

for row in run.report.rows:
    print(f"hour {row.hour} ({row.stage:7s}) wait {row.wait_s:5.2f} s  reward {row.reward:7.2f}")

print()
print(format_comparison(compare(run.report, fixed)))

changes = sum(r.action == "CHANGE" for r in run.records if r.stage == "online")
print(f"\nonline steps with a phase change: {changes} of {cfg.training.online_steps}")
print("replay cells:", run.palace.stats())
