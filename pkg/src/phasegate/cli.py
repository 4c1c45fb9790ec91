"""Command line entry point: train, baseline, report, compare."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .harness import (
    ExperimentConfig,
    FixedPlan,
    ScenarioError,
    compare,
    comparison_csv,
    fixed_plan_for,
    format_comparison,
    load_config,
    load_scenario,
    read_run,
    run_fixed_baseline,
    run_rl,
    summary_text,
    write_run,
)


def _experiment(args) -> tuple[ExperimentConfig, object]:
    cfg, raw = (load_config(args.config) if args.config else (ExperimentConfig(), {}))
    scenario = load_scenario(args.scenario or raw.get("scenario") or "balanced")
    offline = cfg.training.offline_hours if args.offline_hours is None else args.offline_hours
    if args.hours is not None:
        scenario = scenario.with_hours(args.hours)
    cfg = cfg.with_hours(offline, scenario.total_hours)
    return cfg, scenario


def _parse_plan(text: str) -> FixedPlan:
    try:
        we, ns = (float(x) for x in text.split("/"))
    except ValueError:
        raise argparse.ArgumentTypeError("plan must look like WE/NS, e.g. 33/6") from None
    return FixedPlan(we, ns, we + ns)


def cmd_train(args) -> int:
    cfg, scenario = _experiment(args)
    run = run_rl(scenario, cfg, args.seed, args.out)
    print(summary_text(run.report), end="")
    print(f"wrote {args.out}")
    return 0


def cmd_baseline(args) -> int:
    cfg, scenario = _experiment(args)
    plan = args.plan or fixed_plan_for(scenario.name)
    report = run_fixed_baseline(scenario, plan, args.seed, cfg)
    write_run(args.out, report)
    print(summary_text(report), end="")
    print(f"wrote {args.out}")
    return 0


def cmd_report(args) -> int:
    print(summary_text(read_run(args.run)), end="")
    return 0


def cmd_compare(args) -> int:
    rows = compare(read_run(args.rl), read_run(args.fixed))
    text = comparison_csv(rows)
    if args.csv:
        Path(args.csv).write_text(text)
    print(text if args.format == "csv" else format_comparison(rows), end="" if args.format == "csv" else "\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="phasegate", description=__doc__)
    p.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = p.add_subparsers(dest="command", required=True)

    def run_options(sp):
        sp.add_argument("--scenario", help="built-in name or scenario JSON file (default: balanced)")
        sp.add_argument("--seed", type=int, default=0)
        sp.add_argument("--config", help="experiment JSON file")
        sp.add_argument("--out", required=True, help="run directory to write")
        sp.add_argument("--hours", type=float, help="shorten the horizon, compressing the flow windows")
        sp.add_argument("--offline-hours", type=float, help="hours of timetable control before online learning")

    sp = sub.add_parser("train", help="pretrain offline, then train online")
    run_options(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("baseline", help="run the fixed-time plan")
    run_options(sp)
    sp.add_argument("--plan", type=_parse_plan, help="WE/NS green seconds (default: the scenario's plan)")
    sp.set_defaults(func=cmd_baseline)

    sp = sub.add_parser("report", help="print the summary of a run directory")
    sp.add_argument("--run", required=True)
    sp.set_defaults(func=cmd_report)

    sp = sub.add_parser("compare", help="percent changes of an RL run against a fixed-plan run")
    sp.add_argument("--rl", required=True)
    sp.add_argument("--fixed", required=True)
    sp.add_argument("--format", choices=("table", "csv"), default="table")
    sp.add_argument("--csv", help="also write the comparison CSV here")
    sp.set_defaults(func=cmd_compare)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ScenarioError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
