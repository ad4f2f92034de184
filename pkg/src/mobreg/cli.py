"""Command-line front end.

  mobreg run --scenario smoke.scn --seed 42 --out out/
      Run a scenario, write metrics.csv / traffic.log / verdicts.txt.
      Exit 0 if every protocol invariant holds, 1 on invariant failure,
      2 on a scenario error.

  mobreg experiment discovery-scale --seed 0 --out out/
      Reproduce one of the bundled evaluation experiments; writes
      <name>.csv into the output directory.

  mobreg inspect --snapshot reg.snap --name traffic
      Restore a registry snapshot and print matching entries, one
      canonical XML element per line.  Exit 2 on a corrupt snapshot.
"""
from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .experiments import EXPERIMENT_NAMES, run_experiment
from .registry import CorruptSnapshot, Query, restore
from .simnet import ScenarioError, Simulator, assert_invariants, load_scenario


def _verdicts_text(verdicts) -> str:
    lines = []
    for verdict in verdicts:
        if verdict.passed:
            lines.append(f"PASS {verdict.name}")
        else:
            where = (f" @event {verdict.event_index}"
                     if verdict.event_index is not None else "")
            lines.append(f"FAIL {verdict.name}: {verdict.detail}{where}")
    return "\n".join(lines) + "\n"


def cmd_run(args: argparse.Namespace) -> int:
    try:
        scenario = load_scenario(args.scenario)
        if args.seed is not None:
            scenario.seed = args.seed
        sim = Simulator(scenario)
        report = sim.run()
    except ScenarioError as exc:
        print(f"scenario error: {exc}", file=sys.stderr)
        return 2
    verdicts = assert_invariants(sim)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "metrics.csv").write_bytes(report.metrics_csv())
    (out / "traffic.log").write_bytes(report.traffic_log())
    (out / "verdicts.txt").write_text(_verdicts_text(verdicts),
                                      encoding="utf-8")
    for line in _verdicts_text(verdicts).splitlines():
        print(line)
    return 0 if all(v.passed for v in verdicts) else 1


def cmd_experiment(args: argparse.Namespace) -> int:
    result = run_experiment(args.name, args.seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    path = out / f"{result.name}.csv"
    path.write_bytes(result.csv_bytes())
    for key in sorted(result.summary):
        print(f"{key}: {result.summary[key]}")
    print(f"wrote {path}")
    return 0


def cmd_inspect(args: argparse.Namespace) -> int:
    try:
        data = Path(args.snapshot).read_bytes()
    except OSError as exc:
        print(f"cannot read snapshot: {exc}", file=sys.stderr)
        return 2
    try:
        store = restore(data)
    except CorruptSnapshot as exc:
        print(f"corrupt snapshot: {exc}", file=sys.stderr)
        return 2
    if args.id is not None:
        query = Query.by_id(args.id)
    elif args.name is not None:
        query = Query.by_name(args.name)
    else:
        query = Query.by_group(args.group)
    for entry in store.lookup(query):
        sys.stdout.write(entry.to_element().decode("utf-8") + "\n")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="mobreg",
        description="Distributed mobile service registry simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="run a scenario file")
    run_p.add_argument("--scenario", required=True)
    run_p.add_argument("--seed", type=int, default=None,
                       help="override the scenario seed")
    run_p.add_argument("--out", required=True, help="output directory")
    run_p.set_defaults(func=cmd_run)

    exp_p = sub.add_parser("experiment", help="run a bundled experiment")
    exp_p.add_argument("name", choices=EXPERIMENT_NAMES)
    exp_p.add_argument("--seed", type=int, default=0)
    exp_p.add_argument("--out", required=True)
    exp_p.set_defaults(func=cmd_experiment)

    ins_p = sub.add_parser("inspect", help="query a registry snapshot")
    ins_p.add_argument("--snapshot", required=True)
    query = ins_p.add_mutually_exclusive_group(required=True)
    query.add_argument("--id")
    query.add_argument("--name")
    query.add_argument("--group")
    ins_p.set_defaults(func=cmd_inspect)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    raise SystemExit(main())
