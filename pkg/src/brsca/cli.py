"""Command line entry point: ``brsca gen|solve|bench|check|baseline``.

Exit codes: 0 success, 1 infeasible or unsafe result, 2 bad input,
3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
import time
from dataclasses import replace

from . import bench as bench_mod
from .baseline import baseline_tracked_path
from .errors import BaselineError, GenerationError, NumericalError, ScenarioError
from .obstacles import check_trajectory_safe
from .planner import BrscaConfig, brsca_solve
from .scenario import (
    RunReport,
    atomic_write,
    generate_scenario,
    load,
    read_trajectory_csv,
    save,
    trajectory_csv,
)

EXIT_OK, EXIT_INFEASIBLE, EXIT_INPUT, EXIT_NUMERICAL = 0, 1, 2, 3


def _config(args) -> BrscaConfig:
    cfg = BrscaConfig(eps=args.eps)
    if args.max_outer is not None:
        cfg = replace(cfg, max_outer=args.max_outer)
    if args.alpha0 is not None:
        cfg = replace(cfg, steps=replace(cfg.steps, alpha0=args.alpha0))
    return cfg


def _write_run(out, stem, sc, traj, report: RunReport) -> RunReport:
    """Write trajectory CSV, then re-read it to fill ``collision_free`` before the sidecar."""
    path = os.path.join(out, f"{stem}.csv")
    atomic_write(path, trajectory_csv(traj, sc.field))
    with open(path, encoding="utf-8") as fh:
        reread = read_trajectory_csv(fh.read(), sc.sys.n, sc.sys.m)
    violations = check_trajectory_safe(sc.field, reread)
    report = replace(report, collision_free=not violations, violations=[tuple(v) for v in violations])
    atomic_write(os.path.join(out, f"{stem}.json"), report.to_json())
    return report


def cmd_gen(args) -> int:
    sc = generate_scenario(args.seed, args.obstacles, args.coverage)
    path = args.out if args.out.endswith(".json") else os.path.join(args.out, f"scenario_{args.seed}.json")
    save(sc, path)
    print(path)
    return EXIT_OK


def cmd_solve(args) -> int:
    sc = load(args.scenario)
    sys_, cost, field, ic, x0 = sc.problem()
    cfg = _config(args)
    start = time.perf_counter()
    res = brsca_solve(sys_, cost, field, ic, x0, cfg)
    elapsed = time.perf_counter() - start
    report = RunReport(
        scenario=sc.name, solver="brsca", wall_time=elapsed, cost=res.cost, collision_free=False,
        iterations={"outer": res.iterations, "dual": res.dual_iterations}, eps=cfg.eps,
        status=res.status,
    )
    report = _write_run(args.out, "trajectory", sc, sc.unshift(res.trajectory), report)
    print(f"{report.status} cost={report.cost:.6g} time={elapsed:.3f}s collision_free={report.collision_free}")
    return EXIT_OK if report.collision_free and res.feasible else EXIT_INFEASIBLE


def cmd_baseline(args) -> int:
    sc = load(args.scenario)
    start = time.perf_counter()
    res = baseline_tracked_path(sc, cell=args.grid_cell)
    elapsed = time.perf_counter() - start
    report = RunReport(scenario=sc.name, solver="grid-astar-p", wall_time=elapsed, cost=res.cost,
                       collision_free=False, status="TRACKED")
    report = _write_run(args.out, "baseline", sc, sc.unshift(res.trajectory), report)
    print(f"baseline cost={report.cost:.6g} path_length={res.path_length:.4f} "
          f"collision_free={report.collision_free}")
    return EXIT_OK if report.collision_free else EXIT_INFEASIBLE


def cmd_check(args) -> int:
    sc = load(args.scenario)
    with open(args.trajectory, encoding="utf-8") as fh:
        traj = read_trajectory_csv(fh.read(), sc.sys.n, sc.sys.m)
    if traj.T != sc.cost.T:
        raise ScenarioError(f"trajectory has {traj.T} steps, scenario horizon is {sc.cost.T}", args.trajectory)
    violations = check_trajectory_safe(sc.field, traj)
    for v in violations:
        print(f"violation t={v.t} obstacle={v.obstacle_id} h={v.h:.6g}")
    if not violations:
        print("collision free")
    return EXIT_INFEASIBLE if violations else EXIT_OK


def cmd_bench(args) -> int:
    cfg = _config(args)
    seeds = range(args.seed, args.seed + args.seeds)
    rows = bench_mod.sweep(args.counts, args.tolerances, seeds, cfg, args.workers)
    summary = bench_mod.summarize(rows)
    atomic_write(os.path.join(args.out, "bench_runs.csv"), bench_mod.rows_csv(rows))
    atomic_write(os.path.join(args.out, "bench_table.csv"), bench_mod.table(summary))
    atomic_write(os.path.join(args.out, "bench_summary.json"), json.dumps(summary, indent=1) + "\n")
    sys.stdout.write(bench_mod.table(summary))
    return EXIT_OK if all(r.collision_free for r in rows) else EXIT_INFEASIBLE


def _floats(text):
    return tuple(float(v) for v in text.split(","))


def _ints(text):
    return tuple(int(v) for v in text.split(","))


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="brsca", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def solver_flags(sp):
        sp.add_argument("--eps", type=float, default=0.7, help="dual ascent cost tolerance")
        sp.add_argument("--max-outer", type=int, default=None)
        sp.add_argument("--alpha0", type=float, default=None, help="initial (dimensionless) dual step")

    g = sub.add_parser("gen", help="write a generated scenario")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--obstacles", type=int, default=5)
    g.add_argument("--coverage", type=float, default=0.443)
    g.add_argument("--out", default=".", help="directory, or a .json file path")
    g.set_defaults(func=cmd_gen)

    s = sub.add_parser("solve", help="run BRSCA on a scenario")
    s.add_argument("--scenario", required=True)
    s.add_argument("--out", default=".")
    solver_flags(s)
    s.set_defaults(func=cmd_solve)

    b = sub.add_parser("bench", help="sweep obstacle counts and tolerances")
    b.add_argument("--out", default=".")
    b.add_argument("--seed", type=int, default=0, help="first seed")
    b.add_argument("--seeds", type=int, default=5, help="seeds per cell")
    b.add_argument("--counts", type=_ints, default=bench_mod.COUNTS)
    b.add_argument("--tolerances", type=_floats, default=bench_mod.TOLERANCES)
    b.add_argument("--workers", type=int, default=None, help="defaults to BRSCA_THREADS or the CPU count")
    solver_flags(b)
    b.set_defaults(func=cmd_bench)

    c = sub.add_parser("check", help="validate a trajectory against a scenario")
    c.add_argument("--scenario", required=True)
    c.add_argument("--trajectory", required=True)
    c.set_defaults(func=cmd_check)

    bl = sub.add_parser("baseline", help="grid A* path tracked by a P-controller")
    bl.add_argument("--scenario", required=True)
    bl.add_argument("--out", default=".")
    bl.add_argument("--grid-cell", type=float, default=None, help="defaults to workspace width / 200")
    bl.set_defaults(func=cmd_baseline)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_INPUT if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except NumericalError as err:
        print(f"numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERICAL
    except BaselineError as err:
        print(f"baseline failed: {err}", file=sys.stderr)
        return EXIT_INFEASIBLE
    except (ScenarioError, GenerationError, OSError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INPUT


def run_cli(args) -> int:
    return main(list(args))


if __name__ == "__main__":
    sys.exit(main())
