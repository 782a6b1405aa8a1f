"""Timing sweep over obstacle counts and tolerances on generated scenarios."""

from __future__ import annotations

import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .obstacles import check_trajectory_safe
from .planner import BrscaConfig, brsca_solve
from .scenario import generate_scenario

COUNTS = (5, 7, 9, 12, 15)
TOLERANCES = (0.7, 0.03, 0.0003)


@dataclass(frozen=True)
class BenchRow:
    n_obstacles: int
    eps: float
    seed: int
    wall_time: float
    cost: float
    collision_free: bool
    status: str
    outer_iterations: int
    dual_iterations: int


def worker_count(requested: int = None) -> int:
    """Requested count, else ``BRSCA_THREADS``, else the CPU count."""
    if requested:
        return max(1, int(requested))
    env = os.environ.get("BRSCA_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ValueError(f"BRSCA_THREADS must be an integer, got {env!r}") from None
    return os.cpu_count() or 1


def run_case(n_obstacles: int, eps: float, seed: int, config: BrscaConfig = None,
             coverage_rate: float = 0.443) -> BenchRow:
    sc = generate_scenario(seed, n_obstacles, coverage_rate)
    sys, cost, field, ic, x0 = sc.problem()
    config = replace(config or BrscaConfig(), eps=eps)
    start = time.perf_counter()
    res = brsca_solve(sys, cost, field, ic, x0, config)
    elapsed = time.perf_counter() - start
    safe = not check_trajectory_safe(field, res.trajectory)
    return BenchRow(n_obstacles, eps, seed, elapsed, res.cost, safe, res.status,
                    res.iterations, res.dual_iterations)


def _run(args):
    return run_case(*args)


def sweep(counts=COUNTS, tolerances=TOLERANCES, seeds=range(5), config: BrscaConfig = None,
          workers: int = None) -> list:
    """Every (count, eps, seed) case; results come back in input order."""
    cases = [(n, e, s, config) for n in counts for e in tolerances for s in seeds]
    workers = worker_count(workers)
    if workers == 1:
        return [_run(c) for c in cases]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_run, cases))


def summarize(rows) -> list:
    """Per (count, eps): median wall time, collision-free rate, median cost."""
    groups = {}
    for r in rows:
        groups.setdefault((r.n_obstacles, r.eps), []).append(r)
    out = []
    for (n, e), rs in sorted(groups.items(), key=lambda kv: (kv[0][0], -kv[0][1])):
        out.append({
            "n_obstacles": n,
            "eps": e,
            "runs": len(rs),
            "median_time": float(np.median([r.wall_time for r in rs])),
            "collision_free_rate": float(np.mean([r.collision_free for r in rs])),
            "median_cost": float(np.median([r.cost for r in rs])),
        })
    return out


def table(summary) -> str:
    lines = ["n_obstacles,eps,runs,median_time,collision_free_rate,median_cost"]
    for s in summary:
        lines.append(f"{s['n_obstacles']},{s['eps']!r},{s['runs']},{s['median_time']:.6f},"
                     f"{s['collision_free_rate']:.3f},{s['median_cost']:.6f}")
    return "\n".join(lines) + "\n"


def rows_csv(rows) -> str:
    lines = ["n_obstacles,eps,seed,wall_time,cost,collision_free,status,outer_iterations,dual_iterations"]
    for r in rows:
        lines.append(f"{r.n_obstacles},{r.eps!r},{r.seed},{r.wall_time:.6f},{r.cost!r},"
                     f"{int(r.collision_free)},{r.status},{r.outer_iterations},{r.dual_iterations}")
    return "\n".join(lines) + "\n"
