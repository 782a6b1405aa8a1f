"""Grid-search planner plus proportional tracking controller, used as a cost reference.

The path is the shortest 8-connected grid path through cells whose centers
lie outside every obstacle (with a small clearance); it is stretched
uniformly over the horizon and tracked by ``u = -K_p (x - x_ref)`` clipped to
the input box.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .errors import BaselineError
from .lti import Trajectory, evaluate_cost
from .obstacles import check_trajectory_safe, eval_h_batch

_MOVES = [(di, dj) for di in (-1, 0, 1) for dj in (-1, 0, 1) if di or dj]


@dataclass(frozen=True, eq=False)
class BaselineResult:
    trajectory: Trajectory  # goal-shifted coordinates, like the BRSCA result
    cost: float
    path: np.ndarray  # grid waypoints in workspace coordinates
    path_length: float
    collision_free: bool


def _free_mask(field, lo, hi, cell, clearance):
    nx, ny = (np.ceil((hi - lo) / cell).astype(int) + 1)
    xs = lo[0] + cell * np.arange(nx)
    ys = lo[1] + cell * np.arange(ny)
    P = np.stack(np.meshgrid(xs, ys, indexing="ij"), axis=-1).reshape(-1, 2)
    occupied = np.zeros(P.shape[0], dtype=bool)
    for o in field.obstacles:
        occupied |= eval_h_batch(o, P) <= 0
    occupied = occupied.reshape(nx, ny)
    if clearance > 0 and occupied.any():
        occupied |= ndimage.distance_transform_edt(~occupied) * cell < clearance
    return ~occupied, xs, ys


def _nearest_free(free, idx):
    if free[idx]:
        return idx
    cand = np.argwhere(free)
    if cand.size == 0:
        raise BaselineError("the grid has no free cell")
    k = np.argmin(np.sum((cand - np.array(idx)) ** 2, axis=1))
    return tuple(int(v) for v in cand[k])


def astar(free: np.ndarray, start: tuple, goal: tuple) -> list:
    """Shortest 8-connected path on a boolean occupancy grid (unit cell spacing)."""
    nx, ny = free.shape
    g = {start: 0.0}
    parent = {start: None}
    heap = [(math.dist(start, goal), 0.0, start)]
    closed = set()
    while heap:
        _, gc, node = heapq.heappop(heap)
        if node in closed:
            continue
        if node == goal:
            path = []
            while node is not None:
                path.append(node)
                node = parent[node]
            return path[::-1]
        closed.add(node)
        i, j = node
        for di, dj in _MOVES:
            a, b = i + di, j + dj
            if not (0 <= a < nx and 0 <= b < ny) or not free[a, b]:
                continue
            # no corner cutting between two occupied cells
            if di and dj and not (free[i + di, j] and free[i, j + dj]):
                continue
            ng = gc + (1.4142135623730951 if di and dj else 1.0)
            nb = (a, b)
            if ng < g.get(nb, np.inf):
                g[nb] = ng
                parent[nb] = node
                heapq.heappush(heap, (ng + math.dist(nb, goal), ng, nb))
    raise BaselineError("no collision-free grid path between start and goal")


def resample(path: np.ndarray, count: int) -> np.ndarray:
    """``count`` points evenly spaced in arc length along a polyline."""
    seg = np.linalg.norm(np.diff(path, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    if s[-1] == 0:
        return np.repeat(path[:1], count, axis=0)
    q = np.linspace(0.0, s[-1], count)
    return np.column_stack([np.interp(q, s, path[:, k]) for k in range(path.shape[1])])


def baseline_tracked_path(scenario, cell: float = None, kp: float = 4.0, kd: float = 4.0,
                          clearance: float = 0.15) -> BaselineResult:
    """Plan on the grid, stretch over ``T`` steps, track with a clipped PD-style P-controller.

    The gain acts on the full state error: ``K_p = [kp I, kd I]`` for the
    position and velocity blocks of the double-integrator template.
    """
    sys, cost, _, ic, x0 = scenario.problem()
    field = scenario.field
    Pi = scenario.projection
    if Pi.shape[0] != 2:
        raise BaselineError("the grid baseline needs a 2D workspace")
    lo, hi = (np.asarray(v, dtype=float) for v in scenario.workspace)
    cell = cell or float((hi - lo).max()) / 200.0
    if not cell > 0:
        raise ValueError("grid cell must be positive")
    free, xs, ys = _free_mask(field, lo, hi, cell, clearance)
    p0, pg = Pi @ scenario.start, Pi @ scenario.goal

    def to_idx(p):
        return (int(np.clip(round((p[0] - lo[0]) / cell), 0, xs.size - 1)),
                int(np.clip(round((p[1] - lo[1]) / cell), 0, ys.size - 1)))

    cells = astar(free, _nearest_free(free, to_idx(p0)), _nearest_free(free, to_idx(pg)))
    pts = np.array([[xs[i], ys[j]] for i, j in cells])
    path = np.vstack([p0, pts, pg])
    T, dt = cost.T, scenario.system.dt
    ref_pos = resample(path, T + 1)
    ref_vel = np.gradient(ref_pos, dt, axis=0)
    ref_vel[0] = ref_vel[-1] = 0.0
    n, m = sys.n, sys.m
    if n != 2 * m:
        raise BaselineError("the tracking gain assumes position and velocity blocks")
    Kp = np.hstack([kp * np.eye(m), kd * np.eye(m)])
    ref = np.hstack([ref_pos, ref_vel]) - np.concatenate([pg, np.zeros(m)])
    bound = scenario.input_bound
    X = np.empty((T + 1, n))
    U = np.empty((T, m))
    X[0] = x0
    for t in range(T):
        u = -Kp @ (X[t] - ref[t])
        if bound is not None:
            u = np.clip(u, -bound, bound)
        U[t] = u
        X[t + 1] = sys.A @ X[t] + sys.B @ u
    traj = Trajectory(X, U)
    shifted = scenario.problem()[2]
    safe = not check_trajectory_safe(shifted, traj)
    length = float(np.sum(np.linalg.norm(np.diff(path, axis=0), axis=1)))
    return BaselineResult(traj, evaluate_cost(traj, cost), path, length, safe)
