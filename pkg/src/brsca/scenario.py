"""Scenario files, random scenario generation, and run outputs.

A scenario is stored in goal coordinates as the user wrote it; ``problem()``
shifts everything so the goal becomes the regulator origin.
"""

from __future__ import annotations

import json
import math
import os
import tempfile
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy import ndimage

from .errors import DimensionError, GenerationError, ScenarioError
from .lti import CostSpec, InputConstraint, LtiSystem, Trajectory
from .obstacles import Composite, Ellipse, ObstacleField, SemiConvexObstacle, certify_semiconvex

TEMPLATE = "double-integrator-2d"
COVERAGE_SAMPLES = 100_000
GENERATION_BUDGET = 10_000

DEFAULT_WORKSPACE = ((0.0, 0.0), (4.0, 4.0))
DEFAULT_COVERAGE_BOX = ((1.15, 0.3), (3.36, 3.6))
DEFAULT_START = (4.0, 3.6)
DEFAULT_GOAL = (0.0, 0.0)


@dataclass(frozen=True)
class SystemSpec:
    """Either a named template with a timestep or explicit ``A``/``B``."""

    template: Optional[str] = TEMPLATE
    dt: float = 0.1
    A: Optional[tuple] = None
    B: Optional[tuple] = None
    projection: Optional[tuple] = None

    def build(self) -> LtiSystem:
        if self.template is not None:
            if self.template != TEMPLATE:
                raise ScenarioError(f"unknown template {self.template!r}", "system.template")
            return LtiSystem.double_integrator(self.dt, 2)
        return LtiSystem(np.array(self.A, dtype=float), np.array(self.B, dtype=float))

    def position_map(self, n: int) -> np.ndarray:
        if self.projection is not None:
            return np.array(self.projection, dtype=float)
        if self.template == TEMPLATE:
            return np.hstack([np.eye(2), np.zeros((2, 2))])
        return np.eye(n)


@dataclass(frozen=True, eq=False)
class Scenario:
    system: SystemSpec
    cost: CostSpec
    obstacles: tuple
    input_bound: Optional[float]
    start: np.ndarray
    goal: np.ndarray
    seed: int = 0
    coverage_rate: Optional[float] = None
    workspace: tuple = DEFAULT_WORKSPACE
    coverage_box: Optional[tuple] = None
    input_polytope: Optional[tuple] = None
    name: str = "scenario"

    def __post_init__(self):
        object.__setattr__(self, "obstacles", tuple(self.obstacles))
        sys = self.system.build()
        object.__setattr__(self, "start", _pad(self.start, sys.n, "start"))
        object.__setattr__(self, "goal", _pad(self.goal, sys.n, "goal"))
        self.cost.check_against(sys)
        if not np.all(np.isfinite(self.start - self.goal)):
            raise ScenarioError("goal-shifted start is not finite", "start")

    @property
    def sys(self) -> LtiSystem:
        return self.system.build()

    @property
    def projection(self) -> np.ndarray:
        return self.system.position_map(self.sys.n)

    @property
    def field(self) -> ObstacleField:
        lo, hi = self.workspace
        return ObstacleField(self.obstacles, lo, hi, self.projection)

    def input_constraint(self) -> InputConstraint:
        m, T = self.sys.m, self.cost.T
        if self.input_polytope is not None:
            G, e = self.input_polytope
            return InputConstraint.constant(G, e, T)
        if self.input_bound is None:
            return InputConstraint.none(m, T)
        return InputConstraint.box(self.input_bound, m, T)

    def problem(self):
        """``(sys, cost, field, input_cons, x0)`` with the goal moved to the origin."""
        offset = -(self.projection @ self.goal)
        lo, hi = self.workspace
        shifted = ObstacleField(
            tuple(o.translate(offset) for o in self.obstacles),
            np.asarray(lo) + offset, np.asarray(hi) + offset, self.projection,
        )
        return self.sys, self.cost, shifted, self.input_constraint(), self.start - self.goal

    def unshift(self, traj: Trajectory) -> Trajectory:
        return Trajectory(traj.states + self.goal, traj.inputs)



def _pad(v, n, where) -> np.ndarray:
    """Accept a full state, or a position that gets zero velocity appended."""
    v = np.asarray(v, dtype=float).reshape(-1)
    if v.size == n:
        return v
    if 0 < v.size < n:
        return np.concatenate([v, np.zeros(n - v.size)])
    raise ScenarioError(f"expected {n} entries, got {v.size}", where)


def default_cost(T: int = 100) -> CostSpec:
    return CostSpec(np.diag([0.1, 0.1, 0.0, 0.0]), np.eye(2), 10.0 * np.eye(4), T)


# ---------------------------------------------------------------- serialization

def _mat(a) -> list:
    return np.asarray(a, dtype=float).tolist()


def _ellipse_json(e: Ellipse) -> dict:
    return {"type": "ellipse", "center": _mat(e.center), "shape": _mat(e.shape), "level": float(e.level)}


def obstacle_to_json(o: SemiConvexObstacle) -> dict:
    g = o.geometry
    if isinstance(g, Composite):
        d = {"type": "composite", "members": [_ellipse_json(e) for e in g.members]}
    else:
        d = _ellipse_json(g)
    d["certificate"] = _mat(o.certificate)
    d["id"] = o.id
    return d


def scenario_to_dict(sc: Scenario) -> dict:
    s = sc.system
    system = {"template": s.template, "dt": s.dt} if s.template else {"A": _mat(s.A), "B": _mat(s.B)}
    if s.projection is not None:
        system["projection"] = _mat(s.projection)
    if sc.input_polytope is not None:
        ic = {"type": "polytope", "G": _mat(sc.input_polytope[0]), "e": _mat(sc.input_polytope[1])}
    elif sc.input_bound is None:
        ic = {"type": "none"}
    else:
        ic = {"type": "box", "bound": float(sc.input_bound)}
    out = {
        "name": sc.name,
        "system": system,
        "cost": {"Q": _mat(sc.cost.Q), "R": _mat(sc.cost.R), "P": _mat(sc.cost.P), "T": sc.cost.T},
        "obstacles": [obstacle_to_json(o) for o in sc.obstacles],
        "input_constraints": ic,
        "start": _mat(sc.start),
        "goal": _mat(sc.goal),
        "seed": int(sc.seed),
        "workspace": {"lower": _mat(sc.workspace[0]), "upper": _mat(sc.workspace[1])},
    }
    if sc.coverage_rate is not None:
        out["coverage_rate"] = float(sc.coverage_rate)
    if sc.coverage_box is not None:
        out["coverage_box"] = {"lower": _mat(sc.coverage_box[0]), "upper": _mat(sc.coverage_box[1])}
    return out


def dumps(sc: Scenario) -> str:
    # json writes floats with repr, which round-trips exactly
    return json.dumps(scenario_to_dict(sc), indent=1) + "\n"


class _Reader:
    def __init__(self, data, path=""):
        self.data, self.path = data, path

    def sub(self, key):
        where = f"{self.path}.{key}" if isinstance(key, str) else f"{self.path}[{key}]"
        where = where.lstrip(".")
        try:
            return _Reader(self.data[key], where)
        except (KeyError, IndexError, TypeError):
            raise ScenarioError("missing field", where) from None

    def has(self, key) -> bool:
        return isinstance(self.data, dict) and key in self.data

    def array(self, ndim=None) -> np.ndarray:
        try:
            a = np.array(self.data, dtype=float)
        except (TypeError, ValueError):
            raise ScenarioError("expected a numeric array", self.path) from None
        if ndim is not None and a.ndim != ndim:
            raise ScenarioError(f"expected a {ndim}-d array, got shape {a.shape}", self.path)
        if not np.all(np.isfinite(a)):
            raise ScenarioError("contains non-finite values", self.path)
        return a

    def number(self) -> float:
        if isinstance(self.data, bool) or not isinstance(self.data, (int, float)):
            raise ScenarioError("expected a number", self.path)
        return float(self.data)

    def integer(self) -> int:
        if isinstance(self.data, bool) or not isinstance(self.data, int):
            raise ScenarioError("expected an integer", self.path)
        return int(self.data)

    def __iter__(self):
        if not isinstance(self.data, list):
            raise ScenarioError("expected a list", self.path)
        return (self.sub(i) for i in range(len(self.data)))


def _read_ellipse(r: _Reader) -> Ellipse:
    try:
        return Ellipse(r.sub("center").array(1), r.sub("shape").array(2), r.sub("level").number())
    except (ValueError, DimensionError) as err:
        if isinstance(err, ScenarioError):
            raise
        raise ScenarioError(str(err), r.path) from None


def _read_obstacle(r: _Reader, default_id: int) -> SemiConvexObstacle:
    kind = r.sub("type").data
    oid = r.sub("id").integer() if r.has("id") else default_id
    cert = r.sub("certificate").array(2) if r.has("certificate") else None
    try:
        if kind == "ellipse":
            e = _read_ellipse(r)
            return SemiConvexObstacle.ellipse(e.center, e.shape, e.level, oid, cert)
        if kind == "composite":
            members = [_read_ellipse(m) for m in r.sub("members")]
            return SemiConvexObstacle.composite(members, oid, cert)
    except (ValueError, DimensionError) as err:
        if isinstance(err, ScenarioError):
            raise
        raise ScenarioError(str(err), r.path) from None
    raise ScenarioError(f"unknown obstacle type {kind!r}", f"{r.path}.type")


def _box(r: _Reader) -> tuple:
    return (tuple(r.sub("lower").array(1)), tuple(r.sub("upper").array(1)))


def scenario_from_dict(data) -> Scenario:
    r = _Reader(data)
    if not isinstance(data, dict):
        raise ScenarioError("top level must be an object")
    sr = r.sub("system")
    proj = tuple(map(tuple, sr.sub("projection").array(2))) if sr.has("projection") else None
    if sr.has("template") and sr.data["template"] is not None:
        system = SystemSpec(sr.sub("template").data, sr.sub("dt").number() if sr.has("dt") else 0.1,
                            projection=proj)
    else:
        A, B = sr.sub("A").array(2), sr.sub("B").array(2)
        system = SystemSpec(None, 0.0, tuple(map(tuple, A)), tuple(map(tuple, B)), proj)
    try:
        sys = system.build()
    except ValueError as err:
        if isinstance(err, ScenarioError):
            raise
        raise ScenarioError(str(err), "system") from None
    cr = r.sub("cost")
    try:
        cost = CostSpec(cr.sub("Q").array(2), cr.sub("R").array(2), cr.sub("P").array(2), cr.sub("T").integer())
        cost.check_against(sys)
    except ValueError as err:
        if isinstance(err, ScenarioError):
            raise
        raise ScenarioError(str(err), "cost") from None
    obstacles = tuple(_read_obstacle(o, i) for i, o in enumerate(r.sub("obstacles")))
    ir = r.sub("input_constraints")
    kind = ir.sub("type").data
    bound, poly = None, None
    if kind == "box":
        bound = ir.sub("bound").number()
        if bound < 0:
            raise ScenarioError("bound must be nonnegative", "input_constraints.bound")
    elif kind == "polytope":
        poly = (tuple(map(tuple, ir.sub("G").array(2))), tuple(ir.sub("e").array(1)))
    elif kind != "none":
        raise ScenarioError(f"unknown input constraint type {kind!r}", "input_constraints.type")
    kw = {}
    if r.has("workspace"):
        kw["workspace"] = _box(r.sub("workspace"))
    if r.has("coverage_box"):
        kw["coverage_box"] = _box(r.sub("coverage_box"))
    if r.has("coverage_rate"):
        kw["coverage_rate"] = r.sub("coverage_rate").number()
    try:
        sc = Scenario(
            system, cost, obstacles, bound, r.sub("start").array(1), r.sub("goal").array(1),
            seed=r.sub("seed").integer(), input_polytope=poly,
            name=str(data.get("name", "scenario")), **kw,
        )
        for o in sc.obstacles:
            if o.dim != sc.projection.shape[0]:
                raise ScenarioError(f"obstacle {o.id} lives in R^{o.dim}, workspace is R^{sc.projection.shape[0]}",
                                    "obstacles")
        sc.field
    except ScenarioError:
        raise
    except ValueError as err:
        raise ScenarioError(str(err)) from None
    return sc


def loads(text: str) -> Scenario:
    try:
        data = json.loads(text)
    except json.JSONDecodeError as err:
        raise ScenarioError(err.msg, f"line {err.lineno} column {err.colno}") from None
    return scenario_from_dict(data)


def load(path) -> Scenario:
    with open(path, "r", encoding="utf-8") as fh:
        return loads(fh.read())


def atomic_write(path, text: str) -> None:
    path = os.fspath(path)
    d = os.path.dirname(os.path.abspath(path))
    os.makedirs(d, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=d, prefix=".tmp-", suffix=os.path.basename(path))
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def save(sc: Scenario, path) -> None:
    atomic_write(path, dumps(sc))


# ---------------------------------------------------------------- generation

def coverage(obstacles, box, n_samples: int = COVERAGE_SAMPLES, seed: int = 0) -> float:
    """Monte-Carlo fraction of ``box`` covered by at least one obstacle."""
    lo, hi = (np.asarray(b, dtype=float) for b in box)
    pts = np.random.default_rng(seed).uniform(lo, hi, size=(n_samples, lo.size))
    if not obstacles:
        return 0.0
    field = ObstacleField(tuple(obstacles))
    return float(np.mean(field.h_min(pts) < 0))


def _normalized_forms(members, pts):
    """Per member ``(x - c)' E (x - c) / level`` at every sample."""
    out = []
    for e in members:
        D = pts - e.center
        out.append(np.sum((D @ e.shape) * D, axis=1) / e.level)
    return np.array(out)


def _random_shape(rng, center, r_scale):
    """An ellipse or a lens (max of two overlapping ellipses) of unit nominal size."""
    n_members = 1 if rng.random() < 0.5 else 2
    members = []
    for _ in range(n_members):
        th = rng.uniform(0, np.pi)
        Rm = np.array([[np.cos(th), -np.sin(th)], [np.sin(th), np.cos(th)]])
        axes = r_scale * rng.uniform(0.75, 1.25, size=2)
        E = Rm @ np.diag(1.0 / axes**2) @ Rm.T
        off = 0.0 if n_members == 1 else 0.4 * r_scale * rng.normal(size=2)
        members.append(Ellipse(center + off, 0.5 * (E + E.T), 1.0))
    return members


def _cells(lo, hi, n):
    """A rows x cols grid over the box with at least ``n`` roughly square cells."""
    w, h = hi - lo
    cols = max(1, int(round(math.sqrt(n * w / h))))
    rows = int(math.ceil(n / cols))
    return rows, cols, np.array([w / cols, h / rows])


def _connected(field: ObstacleField, lo, hi, a, b, cells: int = 100) -> bool:
    xs = np.linspace(lo[0], hi[0], cells)
    ys = np.linspace(lo[1], hi[1], cells)
    XX, YY = np.meshgrid(xs, ys, indexing="ij")
    free = (field.h_min(np.column_stack([XX.ravel(), YY.ravel()])) > 0).reshape(cells, cells)
    labels, _ = ndimage.label(free)

    def cell(p):
        i = int(np.clip(round((p[0] - lo[0]) / (hi[0] - lo[0]) * (cells - 1)), 0, cells - 1))
        j = int(np.clip(round((p[1] - lo[1]) / (hi[1] - lo[1]) * (cells - 1)), 0, cells - 1))
        return labels[i, j]

    la, lb = cell(a), cell(b)
    return la != 0 and la == lb


def generate_scenario(
    seed: int,
    n_obstacles: int,
    coverage_rate: float,
    workspace=DEFAULT_WORKSPACE,
    coverage_box=DEFAULT_COVERAGE_BOX,
    start=DEFAULT_START,
    goal=DEFAULT_GOAL,
    T: int = 100,
    dt: float = 0.1,
    input_bound: float = 0.7,
    clearance: float = 0.15,
    gap: float = 0.1,
    budget: int = GENERATION_BUDGET,
) -> Scenario:
    """Random certified ellipse/lens obstacles scaled to hit a coverage target.

    Shapes are centered in distinct cells of a jittered grid over
    ``coverage_box`` at a nominal size, each at least ``gap`` (workspace
    distance) from those already placed, and
    then scaled together; the scale is the sample quantile of the covering
    radius, so the measured coverage on the fixed sample set matches the
    target. Draws whose scaled obstacles come closer than ``gap``, whose start
    or goal lose ``clearance``, or that disconnect start from goal are
    rejected. Every shape drawn counts against ``budget``.
    """
    n_obstacles = int(n_obstacles)
    if n_obstacles < 0:
        raise ValueError("n_obstacles must be nonnegative")
    cost = default_cost(T)
    common = dict(system=SystemSpec(TEMPLATE, dt), cost=cost, input_bound=input_bound,
                  start=np.asarray(start, dtype=float), goal=np.asarray(goal, dtype=float),
                  seed=int(seed), workspace=_tuplify(workspace),
                  name=f"gen-{n_obstacles}-{int(seed)}")
    if n_obstacles == 0:
        return Scenario(obstacles=(), coverage_rate=None, coverage_box=None, **common)
    if not 0 < coverage_rate <= 0.6:
        raise ValueError("coverage_rate must lie in (0, 0.6]")
    box = _tuplify(coverage_box or workspace)
    lo, hi = (np.asarray(b, dtype=float) for b in box)
    rng = np.random.default_rng(seed)
    pts = np.random.default_rng(int(seed) ^ 0x5EED).uniform(lo, hi, size=(COVERAGE_SAMPLES, 2))
    area = float(np.prod(hi - lo))
    r_scale = math.sqrt(coverage_rate * area / (math.pi * n_obstacles))
    wlo, whi = (np.asarray(b, dtype=float) for b in _tuplify(workspace))
    grid = _Grid(np.minimum(wlo, lo) - 0.5, np.maximum(whi, hi) + 0.5, 0.025)
    rows, cols, cell = _cells(lo, hi, n_obstacles)
    s_pt, g_pt = np.asarray(start, dtype=float)[:2], np.asarray(goal, dtype=float)[:2]
    draws = 0
    while draws < budget:
        chosen = rng.permutation(rows * cols)[:n_obstacles]
        shapes, union, dist = [], np.zeros(grid.shape, dtype=bool), None
        for k in chosen:
            base = lo + cell * np.array([k % cols + 0.5, k // cols + 0.5])
            for _ in range(20):
                draws += 1
                members = _random_shape(rng, base + cell * rng.uniform(-0.25, 0.25, size=2), r_scale)
                mask = grid.mask(members)
                if mask.any() and (dist is None or dist[mask].min() >= 1.5 * gap):
                    break
            else:
                break
            shapes.append(members)
            union |= mask
            dist = grid.distance_to(union)
        if len(shapes) < n_obstacles:
            continue
        forms = [_normalized_forms(m, pts).max(axis=0) for m in shapes]
        s2 = float(np.quantile(np.min(forms, axis=0), coverage_rate))
        if not s2 > 0:
            continue
        scaled = [[Ellipse(e.center, e.shape, s2 * e.level) for e in m] for m in shapes]
        if grid.min_gap(scaled) < gap:
            continue
        obstacles = []
        for i, members in enumerate(scaled):
            if len(members) == 1:
                obs = SemiConvexObstacle.ellipse(members[0].center, members[0].shape, members[0].level, i)
            else:
                obs = SemiConvexObstacle.composite(members, i)
            if not certify_semiconvex(obs).ok:
                break
            obstacles.append(obs)
        else:
            field = ObstacleField(tuple(obstacles), wlo, whi)
            if _clear(field, s_pt, clearance) and _clear(field, g_pt, clearance) and \
                    _connected(field, wlo, whi, s_pt, g_pt):
                measured = float(np.mean(field.h_min(pts) < 0))
                if abs(measured - coverage_rate) <= 0.01:
                    return Scenario(obstacles=tuple(obstacles), coverage_rate=float(coverage_rate),
                                    coverage_box=box, **common)
    raise GenerationError(f"no acceptable scenario within {budget} draws (seed {seed})")


class _Grid:
    """Raster of a box used for obstacle separation checks."""

    def __init__(self, lo, hi, cell):
        self.cell = cell
        xs = np.arange(lo[0], hi[0] + cell, cell)
        ys = np.arange(lo[1], hi[1] + cell, cell)
        self.shape = (xs.size, ys.size)
        XX, YY = np.meshgrid(xs, ys, indexing="ij")
        self.pts = np.column_stack([XX.ravel(), YY.ravel()])

    def mask(self, members) -> np.ndarray:
        return np.all(_normalized_forms(members, self.pts) < 1.0, axis=0).reshape(self.shape)

    def distance_to(self, mask) -> np.ndarray:
        return ndimage.distance_transform_edt(~mask) * self.cell

    def min_gap(self, shapes) -> float:
        masks = [self.mask(m) for m in shapes]
        best = np.inf
        for i in range(1, len(masks)):
            if not masks[i].any():
                continue
            union = np.any(masks[:i], axis=0)
            if union.any():
                best = min(best, float(self.distance_to(union)[masks[i]].min()))
        return best


def _clear(field: ObstacleField, p, radius: float) -> bool:
    ang = np.linspace(0, 2 * np.pi, 16, endpoint=False)
    ring = p + radius * np.column_stack([np.cos(ang), np.sin(ang)])
    return bool(np.all(field.h_min(np.vstack([p, ring])) > 0))


def _tuplify(box) -> tuple:
    return (tuple(float(v) for v in box[0]), tuple(float(v) for v in box[1]))


# ---------------------------------------------------------------- outputs

@dataclass
class RunReport:
    scenario: str
    solver: str
    wall_time: float
    cost: float
    collision_free: bool
    iterations: dict = field(default_factory=dict)
    eps: Optional[float] = None
    status: str = ""
    violations: list = field(default_factory=list)

    def to_json(self) -> str:
        d = dict(self.__dict__)
        d["violations"] = [list(v) for v in self.violations]
        return json.dumps(d, indent=1) + "\n"


def trajectory_csv(traj: Trajectory, field: ObstacleField) -> str:
    X, U = traj.states, traj.inputs
    n, m = X.shape[1], U.shape[1]
    hmin = field.h_min(X)
    header = ["t"] + [f"x{i + 1}" for i in range(n)] + [f"u{j + 1}" for j in range(m)] + ["h_min"]
    lines = [",".join(header)]
    for t in range(X.shape[0]):
        u = U[t] if t < U.shape[0] else np.full(m, np.nan)
        vals = [repr(float(v)) for v in np.concatenate([X[t], u, [hmin[t]]])]
        lines.append(",".join([str(t)] + vals))
    return "\n".join(lines) + "\n"


def read_trajectory_csv(text: str, n: int, m: int) -> Trajectory:
    rows = [ln for ln in text.strip().splitlines()]
    if not rows:
        raise ScenarioError("empty trajectory file")
    header = rows[0].split(",")
    expected = ["t"] + [f"x{i + 1}" for i in range(n)] + [f"u{j + 1}" for j in range(m)] + ["h_min"]
    if header != expected:
        raise ScenarioError(f"header {header} does not match {expected}", "line 1")
    data = []
    for k, ln in enumerate(rows[1:], start=2):
        parts = ln.split(",")
        if len(parts) != len(expected):
            raise ScenarioError(f"expected {len(expected)} columns", f"line {k}")
        try:
            data.append([float(p) for p in parts])
        except ValueError:
            raise ScenarioError("non-numeric value", f"line {k}") from None
    A = np.array(data)
    X = A[:, 1:1 + n]
    U = A[:-1, 1 + n:1 + n + m]
    return Trajectory(X, U)
