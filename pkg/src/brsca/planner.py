"""Backward receding SCA: the outer loop that decides which obstacle constraints to
include and where to linearize them.

Constraints are added only once the current trajectory violates them. A
violated constraint is convexified about the closest earlier state that is
still strictly outside that obstacle, so its convex search region is never
empty; constraints the trajectory already satisfies are re-linearized about
the current state.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from .clqr import DualState, StepSchedule, dual_ascent
from .errors import ConvergenceError, ReferencePointError, SubproblemInfeasible
from .lti import CostSpec, InputConstraint, LtiSystem, Trajectory
from .obstacles import (
    Composite,
    Ellipse,
    ObstacleField,
    SemiConvexObstacle,
    check_trajectory_safe,
)
from .sca import QuadraticSurrogate, convexify

log = logging.getLogger(__name__)

FEASIBLE = "FEASIBLE"
INFEASIBLE = "INFEASIBLE"


@dataclass(frozen=True)
class BrscaConfig:
    eps: float = 0.7
    # cost-stagnation tolerance of the outer loop; None follows eps
    outer_eps: Optional[float] = None
    max_outer: int = 50
    max_inner: int = 10
    max_dual_iter: int = 60
    steps: StepSchedule = field(default_factory=lambda: StepSchedule(1.9, 500.0))
    # "backward" is BRSCA; "current" linearizes about the violating state itself (iSCA)
    reference_rule: str = "backward"
    fallback_margin: float = 1e-3
    # inner solves stop only once every surrogate and input residual is below
    # feas_tol; constraints are tightened by margin so such a point is feasible
    feas_tol: float = 1e-2
    margin: float = 1e-2
    # multipliers are boxed to [0, dual_cap]; an infeasible convex subproblem
    # then returns its exact-penalty solution instead of diverging
    dual_cap: float = 1e3
    # passed to dual_ascent: "jacobi", True (Gershgorin scaling), False, or "newton"
    precondition: Union[bool, str] = "jacobi"
    warm_start: bool = True

    @property
    def outer_tol(self) -> float:
        return self.eps if self.outer_eps is None else self.outer_eps

    def __post_init__(self):
        if self.reference_rule not in ("backward", "current"):
            raise ValueError(f"unknown reference rule {self.reference_rule!r}")


class ActiveConstraintSet:
    """Included ``(t, obstacle_id)`` pairs with their latest surrogates; only ever grows."""

    def __init__(self):
        self.entries: dict = {}
        self.generation = 0

    def __len__(self):
        return len(self.entries)

    def __contains__(self, key):
        return tuple(key) in self.entries

    @property
    def keys(self) -> list:
        return sorted(self.entries)

    def include(self, pairs) -> list:
        added = []
        for key in pairs:
            key = (int(key[0]), int(key[1]))
            if key not in self.entries:
                self.entries[key] = None
                added.append(key)
        return added

    def update(self, surrogates) -> None:
        for s in surrogates:
            if s.key not in self.entries:
                raise KeyError(s.key)
            self.entries[s.key] = s
        self.generation += 1

    @property
    def surrogates(self) -> list:
        return [self.entries[k] for k in self.keys]


@dataclass
class IterationRecord:
    outer: int
    inner: int
    violations: list
    added: list
    references: dict
    dual_iterations: int
    cost: float
    converged: bool
    fallbacks: list = field(default_factory=list)
    retried: bool = False


@dataclass(frozen=True, eq=False)
class BrscaResult:
    trajectory: Trajectory
    K: np.ndarray
    l: np.ndarray
    duals: DualState
    cost: float
    iterations: int
    status: str
    violations: list
    log: list
    converged: bool
    dual_iterations: int
    active: list

    @property
    def feasible(self) -> bool:
        return self.status == FEASIBLE


def detect_violations(field: ObstacleField, traj: Trajectory) -> list:
    """``(t, id)`` with ``h(x_t) <= 0`` for ``t`` in ``1..T-1``, ordered by t then id."""
    X = traj.states
    T = X.shape[0] - 1
    if T < 2 or not field.obstacles:
        return []
    Hm = field.h_matrix(X[1:T])
    ids = np.array(field.ids)
    order = np.argsort(ids, kind="stable")
    return [(k + 1, int(ids[j])) for k in range(Hm.shape[0]) for j in order if Hm[k, j] <= 0.0]


def _radial_candidates(e: Ellipse, x: np.ndarray, level: float):
    d = x - e.center
    q = float(d @ e.shape @ d)
    if not q > 1e-14:
        return None
    s = np.sqrt((e.level + level) / q)
    return e.center + s * d


def project_outside(obs: SemiConvexObstacle, x, margin: float = 1e-3) -> np.ndarray:
    """Push ``x`` radially out of the obstacle onto ``{h = margin}``.

    For composites each member is tried and the candidate closest to ``x`` wins;
    every candidate has ``h >= margin`` because ``h`` is the member max.
    """
    x = np.asarray(x, dtype=float)
    members = obs.geometry.members if isinstance(obs.geometry, Composite) else (obs.geometry,)
    best = None
    for e in members:
        cand = _radial_candidates(e, x, margin)
        if cand is None:
            continue
        dist = np.linalg.norm(cand - x)
        if best is None or dist < best[0]:
            best = (dist, cand)
    if best is None or not obs.geometry.h(best[1]) > 0:
        raise ReferencePointError(f"cannot project a point out of obstacle {obs.id} (point at its center)")
    return best[1]


def select_reference(field: ObstacleField, traj: Trajectory, violation, margin: float = 1e-3):
    """Closest earlier state strictly outside the violated obstacle.

    Returns ``(x_ref, t_ref)``; ``t_ref`` is ``None`` when no earlier state is
    feasible and the violating state was projected out radially instead.
    """
    t, oid = int(violation[0]), int(violation[1])
    obs = field.by_id(oid)
    X = traj.states
    hv = np.array([obs.geometry.h(X[tau]) for tau in range(t)])
    feasible = np.flatnonzero(hv > 0)
    if feasible.size:
        tau = int(feasible[-1])
        return X[tau].copy(), tau
    return project_outside(obs, X[t], margin), None


def _solve_inner(sys, cost, surrogates, ic, x0, duals, config, record):
    """Dual ascent with one retry at half the step size."""
    keys = [s.key for s in surrogates]
    init = duals.extended(keys) if (config.warm_start and duals is not None) else None
    kwargs = dict(eps=config.eps, max_iter=config.max_dual_iter, feas_tol=config.feas_tol,
                  dual_cap=config.dual_cap, precondition=config.precondition)
    try:
        return dual_ascent(sys, cost, surrogates, ic, x0, init=init, steps=config.steps, **kwargs), True
    except SubproblemInfeasible as err:
        # a smaller step cannot make an empty feasible set nonempty
        log.info("convex subproblem infeasible; continuing from its penalized solution")
        return err.best, False
    except ConvergenceError as err:
        record.retried = True
        # resume from the best multipliers found rather than repeating the same climb
        init = err.best.duals
    try:
        return dual_ascent(sys, cost, surrogates, ic, x0, init=init, steps=config.steps.halved(), **kwargs), True
    except ConvergenceError as err:
        log.info("inner solve hit its cap twice; continuing from the best iterate")
        return err.best, False


def _build_surrogates(field, active, traj, config, record):
    X = traj.states
    out = []
    for key in active.keys:
        t, oid = key
        obs = field.by_id(oid)
        if obs.geometry.h(X[t]) > 0 or config.reference_rule == "current":
            x_ref = X[t]
        else:
            x_ref, t_ref = select_reference(field, traj, key, config.fallback_margin)
            record.references[key] = t_ref
            if t_ref is None:
                record.fallbacks.append(key)
        s = convexify(obs, x_ref, t)
        if config.margin:
            s = s.shifted(config.margin)
        out.append(s)
    active.update(out)
    return out


def brsca_solve(
    sys: LtiSystem,
    cost: CostSpec,
    field: ObstacleField,
    input_cons: InputConstraint,
    x0,
    config: BrscaConfig = None,
) -> BrscaResult:
    config = config or BrscaConfig()
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    if config.margin and input_cons.s:
        input_cons = InputConstraint(input_cons.G, input_cons.e + config.margin, check=False)
    entry = IterationRecord(0, 0, [], [], {}, 0, float("nan"), True)
    seed, ok = _solve_inner(sys, cost, [], input_cons, x0, None, config, entry)
    entry.dual_iterations, entry.cost, entry.converged = seed.iterations, seed.cost, ok
    audit = [entry]
    traj, J, duals, vf = seed.trajectory, seed.cost, seed.duals, seed.value_function
    total_dual = seed.iterations
    active = ActiveConstraintSet()
    last_delta = 0.0
    converged = False
    k = 0
    for k in range(1, config.max_outer + 1):
        viol = detect_violations(field, traj)
        added = active.include(viol)
        if not viol and abs(last_delta) <= config.outer_tol:
            converged = True
            k -= 1
            break
        J_base = np.inf
        for j in range(1, config.max_inner + 1):
            rec = IterationRecord(k, j, viol if j == 1 else [], added if j == 1 else [], {}, 0, 0.0, True)
            surrogates = _build_surrogates(field, active, traj, config, rec)
            res, ok = _solve_inner(sys, cost, surrogates, input_cons, x0, duals, config, rec)
            rec.dual_iterations, rec.cost, rec.converged = res.iterations, res.cost, ok
            total_dual += res.iterations
            audit.append(rec)
            last_delta = res.cost - J
            traj, J, duals, vf = res.trajectory, res.cost, res.duals, res.value_function
            if not (J < J_base - config.outer_tol):
                break
            J_base = J
    if not converged and not detect_violations(field, traj) and abs(last_delta) <= config.outer_tol:
        # the check the next outer iteration would have opened with
        converged = True
    violations = check_trajectory_safe(field, traj)
    # an exhausted outer budget is never reported as a success
    status = FEASIBLE if converged and not violations else INFEASIBLE
    if not converged:
        log.warning("BRSCA stopped after %d outer iterations without meeting its termination rule", k)
    return BrscaResult(
        trajectory=traj, K=vf.K, l=vf.l, duals=duals, cost=J, iterations=k, status=status,
        violations=violations, log=audit, converged=converged, dual_iterations=total_dual,
        active=active.keys,
    )
