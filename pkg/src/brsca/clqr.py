"""Primal-dual solver for the LQR with convex quadratic state constraints and input polytopes.

For fixed multipliers the Lagrangian is an unconstrained LQR with a
time-varying quadratic-affine stage cost, so its minimizer follows from one
backward sweep of a value function ``V_t(x) = x' F_t x + S_t' x + r_t``.
Setting the derivative of ``u' R u + mu_t'(G_t u + e_t) + V_{t+1}(A x + B u)``
to zero gives

    M_t = R + B' F_{t+1} B
    K_t = M_t^{-1} B' F_{t+1} A
    l_t = -1/2 M_t^{-1} (B' S_{t+1} + G_t' mu_t)
    F_t = Q_t + A' F_{t+1} A - A' F_{t+1} B K_t
    S_t = q_t + A' S_{t+1} - K_t' (B' S_{t+1} + G_t' mu_t)
    r_t = w_t + mu_t' e_t + r_{t+1} - 1/4 v' M_t^{-1} v,   v = B' S_{t+1} + G_t' mu_t

with the policy ``u_t = -K_t x_t + l_t``, where ``Q_t``, ``q_t``, ``w_t`` collect
the multiplier-weighted surrogate coefficients. The multipliers are then
moved by projected gradient ascent on the dual function.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, Mapping, Union

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from . import _kernels
from .errors import ConvergenceError, DimensionError, NumericalError, StateError, SubproblemInfeasible
from .lti import (
    MAX_COND,
    CostSpec,
    InputConstraint,
    LtiSystem,
    Trajectory,
    _frozen,
    closed_loop_rollout,
    evaluate_cost,
    spd_solve,
)
from .sca import QuadraticSurrogate

log = logging.getLogger(__name__)

Key = tuple  # (t, obstacle_id)
Surrogates = Union[Mapping[Key, QuadraticSurrogate], Iterable[QuadraticSurrogate]]


@dataclass(frozen=True, eq=False)
class DualState:
    """Multipliers: ``lam[(t, id)] >= 0`` per included surrogate, ``mu[t] >= 0`` per input row."""

    lam: Mapping
    mu: np.ndarray

    def __post_init__(self):
        lam = {(int(t), int(i)): float(v) for (t, i), v in dict(self.lam).items()}
        mu = _frozen(np.atleast_2d(self.mu), 2)
        if any(not v >= 0 for v in lam.values()) or np.any(~(mu >= 0)):
            raise StateError("dual variables must be nonnegative")
        object.__setattr__(self, "lam", lam)
        object.__setattr__(self, "mu", mu)

    @classmethod
    def zeros(cls, keys: Iterable[Key], T: int, s: int) -> "DualState":
        return cls({k: 0.0 for k in keys}, np.zeros((T, s)))

    def extended(self, keys: Iterable[Key]) -> "DualState":
        """Same multipliers restricted to ``keys``; new keys start at zero."""
        return DualState({k: self.lam.get(tuple(k), 0.0) for k in keys}, self.mu)

    def min_entry(self) -> float:
        vals = list(self.lam.values()) + list(self.mu.ravel())
        return min(vals) if vals else 0.0

    @property
    def size(self) -> int:
        return len(self.lam) + self.mu.size


@dataclass(frozen=True, eq=False)
class DualGradient:
    lam: dict
    mu: np.ndarray


@dataclass(frozen=True, eq=False)
class ValueFunction:
    F: np.ndarray
    S: np.ndarray
    r: np.ndarray
    K: np.ndarray
    l: np.ndarray
    M: np.ndarray = None

    @property
    def T(self) -> int:
        return self.K.shape[0]

    def value(self, t: int, x) -> float:
        x = np.asarray(x, dtype=float)
        return float(x @ self.F[t] @ x + self.S[t] @ x + self.r[t])

    def control(self, t: int, x) -> np.ndarray:
        return self.l[t] - self.K[t] @ np.asarray(x, dtype=float)


@dataclass(frozen=True, eq=False)
class StageCostAggregate:
    """Per-step ``Q + 1/2 sum lam H``, ``sum lam c`` and ``sum lam d``."""

    Q_lam: np.ndarray
    q: np.ndarray
    w: np.ndarray


class ConstraintBundle:
    """Surrogates stacked into arrays in a fixed key order."""

    def __init__(self, surrogates: Surrogates, T: int, n: int):
        items = surrogates.values() if isinstance(surrogates, Mapping) else surrogates
        by_key = {}
        for s in items:
            if s.key in by_key:
                raise StateError(f"duplicate surrogate for (t, id) = {s.key}")
            if not 1 <= s.t <= T - 1:
                raise DimensionError(f"surrogate time {s.t} outside 1..{T - 1}")
            if s.c.shape != (n,):
                raise DimensionError(f"surrogate {s.key} has dimension {s.c.size}, expected {n}")
            by_key[s.key] = s
        self.keys = tuple(sorted(by_key))
        self.surrogates = tuple(by_key[k] for k in self.keys)
        self.T, self.n = T, n
        N = len(self.keys)
        self.ts = np.array([k[0] for k in self.keys], dtype=np.int64)
        self.H = np.array([s.H for s in self.surrogates]).reshape(N, n, n)
        self.c = np.array([s.c for s in self.surrogates]).reshape(N, n)
        self.d = np.array([s.d for s in self.surrogates]).reshape(N)

    def __len__(self):
        return len(self.keys)

    def lam_vector(self, duals: DualState) -> np.ndarray:
        if set(duals.lam) != set(self.keys):
            missing = set(self.keys) - set(duals.lam)
            extra = set(duals.lam) - set(self.keys)
            raise StateError(f"dual keys do not match constraints (missing {sorted(missing)}, extra {sorted(extra)})")
        return np.array([duals.lam[k] for k in self.keys], dtype=float)

    def aggregate(self, Q: np.ndarray, lam: np.ndarray) -> StageCostAggregate:
        T, n = self.T, self.n
        if _kernels.ENABLED:
            Q_lam, q, w = _kernels.aggregate(np.ascontiguousarray(Q), T, self.ts, self.H, self.c, self.d,
                                             np.ascontiguousarray(lam, dtype=float))
            return StageCostAggregate(Q_lam, q, w)
        Q_lam = np.broadcast_to(Q, (T, n, n)).copy()
        q = np.zeros((T, n))
        w = np.zeros(T)
        if len(self.keys):
            np.add.at(Q_lam, self.ts, 0.5 * lam[:, None, None] * self.H)
            np.add.at(q, self.ts, lam[:, None] * self.c)
            np.add.at(w, self.ts, lam * self.d)
        return StageCostAggregate(Q_lam, q, w)

    def values(self, states: np.ndarray) -> np.ndarray:
        """Surrogate values ``f(x_t)`` at each key's time."""
        if not len(self.keys):
            return np.zeros(0)
        if _kernels.ENABLED:
            return _kernels.surrogate_values(np.ascontiguousarray(states, dtype=float), self.ts, self.H, self.c, self.d)
        X = states[self.ts]
        return 0.5 * np.einsum("ki,kij,kj->k", X, self.H, X) + np.einsum("ki,ki->k", self.c, X) + self.d


def _bundle(surrogates, T, n) -> ConstraintBundle:
    return surrogates if isinstance(surrogates, ConstraintBundle) else ConstraintBundle(surrogates, T, n)


def _check_inputs(sys: LtiSystem, cost: CostSpec, ic: InputConstraint):
    cost.check_against(sys)
    if ic.T != cost.T or ic.m != sys.m:
        raise DimensionError(f"input constraints have T={ic.T}, m={ic.m}; expected T={cost.T}, m={sys.m}")


def _mu_array(duals: DualState, ic: InputConstraint) -> np.ndarray:
    mu = duals.mu
    if ic.s == 0 and mu.size == 0:
        return np.zeros((ic.T, 0))
    if mu.shape != (ic.T, ic.s):
        raise StateError(f"mu has shape {mu.shape}, expected {(ic.T, ic.s)}")
    return mu


def _sweep(A, B, R, P, agg: StageCostAggregate, Gmu: np.ndarray, mue: np.ndarray) -> ValueFunction:
    if _kernels.ENABLED:
        c = np.ascontiguousarray
        F, S, r, K, l, M, bad = _kernels.sweep(c(A), c(B), c(R), c(P), c(agg.Q_lam), c(agg.q), c(agg.w),
                                               c(Gmu, dtype=float), c(mue, dtype=float), MAX_COND)
        if bad >= 0:
            w = np.linalg.eigvalsh(B.T @ F[bad + 1] @ B + R)
            raise NumericalError(f"innovation matrix at t={bad} is not safely PD "
                                 f"(eigenvalues {w[0]:.3g}..{w[-1]:.3g})")
        return ValueFunction(F, S, r, K, l, M)
    return _sweep_numpy(A, B, R, P, agg, Gmu, mue)


def _sweep_numpy(A, B, R, P, agg: StageCostAggregate, Gmu: np.ndarray, mue: np.ndarray) -> ValueFunction:
    T, n, _ = agg.Q_lam.shape
    m = B.shape[1]
    F = np.empty((T + 1, n, n))
    S = np.empty((T + 1, n))
    r = np.empty(T + 1)
    K = np.empty((T, m, n))
    l = np.empty((T, m))
    M = np.empty((T, m, m))
    F[T], S[T], r[T] = P, 0.0, 0.0
    At, Bt = A.T, B.T
    rhs = np.empty((m, n + 1))
    for t in range(T - 1, -1, -1):
        Ft, St = F[t + 1], S[t + 1]
        BF = Bt @ Ft
        Mt = BF @ B + R
        rhs[:, :n] = BF @ A
        v = Bt @ St + Gmu[t]
        rhs[:, n] = v
        sol = spd_solve(Mt, rhs)
        Kt = sol[:, :n]
        lt = -0.5 * sol[:, n]
        Fn = agg.Q_lam[t] + At @ Ft @ A - rhs[:, :n].T @ Kt
        F[t] = 0.5 * (Fn + Fn.T)
        S[t] = agg.q[t] + At @ St - Kt.T @ v
        r[t] = agg.w[t] + mue[t] + r[t + 1] + 0.5 * (v @ lt)
        K[t], l[t], M[t] = Kt, lt, Mt
    return ValueFunction(F, S, r, K, l, M)


def backward_recursion(
    sys: LtiSystem,
    cost: CostSpec,
    surrogates: Surrogates,
    input_cons: InputConstraint,
    duals: DualState,
) -> ValueFunction:
    """Exact value function and affine policy of ``min_u L(u, lam, mu)`` under the dynamics."""
    _check_inputs(sys, cost, input_cons)
    bundle = _bundle(surrogates, cost.T, sys.n)
    lam = bundle.lam_vector(duals)
    mu = _mu_array(duals, input_cons)
    return _solve_fixed(sys, cost, bundle, input_cons, lam, mu)


def _solve_fixed(sys, cost, bundle, ic, lam, mu) -> ValueFunction:
    agg = bundle.aggregate(cost.Q, lam)
    if ic.s:
        Gmu = np.einsum("tsm,ts->tm", ic.G, mu)
        mue = np.einsum("ts,ts->t", ic.e, mu)
    else:
        Gmu = np.zeros((cost.T, sys.m))
        mue = np.zeros(cost.T)
    return _sweep(sys.A, sys.B, cost.R, cost.P, agg, Gmu, mue)


def stage_cost_aggregate(cost: CostSpec, surrogates: Surrogates, duals: DualState, n: int) -> StageCostAggregate:
    bundle = _bundle(surrogates, cost.T, n)
    return bundle.aggregate(cost.Q, bundle.lam_vector(duals))


def lagrangian(traj: Trajectory, cost: CostSpec, surrogates: Surrogates, input_cons: InputConstraint,
               duals: DualState) -> float:
    """``J(u) + sum lam f(x_t) + sum mu_t'(G_t u_t + e_t)`` evaluated on a trajectory."""
    bundle = _bundle(surrogates, cost.T, traj.states.shape[1])
    lam = bundle.lam_vector(duals)
    mu = _mu_array(duals, input_cons)
    val = evaluate_cost(traj, cost) + lam @ bundle.values(traj.states)
    if input_cons.s:
        val += float(np.sum(mu * input_cons.values(traj.inputs)))
    return float(val)


def dual_value(sys, cost, surrogates, input_cons, duals, x0) -> float:
    """``D(lam, mu) = min_u L`` via the backward sweep."""
    vf = backward_recursion(sys, cost, surrogates, input_cons, duals)
    return vf.value(0, np.asarray(x0, dtype=float))


def dual_gradients(traj: Trajectory, surrogates: Surrogates, input_cons: InputConstraint) -> DualGradient:
    """Constraint values at the inner minimizer: ``f(x_t)`` per surrogate and ``G u + e`` per step."""
    bundle = _bundle(surrogates, traj.T, traj.states.shape[1])
    fvals = bundle.values(traj.states)
    mu_grad = input_cons.values(traj.inputs) if input_cons.s else np.zeros((traj.T, 0))
    return DualGradient(dict(zip(bundle.keys, map(float, fvals))), mu_grad)


def _responses(A, B, vf: ValueFunction, tx, gx, tu, gu):
    """Linear response of the inner minimizer to unit linear cost perturbations.

    Column ``j < len(tx)`` adds ``gx[j]' x`` to the stage cost at time
    ``tx[j]``; the remaining columns add ``gu[k]' u`` at time ``tu[k]``. The
    gains of ``vf`` (hence the curvature of the current Lagrangian) are fixed.
    Returns the state and input responses, shapes ``(T+1, n, N)`` and
    ``(T, m, N)``.
    """
    T, m, n = vf.K.shape
    Nx, Nu = len(tx), len(tu)
    N = Nx + Nu
    Qx = np.zeros((T + 1, n, N))
    Wu = np.zeros((T, m, N))
    if Nx:
        Qx[tx, :, np.arange(Nx)] = gx
    if Nu:
        Wu[tu, :, Nx + np.arange(Nu)] = gu
    if _kernels.ENABLED:
        c = np.ascontiguousarray
        return _kernels.responses(c(A), c(B), c(vf.K), c(vf.M), Qx, Wu)
    S = np.zeros((n, N))
    L = np.empty((T, m, N))
    At, Bt = A.T, B.T
    for t in range(T - 1, -1, -1):
        v = Bt @ S + Wu[t]
        L[t] = -0.5 * np.linalg.solve(vf.M[t], v)
        S = Qx[t] + At @ S - vf.K[t].T @ v
    DX = np.zeros((T + 1, n, N))
    DU = np.empty((T, m, N))
    for t in range(T):
        DU[t] = L[t] - vf.K[t] @ DX[t]
        DX[t + 1] = A @ DX[t] + B @ DU[t]
    return DX, DU


def _hessian_columns(sys, bundle, ic, vf, traj, cols=None) -> np.ndarray:
    """Dual Hessian columns ``cols`` (all of them by default), every row included."""
    X = traj.states
    tx = bundle.ts
    gx = (np.einsum("kij,kj->ki", bundle.H, X[tx]) + bundle.c) if len(tx) else np.zeros((0, sys.n))
    if ic.s:
        tu = np.repeat(np.arange(ic.T), ic.s)
        gu = ic.G.reshape(-1, ic.m)
    else:
        tu, gu = np.zeros(0, dtype=int), np.zeros((0, sys.m))
    ctx, cgx, ctu, cgu = tx, gx, tu, gu
    if cols is not None:
        cols = np.asarray(cols, dtype=int)
        nl = len(tx)
        sx, su = cols[cols < nl], cols[cols >= nl] - nl
        ctx, cgx, ctu, cgu = tx[sx], gx[sx], tu[su], gu[su]
    DX, DU = _responses(sys.A, sys.B, vf, ctx, cgx, ctu, cgu)
    rows_x = np.einsum("ki,kiN->kN", gx, DX[tx]) if len(tx) else np.zeros((0, DX.shape[2]))
    rows_u = np.einsum("ki,kiN->kN", gu, DU[tu]) if len(tu) else np.zeros((0, DX.shape[2]))
    return np.vstack([rows_x, rows_u])


def _hessian(sys, bundle, ic, vf, traj, subset=None) -> np.ndarray:
    """Dual Hessian, optionally restricted to the multipliers indexed by ``subset``."""
    Hd = _hessian_columns(sys, bundle, ic, vf, traj, subset)
    if subset is not None:
        Hd = Hd[np.asarray(subset, dtype=int)]
    return 0.5 * (Hd + Hd.T)


def dual_hessian(sys, cost, surrogates, input_cons, duals, x0) -> np.ndarray:
    """Hessian of the dual function, ordered as the sorted surrogate keys then ``mu`` row-major."""
    _check_inputs(sys, cost, input_cons)
    bundle = _bundle(surrogates, cost.T, sys.n)
    vf = backward_recursion(sys, cost, bundle, input_cons, duals)
    traj = closed_loop_rollout(sys, vf.K, vf.l, np.asarray(x0, dtype=float))
    return _hessian(sys, bundle, input_cons, vf, traj)


def _row_scales(cols: np.ndarray, relevant: np.ndarray) -> np.ndarray:
    """Inverse Gershgorin row sums over the coordinates that can move.

    ``cols`` holds the Hessian columns of the movable coordinates only. Rows
    that cannot move keep a zero step under projection whatever their scale.
    """
    rows = np.abs(cols).sum(axis=1)
    floor = 1e-12 + 1e-9 * (rows[relevant].max() if relevant.any() else 0.0)
    return 1.0 / np.maximum(rows, floor)


def _jacobi_scales(cols: np.ndarray, relevant: np.ndarray) -> np.ndarray:
    """Inverse diagonal divided by the top eigenvalue of the Jacobi-scaled movable block.

    Tighter than Gershgorin sums when many multipliers are coupled, with the
    same guarantee: ``alpha0 <= 1`` is a safe step on the local quadratic model.
    """
    out = _row_scales(cols, relevant)
    idx = np.flatnonzero(relevant)
    if idx.size == 0:
        return out
    # the dual Hessian is negative semidefinite
    block = -cols[idx]
    block = 0.5 * (block + block.T)
    d = np.maximum(np.diag(block), 1e-12 + 1e-9 * np.diag(block).max())
    root = 1.0 / np.sqrt(d)
    top = np.linalg.eigvalsh(root[:, None] * block * root[None, :]).max()
    if top > 1e-12:
        out[idx] = 1.0 / (d * top)
    return out


@dataclass(frozen=True)
class StepSchedule:
    """Diminishing step ``alpha_k = alpha0 / (1 + k / decay)``.

    ``decay = 1`` is the harmonic schedule ``alpha0 / (1 + k)``; any finite
    ``decay`` keeps ``sum alpha_k = inf`` and ``sum alpha_k^2 < inf``.
    ``alpha0_mu`` sets the input-multiplier block separately.
    """

    alpha0: float = 1.0
    decay: float = 500.0
    alpha0_mu: float = None

    def __post_init__(self):
        if not (self.alpha0 > 0 and self.decay > 0) or (self.alpha0_mu is not None and not self.alpha0_mu > 0):
            raise ValueError("step sizes and decay must be positive")

    def step(self, k: int) -> tuple:
        scale = 1.0 / (1.0 + k / self.decay)
        mu0 = self.alpha0 if self.alpha0_mu is None else self.alpha0_mu
        return self.alpha0 * scale, mu0 * scale

    def halved(self) -> "StepSchedule":
        return StepSchedule(
            self.alpha0 / 2, self.decay, None if self.alpha0_mu is None else self.alpha0_mu / 2
        )


@dataclass(frozen=True, eq=False)
class AscentResult:
    trajectory: Trajectory
    duals: DualState
    value_function: ValueFunction
    cost: float
    iterations: int
    dual_value: float
    converged: bool = True
    history: list = field(default_factory=list, repr=False)


def dual_ascent(
    sys: LtiSystem,
    cost: CostSpec,
    surrogates: Surrogates,
    input_cons: InputConstraint,
    x0,
    init: DualState = None,
    steps: StepSchedule = None,
    eps: float = 0.7,
    max_iter: int = 5000,
    record: bool = False,
    precondition: Union[bool, str] = True,
    refresh: int = 25,
    feas_tol: float = None,
    ridge: float = 1e-6,
    armijo: float = 1e-4,
    dual_cap: float = None,
) -> AscentResult:
    """Projected dual gradient ascent with an exact inner solve per iterate.

    Stops when two consecutive primal iterates differ in cost by at most
    ``eps``, or as soon as a projected step leaves the multipliers unchanged.
    Raises ``ConvergenceError`` (carrying the iterate with the highest dual
    value) after ``max_iter`` inner solves.

    With ``precondition`` each multiplier gets its own step
    ``alpha_k / rho_i``, where ``rho_i`` is the Gershgorin row sum of the dual
    Hessian over the multipliers that can currently move; ``alpha0`` is then
    dimensionless and ``alpha0 <= 1`` is a safe step on the local quadratic
    model. The scaling is refreshed every ``refresh`` iterations and whenever
    a new multiplier becomes movable. ``precondition="jacobi"`` instead
    divides by the diagonal and by the top eigenvalue of the Jacobi-scaled
    movable block, which allows much longer steps when many multipliers are
    coupled. ``"newton"`` takes projected active-set Newton steps with
    backtracking.

    ``feas_tol`` adds a second stopping condition: the largest constraint
    residual must also be at most ``feas_tol``.
    """
    if not eps > 0:
        raise ValueError("eps must be positive")
    _check_inputs(sys, cost, input_cons)
    steps = steps or StepSchedule()
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    bundle = _bundle(surrogates, cost.T, sys.n)
    init = init or DualState.zeros(bundle.keys, cost.T, input_cons.s)
    lam = bundle.lam_vector(init)
    mu = np.array(_mu_array(init, input_cons))
    has_duals = lam.size + mu.size > 0

    def evaluate(lam, mu):
        vf = _solve_fixed(sys, cost, bundle, input_cons, lam, mu)
        traj = closed_loop_rollout(sys, vf.K, vf.l, x0)
        fv = bundle.values(traj.states)
        gv = input_cons.values(traj.inputs) if input_cons.s else mu
        return vf, traj, evaluate_cost(traj, cost), vf.value(0, x0), fv, gv

    history = []
    best = None
    J_prev = None
    scales, scaled_at, scaled_for = None, 0, None
    factor = None
    pending = None
    cap = np.inf if dual_cap is None else float(dual_cap)
    k = 0
    while k < max_iter:
        vf, traj, J, D, fv, gv = pending or evaluate(lam, mu)
        pending = None
        k += 1
        worst = float(max(fv.max(initial=-np.inf), gv.max(initial=-np.inf)))
        # residuals of multipliers pinned at the cap are absorbed by the penalty
        free_worst = float(max(fv[lam < cap].max(initial=-np.inf), gv[mu < cap].max(initial=-np.inf)))
        if record:
            history.append({"iteration": k, "cost": J, "dual": D, "max_violation": worst})
        if best is None or D > best[0]:
            best = (D, traj, lam.copy(), mu.copy(), vf, J, k, D)
        done = not has_duals or (J_prev is not None and abs(J - J_prev) <= eps)
        if done and has_duals and feas_tol is not None:
            done = free_worst <= feas_tol
        if not done:
            a_lam, a_mu = steps.step(k - 1)
            if precondition == "newton":
                g = np.concatenate([fv, gv.ravel()])
                z = np.concatenate([lam, mu.ravel()])
                free = np.flatnonzero(((z > 0) | (g > 0)) & ((z < cap) | (g < 0)))
                if factor is None or k - scaled_at > refresh or not np.array_equal(free, factor[1]):
                    Hs = -_hessian(sys, bundle, input_cons, vf, traj, subset=free)
                    reg = 1e-12 + ridge * (np.diag(Hs).max() if free.size else 0.0)
                    factor = (cho_factor(Hs + reg * np.eye(free.size)) if free.size else None, free)
                    scaled_at = k
                d = np.zeros_like(g)
                if free.size:
                    d[free] = cho_solve(factor[0], g[free])
                # backtrack until the dual value rises by a fraction of its linear prediction
                t = a_lam
                while True:
                    z_try = np.clip(z + t * d, 0.0, cap)
                    lam_new, mu_new = z_try[:lam.size], z_try[lam.size:].reshape(mu.shape)
                    if np.array_equal(z_try, z) or k >= max_iter:
                        break
                    pending = evaluate(lam_new, mu_new)
                    if pending[3] >= D + armijo * float(g @ (z_try - z)):
                        break
                    k += 1
                    t *= 0.5
                    if t < 1e-10:
                        lam_new, mu_new, pending = lam, mu, None
                        break
            else:
                d_lam, d_mu = fv, gv
                if precondition:
                    movable = np.concatenate([(lam > 0) | (fv > 0), ((mu > 0) | (gv > 0)).ravel()])
                    if scales is None or k - 1 - scaled_at >= refresh or np.any(movable & ~scaled_for):
                        cols = _hessian_columns(sys, bundle, input_cons, vf, traj, np.flatnonzero(movable))
                        scales = (_jacobi_scales if precondition == "jacobi" else _row_scales)(cols, movable)
                        scaled_at, scaled_for = k - 1, movable
                        s_lam, s_mu = scales[:lam.size], scales[lam.size:].reshape(mu.shape)
                    d_lam, d_mu = s_lam * fv, s_mu * gv
                lam_new = np.clip(lam + a_lam * d_lam, 0.0, cap)
                mu_new = np.clip(mu + a_mu * d_mu, 0.0, cap) if input_cons.s else mu
            done = np.array_equal(lam_new, lam) and np.array_equal(mu_new, mu)
        if done:
            duals = DualState(dict(zip(bundle.keys, lam)), mu)
            res = AscentResult(traj, duals, vf, J, k, D, worst <= (np.inf if feas_tol is None else feas_tol), history)
            if not res.converged:
                raise SubproblemInfeasible(
                    f"penalized solution still violates constraints by {worst:.3g}", best=res)
            return res
        lam, mu = lam_new, mu_new
        J_prev = J

    _, traj, lam_b, mu_b, vf, J, it, D = best
    res = AscentResult(traj, DualState(dict(zip(bundle.keys, lam_b)), mu_b), vf, J, it, D, False, history)
    raise ConvergenceError(f"dual ascent did not settle within {max_iter} iterations", best=res)


@dataclass(frozen=True)
class KKTReport:
    max_constraint: float
    slackness: float
    dual_min: float

    @property
    def primal_violation(self) -> float:
        return max(0.0, self.max_constraint)


def kkt_residuals(traj: Trajectory, duals: DualState, surrogates: Surrogates,
                  input_cons: InputConstraint) -> KKTReport:
    bundle = _bundle(surrogates, traj.T, traj.states.shape[1])
    lam = bundle.lam_vector(duals)
    fv = bundle.values(traj.states)
    worst, slack = -np.inf, 0.0
    if fv.size:
        worst = fv.max()
        slack = np.abs(lam * fv).max()
    if input_cons.s:
        gv = input_cons.values(traj.inputs)
        mu = _mu_array(duals, input_cons)
        worst = max(worst, gv.max())
        slack = max(slack, np.abs(mu * gv).max())
    return KKTReport(float(worst), float(slack), float(duals.min_entry()))


@dataclass(frozen=True, eq=False)
class StabilityReport:
    radii: np.ndarray
    max_radius: float
    tail_radius: float

    @property
    def passed(self) -> bool:
        return self.tail_radius < 1.0


def stability_check(sys: LtiSystem, vf: ValueFunction) -> StabilityReport:
    """Spectral radius of ``A - B K_t`` at every step; PASS is judged on the final gain."""
    radii = np.array([np.abs(np.linalg.eigvals(sys.A - sys.B @ K)).max() for K in vf.K])
    return StabilityReport(radii, float(radii.max()), float(radii[-1]))
