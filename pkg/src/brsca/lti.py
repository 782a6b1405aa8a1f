"""Discrete-time LTI plant, quadratic cost, rollouts and the unconstrained Riccati sweep."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np
from scipy.optimize import linprog

from . import _kernels
from .errors import DimensionError, NumericalError

if TYPE_CHECKING:
    from .clqr import ValueFunction

PBH_TOL = 1e-8
PSD_TOL = 1e-10
MAX_COND = 1e12
CONSISTENCY_TOL = 1e-9


def _frozen(a, ndim=None) -> np.ndarray:
    arr = np.array(a, dtype=float)
    if ndim is not None and arr.ndim != ndim:
        raise DimensionError(f"expected a {ndim}-d array, got shape {arr.shape}")
    arr.flags.writeable = False
    return arr


def _sym_min_eig(M: np.ndarray) -> float:
    return float(np.linalg.eigvalsh(0.5 * (M + M.T)).min())


def _pbh_ok(A: np.ndarray, B: np.ndarray, tol: float = PBH_TOL) -> bool:
    """Eigenvalue-rank test on the modes of ``A`` outside the open unit disk."""
    n = A.shape[0]
    for z in np.linalg.eigvals(A):
        if abs(z) >= 1.0 - tol:
            W = np.hstack([A - z * np.eye(n), B])
            if np.linalg.matrix_rank(W, tol=tol * max(1.0, np.abs(W).max())) < n:
                return False
    return True


def psd_sqrt(Q: np.ndarray) -> np.ndarray:
    w, V = np.linalg.eigh(0.5 * (Q + Q.T))
    return (V * np.sqrt(np.clip(w, 0.0, None))) @ V.T


@dataclass(frozen=True, eq=False)
class LtiSystem:
    """The plant ``x[t+1] = A x[t] + B u[t]``."""

    A: np.ndarray
    B: np.ndarray
    check: bool = field(default=True, repr=False, compare=False)

    def __post_init__(self):
        A = _frozen(self.A, 2)
        B = _frozen(self.B, 2) if np.ndim(self.B) == 2 else _frozen(np.reshape(self.B, (-1, 1)))
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "B", B)
        n, m = B.shape
        if A.shape != (n, n) or n < 1 or m < 1:
            raise DimensionError(f"A is {A.shape} but B is {B.shape}")
        if not (np.all(np.isfinite(A)) and np.all(np.isfinite(B))):
            raise ValueError("A and B must be finite")
        if self.check and not self.is_stabilizable():
            raise ValueError("(A, B) is not stabilizable")

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    def is_stabilizable(self) -> bool:
        return _pbh_ok(self.A, self.B)

    def is_detectable(self, Q: np.ndarray) -> bool:
        """Detectability of ``(A, sqrt(Q))`` via PBH on the dual pair."""
        return _pbh_ok(self.A.T, psd_sqrt(np.asarray(Q, dtype=float)).T)

    @classmethod
    def double_integrator(cls, dt: float, dims: int = 2) -> "LtiSystem":
        """Positions first, then velocities; inputs are accelerations."""
        I = np.eye(dims)
        Z = np.zeros((dims, dims))
        A = np.block([[I, dt * I], [Z, I]])
        B = np.vstack([0.5 * dt**2 * I, dt * I])
        return cls(A, B)


@dataclass(frozen=True, eq=False)
class CostSpec:
    """Weights of ``x_T' P x_T + sum_t x_t' Q x_t + u_t' R u_t`` over ``T`` steps."""

    Q: np.ndarray
    R: np.ndarray
    P: np.ndarray
    T: int

    def __post_init__(self):
        Q, R, P = (_frozen(np.atleast_2d(M), 2) for M in (self.Q, self.R, self.P))
        for name, M in (("Q", Q), ("R", R), ("P", P)):
            if M.shape[0] != M.shape[1]:
                raise DimensionError(f"{name} must be square, got {M.shape}")
            if not np.allclose(M, M.T, atol=1e-12, rtol=1e-10):
                raise ValueError(f"{name} must be symmetric")
        if Q.shape != P.shape:
            raise DimensionError("Q and P must share a shape")
        if _sym_min_eig(Q) < -PSD_TOL or _sym_min_eig(P) < -PSD_TOL:
            raise ValueError("Q and P must be positive semidefinite")
        if _sym_min_eig(R) <= PSD_TOL:
            raise ValueError("R must be positive definite")
        if int(self.T) != self.T or self.T < 1:
            raise ValueError("horizon T must be a positive integer")
        object.__setattr__(self, "Q", Q)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "P", P)
        object.__setattr__(self, "T", int(self.T))

    def check_against(self, sys: LtiSystem):
        if self.Q.shape != (sys.n, sys.n) or self.R.shape != (sys.m, sys.m):
            raise DimensionError(
                f"cost weights {self.Q.shape}/{self.R.shape} do not fit n={sys.n}, m={sys.m}"
            )


@dataclass(frozen=True, eq=False)
class InputConstraint:
    """Time-varying polyhedral input set ``G[t] u + e[t] <= 0``.

    ``G`` has shape ``(T, s, m)`` and ``e`` has shape ``(T, s)``; ``s`` may be 0.
    """

    G: np.ndarray
    e: np.ndarray
    check: bool = field(default=True, repr=False, compare=False)

    def __post_init__(self):
        G = _frozen(self.G, 3)
        e = _frozen(self.e, 2)
        if G.shape[:2] != e.shape:
            raise DimensionError(f"G is {G.shape} but e is {e.shape}")
        object.__setattr__(self, "G", G)
        object.__setattr__(self, "e", e)
        if self.check and self.s > 0:
            self._check_nonempty()

    @property
    def T(self) -> int:
        return self.G.shape[0]

    @property
    def s(self) -> int:
        return self.G.shape[1]

    @property
    def m(self) -> int:
        return self.G.shape[2]

    def _check_nonempty(self):
        seen = set()
        for t in range(self.T):
            key = (self.G[t].tobytes(), self.e[t].tobytes())
            if key in seen:
                continue
            seen.add(key)
            res = linprog(
                np.zeros(self.m), A_ub=self.G[t], b_ub=-self.e[t],
                bounds=[(None, None)] * self.m, method="highs",
            )
            if res.status == 2:
                raise ValueError(f"input set at t={t} is empty")

    def values(self, inputs: np.ndarray) -> np.ndarray:
        """Rows of ``G[t] u[t] + e[t]``, shape ``(T, s)``."""
        return np.einsum("tsm,tm->ts", self.G, inputs) + self.e

    @classmethod
    def none(cls, m: int, T: int) -> "InputConstraint":
        return cls(np.zeros((T, 0, m)), np.zeros((T, 0)), check=False)

    @classmethod
    def box(cls, bound, m: int, T: int) -> "InputConstraint":
        """``|u_j| <= bound_j``; rows ordered ``+e_1 .. +e_m, -e_1 .. -e_m``.

        ``bound`` may be a scalar, an ``m``-vector, or a ``(T, m)`` array for
        time-varying limits.
        """
        b = np.broadcast_to(np.asarray(bound, dtype=float), (T, m))
        if np.any(b < 0):
            raise ValueError("box bounds must be nonnegative")
        I = np.eye(m)
        G = np.broadcast_to(np.vstack([I, -I]), (T, 2 * m, m)).copy()
        e = -np.hstack([b, b])
        return cls(G, e, check=False)

    @classmethod
    def constant(cls, G, e, T: int) -> "InputConstraint":
        G = np.atleast_2d(np.asarray(G, dtype=float))
        e = np.asarray(e, dtype=float).reshape(-1)
        return cls(np.broadcast_to(G, (T,) + G.shape).copy(), np.broadcast_to(e, (T, e.size)).copy())


@dataclass(frozen=True, eq=False)
class Trajectory:
    states: np.ndarray
    inputs: np.ndarray

    def __post_init__(self):
        X = _frozen(self.states, 2)
        U = _frozen(np.reshape(self.inputs, (len(self.inputs), -1)) if np.ndim(self.inputs) == 1
                    else self.inputs, 2)
        if X.shape[0] != U.shape[0] + 1:
            raise DimensionError(f"{X.shape[0]} states for {U.shape[0]} inputs")
        object.__setattr__(self, "states", X)
        object.__setattr__(self, "inputs", U)

    @property
    def T(self) -> int:
        return self.inputs.shape[0]

    def consistency_error(self, sys: LtiSystem) -> float:
        X, U = self.states, self.inputs
        if U.shape[0] == 0:
            return 0.0
        pred = X[:-1] @ sys.A.T + U @ sys.B.T
        return float(np.abs(X[1:] - pred).max())

    def is_consistent(self, sys: LtiSystem, tol: float = CONSISTENCY_TOL) -> bool:
        return self.consistency_error(sys) <= tol


def rollout(sys: LtiSystem, x0, inputs) -> Trajectory:
    x0 = np.asarray(x0, dtype=float).reshape(-1)
    U = np.asarray(inputs, dtype=float)
    if U.ndim == 1 and sys.m == 1:
        U = U.reshape(-1, 1)
    if x0.size != sys.n or U.ndim != 2 or U.shape[1] != sys.m:
        raise DimensionError(f"x0 {x0.shape} / inputs {U.shape} do not fit n={sys.n}, m={sys.m}")
    X = np.empty((U.shape[0] + 1, sys.n))
    X[0] = x0
    for t in range(U.shape[0]):
        X[t + 1] = sys.A @ X[t] + sys.B @ U[t]
    return Trajectory(X, U)


def closed_loop_rollout(sys: LtiSystem, K: np.ndarray, l: np.ndarray, x0) -> Trajectory:
    """Apply ``u[t] = -K[t] x[t] + l[t]`` from ``x0``."""
    x = np.asarray(x0, dtype=float).reshape(-1)
    if x.size != sys.n:
        raise DimensionError(f"x0 has length {x.size}, expected {sys.n}")
    if _kernels.ENABLED:
        X, U = _kernels.rollout(sys.A, sys.B, np.ascontiguousarray(K, dtype=float),
                                np.ascontiguousarray(l, dtype=float), x)
        return Trajectory(X, U)
    T = K.shape[0]
    X = np.empty((T + 1, sys.n))
    U = np.empty((T, sys.m))
    X[0] = x
    A, B = sys.A, sys.B
    for t in range(T):
        u = l[t] - K[t] @ x
        x = A @ x + B @ u
        U[t] = u
        X[t + 1] = x
    return Trajectory(X, U)


def evaluate_cost(traj: Trajectory, cost: CostSpec) -> float:
    X, U = traj.states, traj.inputs
    n = cost.Q.shape[0]
    if traj.T != cost.T or X.shape[1] != n or U.shape[1] != cost.R.shape[0]:
        raise DimensionError(
            f"trajectory (T={traj.T}, n={X.shape[1]}, m={U.shape[1]}) does not match cost "
            f"(T={cost.T}, n={n}, m={cost.R.shape[0]})"
        )
    Xs = X[:-1]
    J = np.einsum("ti,ij,tj->", Xs, cost.Q, Xs) + np.einsum("ti,ij,tj->", U, cost.R, U)
    J += X[-1] @ cost.P @ X[-1]
    return float(J)


def spd_solve(M: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve ``M z = rhs`` for symmetric ``M``; raise unless ``M`` is well-conditioned PD."""
    w = np.linalg.eigvalsh(M)
    if not w[0] > 0 or w[-1] > MAX_COND * w[0]:
        raise NumericalError(f"innovation matrix is not safely PD (eigenvalues {w[0]:.3g}..{w[-1]:.3g})")
    return np.linalg.solve(M, rhs)


def riccati_unconstrained(sys: LtiSystem, cost: CostSpec) -> "ValueFunction":
    """Finite-horizon discrete Riccati sweep from ``F_T = P``."""
    from .clqr import ValueFunction

    cost.check_against(sys)
    A, B, Q, R = sys.A, sys.B, cost.Q, cost.R
    T, n, m = cost.T, sys.n, sys.m
    F = np.empty((T + 1, n, n))
    K = np.empty((T, m, n))
    M = np.empty((T, m, m))
    F[T] = cost.P
    for t in range(T - 1, -1, -1):
        Ft = F[t + 1]
        BF = B.T @ Ft
        M[t] = BF @ B + R
        K[t] = spd_solve(M[t], BF @ A)
        Fn = Q + A.T @ Ft @ A - (BF @ A).T @ K[t]
        F[t] = 0.5 * (Fn + Fn.T)
    return ValueFunction(
        F=F, S=np.zeros((T + 1, n)), r=np.zeros(T + 1), K=K, l=np.zeros((T, m)), M=M
    )


def dare_limit(sys: LtiSystem, cost: CostSpec, tol: float = 1e-12, max_iter: int = 100000):
    """Iterate the Riccati map to its fixed point; returns ``(F, K)``."""
    A, B, Q, R = sys.A, sys.B, cost.Q, cost.R
    F = np.array(cost.P, dtype=float)
    for _ in range(max_iter):
        BF = B.T @ F
        K = spd_solve(BF @ B + R, BF @ A)
        Fn = Q + A.T @ F @ A - (BF @ A).T @ K
        Fn = 0.5 * (Fn + Fn.T)
        if np.abs(Fn - F).max() <= tol * max(1.0, np.abs(F).max()):
            return Fn, K
        F = Fn
    raise NumericalError("Riccati iteration did not reach a fixed point")
