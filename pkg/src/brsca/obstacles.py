"""Semi-convex barrier functions and the obstacle field they carve out of the workspace.

Every obstacle is a zeroing barrier ``h`` that is positive in free space, zero on
the obstacle boundary and negative inside. Shapes are quadratic ellipses or
max-composites of ellipses; each carries a curvature certificate ``H`` used by
the convexification step.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence, Union

import numpy as np

from .errors import DimensionError
from .lti import Trajectory, _frozen

CERT_TOL = 1e-10
SAFE_TOL = 1e-9
TIE_TOL = 1e-12


@dataclass(frozen=True, eq=False)
class Ellipse:
    """``h(x) = (x - center)' shape (x - center) - level``."""

    center: np.ndarray
    shape: np.ndarray
    level: float

    def __post_init__(self):
        c = _frozen(np.reshape(self.center, -1))
        E = _frozen(np.atleast_2d(self.shape), 2)
        if E.shape != (c.size, c.size):
            raise DimensionError(f"shape {E.shape} does not match center of length {c.size}")
        if not np.allclose(E, E.T, atol=1e-12):
            raise ValueError("ellipse shape matrix must be symmetric")
        if np.linalg.eigvalsh(E).min() < -CERT_TOL:
            raise ValueError("ellipse shape matrix must be positive semidefinite")
        if not self.level > 0:
            raise ValueError("ellipse level must be positive")
        object.__setattr__(self, "center", c)
        object.__setattr__(self, "shape", E)
        object.__setattr__(self, "level", float(self.level))

    @property
    def dim(self) -> int:
        return self.center.size

    def h(self, x: np.ndarray) -> float:
        d = x - self.center
        return float(d @ self.shape @ d - self.level)

    def grad(self, x: np.ndarray) -> np.ndarray:
        return 2.0 * self.shape @ (x - self.center)


@dataclass(frozen=True, eq=False)
class Composite:
    """Pointwise max of member barriers: unsafe only where every member is unsafe."""

    members: tuple

    def __post_init__(self):
        members = tuple(self.members)
        if not members or not all(isinstance(e, Ellipse) for e in members):
            raise ValueError("a composite needs at least one Ellipse member")
        if len({e.dim for e in members}) != 1:
            raise DimensionError("composite members must share a dimension")
        object.__setattr__(self, "members", members)

    @property
    def dim(self) -> int:
        return self.members[0].dim

    def active(self, x: np.ndarray) -> int:
        """Index of the maximizing member; exact ties go to the lowest index."""
        vals = np.array([e.h(x) for e in self.members])
        best = vals.max()
        return int(np.flatnonzero(vals >= best - TIE_TOL)[0])

    def h(self, x: np.ndarray) -> float:
        return max(e.h(x) for e in self.members)

    def grad(self, x: np.ndarray) -> np.ndarray:
        return self.members[self.active(x)].grad(x)


Geometry = Union[Ellipse, Composite]


@dataclass(frozen=True, eq=False)
class SemiConvexObstacle:
    geometry: Geometry
    certificate: np.ndarray
    id: int

    def __post_init__(self):
        H = _frozen(np.atleast_2d(self.certificate), 2)
        d = self.geometry.dim
        if H.shape != (d, d):
            raise DimensionError(f"certificate is {H.shape}, obstacle lives in R^{d}")
        object.__setattr__(self, "certificate", 0.5 * (H + H.T))
        object.__setattr__(self, "id", int(self.id))

    @property
    def dim(self) -> int:
        return self.geometry.dim

    @property
    def ellipses(self) -> tuple:
        g = self.geometry
        return g.members if isinstance(g, Composite) else (g,)

    @classmethod
    def ellipse(cls, center, shape, level, id: int, certificate=None) -> "SemiConvexObstacle":
        """Ellipse obstacle with the tightest certificate ``2 * shape`` unless one is given."""
        geo = Ellipse(center, shape, level)
        H = 2.0 * geo.shape if certificate is None else certificate
        return cls(geo, H, id)

    @classmethod
    def circle(cls, center, radius: float, id: int, certificate=None) -> "SemiConvexObstacle":
        c = np.asarray(center, dtype=float)
        return cls.ellipse(c, np.eye(c.size), radius**2, id, certificate)

    @classmethod
    def composite(cls, members: Sequence[Ellipse], id: int, certificate=None) -> "SemiConvexObstacle":
        geo = Composite(tuple(members))
        if certificate is None:
            # 2 * lambda_max over members bounds every member's curvature
            lam = max(np.linalg.eigvalsh(e.shape).max() for e in geo.members)
            certificate = 2.0 * lam * np.eye(geo.dim)
        return cls(geo, certificate, id)

    def embed(self, projection: np.ndarray) -> "SemiConvexObstacle":
        """Lift a workspace obstacle to state space via ``h(Pi x)``.

        ``projection`` must have orthonormal rows (a coordinate selection).
        """
        Pi = np.asarray(projection, dtype=float)
        if Pi.shape[0] != self.dim:
            raise DimensionError(f"projection has {Pi.shape[0]} rows, obstacle lives in R^{self.dim}")
        if not np.allclose(Pi @ Pi.T, np.eye(Pi.shape[0]), atol=1e-12):
            raise ValueError("projection rows must be orthonormal")

        def lift(e: Ellipse) -> Ellipse:
            return Ellipse(Pi.T @ e.center, Pi.T @ e.shape @ Pi, e.level)

        g = self.geometry
        geo = Composite(tuple(lift(e) for e in g.members)) if isinstance(g, Composite) else lift(g)
        return SemiConvexObstacle(geo, Pi.T @ self.certificate @ Pi, self.id)

    def translate(self, offset) -> "SemiConvexObstacle":
        off = np.asarray(offset, dtype=float)

        def move(e: Ellipse) -> Ellipse:
            return Ellipse(e.center + off, e.shape, e.level)

        g = self.geometry
        geo = Composite(tuple(move(e) for e in g.members)) if isinstance(g, Composite) else move(g)
        return SemiConvexObstacle(geo, self.certificate, self.id)


def _point(obs: SemiConvexObstacle, x) -> np.ndarray:
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.size != obs.dim:
        raise DimensionError(f"point has length {x.size}, obstacle {obs.id} lives in R^{obs.dim}")
    return x


def eval_h(obs: SemiConvexObstacle, x) -> float:
    return obs.geometry.h(_point(obs, x))


def grad_h(obs: SemiConvexObstacle, x) -> np.ndarray:
    return obs.geometry.grad(_point(obs, x))


def eval_h_batch(obs: SemiConvexObstacle, X: np.ndarray) -> np.ndarray:
    """Barrier values at each row of ``X``."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    if X.shape[1] != obs.dim:
        raise DimensionError(f"points have width {X.shape[1]}, obstacle lives in R^{obs.dim}")
    vals = []
    for e in obs.ellipses:
        D = X - e.center
        vals.append(np.einsum("ti,ij,tj->t", D, e.shape, D) - e.level)
    return np.max(vals, axis=0)


@dataclass(frozen=True, eq=False)
class Certification:
    ok: bool
    eigenvalue: float
    eigenvector: np.ndarray = field(repr=False)
    member: int = 0


def certify_semiconvex(obs: SemiConvexObstacle) -> Certification:
    """Check ``H - 2E`` is PSD for every ellipse; the witness is the worst eigenpair."""
    worst = None
    for k, e in enumerate(obs.ellipses):
        w, V = np.linalg.eigh(obs.certificate - 2.0 * e.shape)
        if worst is None or w[0] < worst.eigenvalue:
            worst = Certification(bool(w[0] >= -CERT_TOL), float(w[0]), V[:, 0].copy(), k)
    return worst


@dataclass(frozen=True)
class Violation:
    t: int
    obstacle_id: int
    h: float

    def __iter__(self):
        return iter((self.t, self.obstacle_id, self.h))


@dataclass(frozen=True, eq=False)
class ObstacleField:
    """Obstacles in workspace coordinates plus the map from state to workspace.

    ``projection`` (shape ``(k, n)``) picks the workspace coordinates out of a
    state; ``None`` means the obstacles act on the full state.
    """

    obstacles: tuple = ()
    lower: np.ndarray = None
    upper: np.ndarray = None
    projection: np.ndarray = None

    def __post_init__(self):
        obstacles = tuple(self.obstacles)
        ids = [o.id for o in obstacles]
        if len(set(ids)) != len(ids):
            raise ValueError(f"obstacle ids must be unique, got {ids}")
        object.__setattr__(self, "obstacles", obstacles)
        if self.lower is not None:
            object.__setattr__(self, "lower", _frozen(np.reshape(self.lower, -1)))
            object.__setattr__(self, "upper", _frozen(np.reshape(self.upper, -1)))
            if np.any(self.upper <= self.lower):
                raise ValueError("workspace upper bounds must exceed lower bounds")
        if self.projection is not None:
            object.__setattr__(self, "projection", _frozen(np.atleast_2d(self.projection), 2))
        object.__setattr__(self, "_lifted", None)

    def __len__(self):
        return len(self.obstacles)

    @property
    def ids(self) -> list:
        return [o.id for o in self.obstacles]

    @property
    def lifted(self) -> tuple:
        """Obstacles expressed on the full state."""
        if self._lifted is None:
            Pi = self.projection
            lifted = self.obstacles if Pi is None else tuple(o.embed(Pi) for o in self.obstacles)
            object.__setattr__(self, "_lifted", lifted)
        return self._lifted

    def by_id(self, obstacle_id: int) -> SemiConvexObstacle:
        """State-space (lifted) obstacle with the given id."""
        for o in self.lifted:
            if o.id == obstacle_id:
                return o
        raise KeyError(obstacle_id)

    def workspace_points(self, states: np.ndarray) -> np.ndarray:
        X = np.atleast_2d(states)
        return X if self.projection is None else X @ self.projection.T

    def h_matrix(self, states: np.ndarray) -> np.ndarray:
        """Barrier values, shape ``(len(states), len(obstacles))``."""
        W = self.workspace_points(states)
        if not self.obstacles:
            return np.zeros((W.shape[0], 0))
        return np.column_stack([eval_h_batch(o, W) for o in self.obstacles])

    def h_min(self, states: np.ndarray) -> np.ndarray:
        Hm = self.h_matrix(states)
        return Hm.min(axis=1) if Hm.shape[1] else np.full(Hm.shape[0], np.inf)

    def is_safe_point(self, p, tol: float = 0.0) -> bool:
        """Workspace point strictly outside every obstacle (by more than ``tol``)."""
        p = np.asarray(p, dtype=float).reshape(1, -1)
        return all(eval_h_batch(o, p)[0] > tol for o in self.obstacles)

    def sample_workspace(self, n_samples: int, rng: np.random.Generator) -> np.ndarray:
        if self.lower is None:
            raise ValueError("field has no workspace bounds")
        return rng.uniform(self.lower, self.upper, size=(n_samples, self.lower.size))

    def has_free_space(self, n_samples: int = 1000, seed: int = 0) -> bool:
        pts = self.sample_workspace(n_samples, np.random.default_rng(seed))
        Hm = np.column_stack([eval_h_batch(o, pts) for o in self.obstacles]) if self.obstacles else None
        return True if Hm is None else bool(np.any(np.all(Hm >= 0, axis=1)))


def check_trajectory_safe(field: ObstacleField, traj: Trajectory, tol: float = SAFE_TOL) -> list:
    """Violations ``h < -tol`` over the constrained times ``1..T-1``, sorted by (t, id)."""
    X = traj.states
    T = X.shape[0] - 1
    if T < 2 or not field.obstacles:
        return []
    Hm = field.h_matrix(X[1:T])
    ids = np.array(field.ids)
    order = np.argsort(ids, kind="stable")
    out = []
    for k in range(Hm.shape[0]):
        for j in order:
            if Hm[k, j] < -tol:
                out.append(Violation(k + 1, int(ids[j]), float(Hm[k, j])))
    return out
