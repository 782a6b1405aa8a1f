"""Convex quadratic inner approximations of obstacle constraints.

Linearizing the concave part of ``-h`` about a reference point ``x_ref`` and
keeping the certificate curvature gives

    f(x) = 1/2 x' H x + c' x + d,   c = -grad h(x_ref) - H x_ref,
    d = -h(x_ref) + grad h(x_ref)' x_ref + 1/2 x_ref' H x_ref,

with ``f(x_ref) = -h(x_ref)`` and ``f(x) >= -h(x)`` everywhere, so the convex
set ``{f <= 0}`` lies inside the safe set ``{h >= 0}``.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CertificateError
from .lti import _frozen
from .obstacles import SemiConvexObstacle, certify_semiconvex, eval_h, grad_h


@dataclass(frozen=True, eq=False)
class QuadraticSurrogate:
    H: np.ndarray
    c: np.ndarray
    d: float
    obstacle_id: int
    t: int
    x_ref: np.ndarray

    def __post_init__(self):
        for name in ("H", "c", "x_ref"):
            object.__setattr__(self, name, _frozen(getattr(self, name)))
        object.__setattr__(self, "d", float(self.d))

    @property
    def key(self) -> tuple:
        return (self.t, self.obstacle_id)

    def value(self, x) -> float:
        x = np.asarray(x, dtype=float)
        return float(0.5 * x @ self.H @ x + self.c @ x + self.d)

    def gradient(self, x) -> np.ndarray:
        return self.H @ np.asarray(x, dtype=float) + self.c

    def shifted(self, margin: float) -> "QuadraticSurrogate":
        """Same surrogate with ``f`` raised by ``margin`` (a tightened constraint)."""
        return QuadraticSurrogate(self.H, self.c, self.d + margin, self.obstacle_id, self.t, self.x_ref)


def convexify(obs: SemiConvexObstacle, x_ref, t: int) -> QuadraticSurrogate:
    cert = certify_semiconvex(obs)
    if not cert.ok:
        raise CertificateError(
            f"obstacle {obs.id}: H - 2E has eigenvalue {cert.eigenvalue:.3g} (member {cert.member})"
        )
    x0 = np.asarray(x_ref, dtype=float).reshape(-1)
    H = obs.certificate
    g = grad_h(obs, x0)
    h0 = eval_h(obs, x0)
    c = -g - H @ x0
    d = -h0 + g @ x0 + 0.5 * x0 @ H @ x0
    return QuadraticSurrogate(H, c, d, obs.id, int(t), x0)


def surrogate_margin(s: QuadraticSurrogate, x) -> float:
    """``f(x)``; nonpositive means ``x`` is inside the convexified safe region."""
    return s.value(x)
