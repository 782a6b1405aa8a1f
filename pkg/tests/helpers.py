"""Random problem instances shared across test modules."""

import numpy as np

from brsca.clqr import DualState
from brsca.lti import CostSpec, InputConstraint, LtiSystem, dare_limit
from brsca.sca import QuadraticSurrogate


def random_clqr(rng, n=None, m=None, T=None, n_surr=None, with_inputs=True, dare_terminal=False):
    n = n or int(rng.integers(1, 5))
    m = m or int(rng.integers(1, 3))
    T = T or int(rng.integers(2, 7))
    while True:
        A = rng.normal(size=(n, n)) * 0.8
        B = rng.normal(size=(n, m))
        sys = LtiSystem(A, B, check=False)
        if sys.is_stabilizable():
            break
    L = rng.normal(size=(n, n))
    Q = L @ L.T + 0.1 * np.eye(n)
    R = np.diag(rng.uniform(0.5, 2.0, m))
    L = rng.normal(size=(n, n))
    P = L @ L.T
    cost = CostSpec(Q, R, P, T)
    if dare_terminal:
        P, _ = dare_limit(sys, cost)
        cost = CostSpec(Q, R, P, T)
    n_surr = int(rng.integers(0, 4)) if n_surr is None else n_surr
    surrogates = []
    used = set()
    while len(surrogates) < min(n_surr, T - 1):
        key = (int(rng.integers(1, T)), int(rng.integers(0, 5)))
        if key in used:
            continue
        used.add(key)
        L = rng.normal(size=(n, n))
        surrogates.append(
            QuadraticSurrogate(L @ L.T, rng.normal(size=n), float(rng.normal()), key[1], key[0], np.zeros(n))
        )
    if with_inputs:
        s = int(rng.integers(1, 4))
        G = rng.normal(size=(T, s, m))
        e = -rng.uniform(0.5, 1.5, size=(T, s))
        ic = InputConstraint(G, e)
    else:
        ic = InputConstraint.none(m, T)
    lam = {sg.key: float(rng.uniform(0, 2)) for sg in surrogates}
    duals = DualState(lam, rng.uniform(0, 1, size=(T, ic.s)))
    x0 = rng.normal(size=n)
    return sys, cost, surrogates, ic, duals, x0


def oracle_stage(surrogates, duals):
    """Stage terms ``(Q_extra, q, w)`` per time built directly from the surrogates."""
    stage = {}
    for s in surrogates:
        lam = duals.lam[s.key]
        Qe, q, w = stage.get(s.t, (0.0, 0.0, 0.0))
        stage[s.t] = (Qe + 0.5 * lam * s.H, q + lam * s.c, w + lam * s.d)
    n = surrogates[0].c.size if surrogates else 0
    return {t: (np.broadcast_to(Qe, (n, n)), np.broadcast_to(q, (n,)), w) for t, (Qe, q, w) in stage.items()}
