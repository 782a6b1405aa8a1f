"""Compiled inner loops for the backward sweep and the closed-loop rollout.

These mirror the numpy implementations in ``clqr`` step for step; the numpy
versions stay as the reference and are used when ``BRSCA_NUMBA=0``.
"""

import os

import numpy as np

ENABLED = os.environ.get("BRSCA_NUMBA", "1") != "0"

try:
    from numba import njit
except ImportError:  # pragma: no cover
    ENABLED = False

if ENABLED:

    @njit(cache=True)
    def sweep(A, B, R, P, Q_lam, q, w, Gmu, mue, max_cond):
        T, n = q.shape
        m = B.shape[1]
        F = np.empty((T + 1, n, n))
        S = np.empty((T + 1, n))
        r = np.empty(T + 1)
        K = np.empty((T, m, n))
        l = np.empty((T, m))
        M = np.empty((T, m, m))
        F[T] = P
        S[T] = 0.0
        r[T] = 0.0
        At = A.T.copy()
        Bt = B.T.copy()
        rhs = np.empty((m, n + 1))
        for t in range(T - 1, -1, -1):
            Ft = F[t + 1]
            St = S[t + 1]
            BF = Bt @ Ft
            Mt = BF @ B + R
            Mt = 0.5 * (Mt + Mt.T)
            ev = np.linalg.eigvalsh(Mt)
            if not ev[0] > 0 or ev[-1] > max_cond * ev[0]:
                return F, S, r, K, l, M, t
            BFA = BF @ A
            v = Bt @ St + Gmu[t]
            rhs[:, :n] = BFA
            rhs[:, n] = v
            sol = np.linalg.solve(Mt, rhs)
            Kt = sol[:, :n].copy()
            lt = -0.5 * sol[:, n]
            Fn = Q_lam[t] + At @ Ft @ A - BFA.T @ Kt
            F[t] = 0.5 * (Fn + Fn.T)
            S[t] = q[t] + At @ St - Kt.T @ v
            r[t] = w[t] + mue[t] + r[t + 1] + 0.5 * np.dot(v, lt)
            K[t] = Kt
            l[t] = lt
            M[t] = Mt
        return F, S, r, K, l, M, -1

    @njit(cache=True)
    def rollout(A, B, K, l, x0):
        T, m, n = K.shape
        X = np.empty((T + 1, n))
        U = np.empty((T, m))
        X[0] = x0
        for t in range(T):
            u = l[t] - K[t] @ X[t]
            U[t] = u
            X[t + 1] = A @ X[t] + B @ u
        return X, U

    @njit(cache=True)
    def aggregate(Q, T, ts, H, c, d, lam):
        n = Q.shape[0]
        Q_lam = np.empty((T, n, n))
        for t in range(T):
            Q_lam[t] = Q
        q = np.zeros((T, n))
        w = np.zeros(T)
        for k in range(ts.size):
            t = ts[k]
            Q_lam[t] += 0.5 * lam[k] * H[k]
            q[t] += lam[k] * c[k]
            w[t] += lam[k] * d[k]
        return Q_lam, q, w

    @njit(cache=True)
    def surrogate_values(X, ts, H, c, d):
        out = np.empty(ts.size)
        for k in range(ts.size):
            x = X[ts[k]]
            out[k] = 0.5 * x @ H[k] @ x + c[k] @ x + d[k]
        return out

    @njit(cache=True)
    def responses(A, B, K, M, Qx, Wu):
        T, m, n = K.shape
        N = Qx.shape[2]
        At = A.T.copy()
        Bt = B.T.copy()
        S = np.zeros((n, N))
        L = np.empty((T, m, N))
        for t in range(T - 1, -1, -1):
            v = Bt @ S + Wu[t]
            L[t] = -0.5 * np.linalg.solve(M[t], v)
            S = Qx[t] + At @ S - K[t].T.copy() @ v
        DX = np.zeros((T + 1, n, N))
        DU = np.empty((T, m, N))
        for t in range(T):
            DU[t] = L[t] - K[t] @ DX[t]
            DX[t + 1] = A @ DX[t] + B @ DU[t]
        return DX, DU
