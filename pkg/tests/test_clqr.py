import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from brsca.clqr import (
    DualState,
    StepSchedule,
    backward_recursion,
    dual_ascent,
    dual_gradients,
    dual_value,
    kkt_residuals,
    lagrangian,
    stability_check,
    stage_cost_aggregate,
)
from brsca import _kernels
from brsca.clqr import _bundle, _jacobi_scales, _mu_array, _row_scales, _sweep_numpy, dual_hessian
from brsca.errors import ConvergenceError, StateError, SubproblemInfeasible
from brsca.lti import (
    CostSpec,
    InputConstraint,
    LtiSystem,
    Trajectory,
    closed_loop_rollout,
    dare_limit,
    evaluate_cost,
    riccati_unconstrained,
)
from brsca.sca import QuadraticSurrogate
from helpers import oracle_stage, random_clqr
from oracles import stacked_kkt


def oracle_solve(sys, cost, surrogates, ic, duals, x0):
    Gmu = np.einsum("tsm,ts->tm", ic.G, duals.mu) if ic.s else None
    mue = np.einsum("ts,ts->t", ic.e, duals.mu) if ic.s else None
    return stacked_kkt(sys.A, sys.B, cost.Q, cost.R, cost.P, cost.T, x0,
                       oracle_stage(surrogates, duals), Gmu, mue)


def scalar_problem():
    sys = LtiSystem([[1.0]], [[1.0]])
    cost = CostSpec([[1.0]], [[1.0]], [[1.0]], 1)
    ic = InputConstraint.constant([[1.0]], [0.0], 1)
    return sys, cost, ic


class TestRecursion:
    def test_zero_duals_reduce_to_riccati(self, rng):
        sys, cost, surr, ic, _, _ = random_clqr(rng, 3, 2, 6, 3)
        zero = DualState.zeros([s.key for s in surr], cost.T, ic.s)
        vf = backward_recursion(sys, cost, surr, ic, zero)
        ref = riccati_unconstrained(sys, cost)
        np.testing.assert_allclose(vf.F, ref.F, rtol=0, atol=1e-10)
        assert np.abs(vf.S).max() <= 1e-12 and np.abs(vf.l).max() <= 1e-12

    def test_scalar_stationarity(self):
        sys, cost, ic = scalar_problem()
        vf = backward_recursion(sys, cost, [], ic, DualState({}, [[1.0]]))
        assert vf.K[0, 0, 0] == pytest.approx(0.5, abs=1e-15)
        assert vf.l[0, 0] == pytest.approx(-0.25, abs=1e-15)

    def test_matches_stacked_kkt(self, rng):
        sys, cost, surr, ic, duals, x0 = random_clqr(rng, 3, 2, 5, 3)
        vf = backward_recursion(sys, cost, surr, ic, duals)
        tr = closed_loop_rollout(sys, vf.K, vf.l, x0)
        X, U, value = oracle_solve(sys, cost, surr, ic, duals, x0)
        np.testing.assert_allclose(tr.inputs, U, rtol=1e-8, atol=1e-8 * np.abs(U).max())
        assert vf.value(0, x0) == pytest.approx(value, rel=1e-8)
        assert lagrangian(tr, cost, surr, ic, duals) == pytest.approx(value, rel=1e-8)

    def test_value_function_terminal_conditions(self, rng):
        sys, cost, surr, ic, duals, _ = random_clqr(rng, 3, 2, 5, 3)
        vf = backward_recursion(sys, cost, surr, ic, duals)
        np.testing.assert_array_equal(vf.F[-1], cost.P)
        assert np.all(vf.S[-1] == 0) and vf.r[-1] == 0
        for F in vf.F:
            assert np.linalg.eigvalsh(F).min() >= -1e-8 * max(1, np.abs(F).max())

    def test_value_function_is_cost_to_go_at_every_step(self, rng):
        sys, cost, surr, ic, duals, x0 = random_clqr(rng, 2, 1, 5, 3)
        vf = backward_recursion(sys, cost, surr, ic, duals)
        tr = closed_loop_rollout(sys, vf.K, vf.l, x0)
        # truncate the horizon at t and compare with the oracle on the tail
        for t in range(1, cost.T):
            tail = [QuadraticSurrogate(s.H, s.c, s.d, s.obstacle_id, s.t - t, s.x_ref) for s in surr if s.t > t]
            tail_duals = DualState({(s.t, s.obstacle_id): duals.lam[(s.t + t, s.obstacle_id)] for s in tail},
                                   duals.mu[t:])
            tail_ic = InputConstraint(ic.G[t:], ic.e[t:], check=False)
            tail_cost = CostSpec(cost.Q, cost.R, cost.P, cost.T - t)
            x = tr.states[t]
            Gmu = np.einsum("tsm,ts->tm", tail_ic.G, tail_duals.mu)
            mue = np.einsum("ts,ts->t", tail_ic.e, tail_duals.mu)
            stage = oracle_stage(tail, tail_duals)
            # the state-dependent surrogate terms at t itself are part of V_t
            here = [s for s in surr if s.t == t]
            extra = sum(duals.lam[s.key] * s.value(x) for s in here)
            _, _, v = stacked_kkt(sys.A, sys.B, tail_cost.Q, tail_cost.R, tail_cost.P, tail_cost.T, x,
                                  stage, Gmu, mue)
            assert vf.value(t, x) == pytest.approx(v + extra, rel=1e-8, abs=1e-9)

    def test_stage_aggregate_dominates_q(self, rng):
        sys, cost, surr, ic, duals, _ = random_clqr(rng, 3, 2, 5, 3)
        agg = stage_cost_aggregate(cost, surr, duals, 3)
        for Qt in agg.Q_lam:
            assert np.linalg.eigvalsh(Qt - cost.Q).min() >= -1e-10

    def test_key_mismatch(self, rng):
        sys, cost, surr, ic, duals, _ = random_clqr(rng, 3, 2, 5, 2)
        with pytest.raises(StateError):
            backward_recursion(sys, cost, surr, ic, DualState({(1, 99): 1.0}, duals.mu))

    def test_negative_duals_rejected(self):
        with pytest.raises(StateError):
            DualState({(1, 0): -1e-3}, np.zeros((2, 1)))


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**31))
def test_recursion_oracle_property(seed):
    rng = np.random.default_rng(seed)
    sys, cost, surr, ic, duals, x0 = random_clqr(rng)
    vf = backward_recursion(sys, cost, surr, ic, duals)
    tr = closed_loop_rollout(sys, vf.K, vf.l, x0)
    X, U, value = oracle_solve(sys, cost, surr, ic, duals, x0)
    scale = max(1.0, np.abs(U).max())
    assert np.abs(tr.inputs - U).max() <= 1e-8 * scale
    assert abs(vf.value(0, x0) - value) <= 1e-6 * max(1.0, abs(value))


class TestGradients:
    def test_box_rows(self):
        ic = InputConstraint.box(0.7, 2, 1)
        tr = Trajectory(np.zeros((2, 2)), [[0.9, 0.0]])
        g = dual_gradients(tr, [], ic)
        np.testing.assert_allclose(g.mu[0], [0.2, -0.7, -1.6, -0.7])

    def test_feasible_is_negative_boundary_is_zero(self):
        s_in = QuadraticSurrogate(2 * np.eye(2), np.array([-8.0, 0.0]), 9.0, 0, 1, np.array([2.0, 0.0]))
        X = np.array([[0, 0], [2.0, 0.0], [0, 0]])
        tr = Trajectory(X, np.zeros((2, 2)))
        assert dual_gradients(tr, [s_in], InputConstraint.none(2, 2)).lam[(1, 0)] < 0
        X[1] = [4.0 - np.sqrt(7.0), 0.0]
        g = dual_gradients(Trajectory(X, np.zeros((2, 2))), [s_in], InputConstraint.none(2, 2))
        assert g.lam[(1, 0)] == pytest.approx(0.0, abs=1e-12)

    def test_finite_differences_of_dual(self, rng):
        sys, cost, surr, ic, duals, x0 = random_clqr(rng, 3, 2, 5, 3)
        vf = backward_recursion(sys, cost, surr, ic, duals)
        tr = closed_loop_rollout(sys, vf.K, vf.l, x0)
        g = dual_gradients(tr, surr, ic)
        h = 1e-5
        for k, v in duals.lam.items():
            up = dict(duals.lam, **{}) ; up[k] = v + h
            dn = dict(duals.lam) ; dn[k] = v - h
            fd = (dual_value(sys, cost, surr, ic, DualState(up, duals.mu), x0)
                  - dual_value(sys, cost, surr, ic, DualState(dn, duals.mu), x0)) / (2 * h)
            assert fd == pytest.approx(g.lam[k], rel=1e-4, abs=1e-6)
        for idx in np.ndindex(duals.mu.shape):
            up = np.array(duals.mu); up[idx] += h
            dn = np.array(duals.mu); dn[idx] -= h
            fd = (dual_value(sys, cost, surr, ic, DualState(duals.lam, up), x0)
                  - dual_value(sys, cost, surr, ic, DualState(duals.lam, dn), x0)) / (2 * h)
            assert fd == pytest.approx(g.mu[idx], rel=1e-4, abs=1e-6)


class TestKKT:
    def test_unconstrained_feasible_optimum(self):
        sys = LtiSystem.double_integrator(0.1)
        cost = CostSpec(np.eye(4), np.eye(2), np.eye(4), 10)
        ic = InputConstraint.box(100.0, 2, 10)
        vf = riccati_unconstrained(sys, cost)
        tr = closed_loop_rollout(sys, vf.K, vf.l, [1, 1, 0, 0])
        rep = kkt_residuals(tr, DualState.zeros([], 10, 4), [], ic)
        assert rep.max_constraint < 0 and rep.slackness <= 1e-9 and rep.dual_min == 0.0

    def test_scalar_saddle_point(self):
        # min (x0+u)^2 + u^2 + x0^2 s.t. u <= 0 at x0 = -1: unconstrained u = 1/2 violates,
        # so u* = 0 and stationarity 2(x0+u) + 2u + mu = 0 gives mu* = 2.
        sys, cost, ic = scalar_problem()
        duals = DualState({}, [[2.0]])
        vf = backward_recursion(sys, cost, [], ic, duals)
        tr = closed_loop_rollout(sys, vf.K, vf.l, [-1.0])
        assert tr.inputs[0, 0] == pytest.approx(0.0, abs=1e-12)
        rep = kkt_residuals(tr, duals, [], ic)
        assert rep.primal_violation <= 1e-8 and rep.slackness <= 1e-8 and rep.dual_min >= 0

    def test_violation_readout(self):
        s = QuadraticSurrogate(np.zeros((1, 1)), np.array([1.0]), -1.0, 0, 1, np.zeros(1))
        tr = Trajectory([[0.0], [1.3], [0.0]], [[0.0], [0.0]])
        rep = kkt_residuals(tr, DualState({(1, 0): 0.0}, np.zeros((2, 0))), [s], InputConstraint.none(1, 2))
        assert rep.primal_violation == pytest.approx(0.3)


class TestDualAscent:
    def test_no_constraints_single_iteration(self):
        sys = LtiSystem.double_integrator(0.1)
        cost = CostSpec(np.eye(4), np.eye(2), np.eye(4), 20)
        res = dual_ascent(sys, cost, [], InputConstraint.none(2, 20), [1, 2, 0, 0])
        ref = riccati_unconstrained(sys, cost)
        assert res.iterations == 1
        np.testing.assert_allclose(res.value_function.K, ref.K, atol=1e-12)
        assert res.cost == pytest.approx(evaluate_cost(closed_loop_rollout(sys, ref.K, ref.l, [1, 2, 0, 0]), cost))

    def test_inactive_input_constraints_stop_immediately(self):
        sys = LtiSystem.double_integrator(0.1)
        cost = CostSpec(np.eye(4), np.eye(2), np.eye(4), 20)
        res = dual_ascent(sys, cost, [], InputConstraint.box(100.0, 2, 20), [1, 2, 0, 0])
        assert res.iterations == 1 and res.duals.min_entry() == 0.0

    def test_projection_keeps_duals_nonnegative(self, rng):
        sys, cost, surr, ic, _, x0 = random_clqr(rng, 3, 2, 6, 3)
        try:
            res = dual_ascent(sys, cost, surr, ic, x0, eps=1e-12, max_iter=200, steps=StepSchedule(0.1, 50.0))
        except ConvergenceError as err:
            res = err.best
        assert res.duals.min_entry() >= 0.0

    def test_cap_raises_with_best_iterate(self, rng):
        sys, cost, surr, ic, _, x0 = random_clqr(rng, 3, 2, 6, 3)
        with pytest.raises(ConvergenceError) as err:
            dual_ascent(sys, cost, surr, ic, x0, eps=1e-300, max_iter=3, steps=StepSchedule(1e-3))
        assert err.value.best is not None and err.value.best.iterations <= 3

    def test_looser_tolerance_stops_sooner(self):
        sys, cost, surr, ic, x0 = halfspace_instance()
        loose = dual_ascent(sys, cost, surr, ic, x0, eps=0.7, steps=StepSchedule(0.5, 20.0))
        tight = dual_ascent(sys, cost, surr, ic, x0, eps=0.03, steps=StepSchedule(0.5, 20.0))
        assert loose.iterations < tight.iterations

    def test_jacobi_scaling_reaches_kkt(self):
        sys, cost, surr, ic, x0 = halfspace_instance()
        res = dual_ascent(sys, cost, surr, ic, x0, eps=1e-9, precondition="jacobi", feas_tol=1e-6,
                          steps=StepSchedule(1.9, 500.0), max_iter=20000)
        rep = kkt_residuals(res.trajectory, res.duals, surr, ic)
        assert rep.primal_violation <= 1e-6 and rep.slackness <= 1e-4

    def test_newton_steps_reach_kkt(self):
        sys, cost, surr, ic, x0 = halfspace_instance()
        res = dual_ascent(sys, cost, surr, ic, x0, eps=1e-9, precondition="newton", feas_tol=1e-6)
        rep = kkt_residuals(res.trajectory, res.duals, surr, ic)
        assert rep.primal_violation <= 1e-6 and rep.slackness <= 1e-4
        diag = dual_ascent(sys, cost, surr, ic, x0, eps=1e-9, feas_tol=1e-6, max_iter=20000)
        assert res.iterations < diag.iterations

    def test_capped_multipliers_flag_infeasible_subproblem(self):
        # position must stay below -0.5 at t = 8..12 but the input box is too tight to get there
        sys, cost, surr, _, x0 = halfspace_instance()
        x0 = np.array([0.5, 0.0])
        ic = InputConstraint.box(0.05, 1, cost.T)
        with pytest.raises(SubproblemInfeasible) as err:
            dual_ascent(sys, cost, surr, ic, x0, eps=1e-6, feas_tol=1e-3, dual_cap=50.0, max_iter=2000,
                        precondition="newton")
        best = err.value.best
        assert max(best.duals.lam.values()) == pytest.approx(50.0)
        assert np.all(np.abs(best.trajectory.inputs) <= 0.05 + 1e-3)


class TestDualHessian:
    def test_matches_finite_differences_of_gradient(self, rng):
        for _ in range(5):
            sys, cost, surr, ic, duals, x0 = random_clqr(rng, n_surr=3)
            Hd = dual_hessian(sys, cost, surr, ic, duals, x0)
            keys = sorted(duals.lam)
            z = np.concatenate([[duals.lam[k] for k in keys], np.ravel(duals.mu)])

            def grad(zv):
                d = DualState(dict(zip(keys, zv[:len(keys)])), zv[len(keys):].reshape(duals.mu.shape))
                vf = backward_recursion(sys, cost, surr, ic, d)
                g = dual_gradients(closed_loop_rollout(sys, vf.K, vf.l, x0), surr, ic)
                return np.concatenate([[g.lam[k] for k in keys], np.ravel(g.mu)])

            h = 1e-6
            fd = np.column_stack([(grad(z + h * e) - grad(z - h * e)) / (2 * h) for e in np.eye(z.size)])
            np.testing.assert_allclose(Hd, fd, rtol=1e-5, atol=1e-6 * max(1.0, np.abs(fd).max()))
            assert np.linalg.eigvalsh(Hd).max() <= 1e-9 * max(1.0, np.abs(Hd).max())


@pytest.mark.skipif(not _kernels.ENABLED, reason="numba kernels disabled")
def test_compiled_sweep_matches_numpy(rng):
    from brsca.clqr import _sweep

    for _ in range(20):
        sys, cost, surr, ic, duals, x0 = random_clqr(rng)
        bundle = _bundle(surr, cost.T, sys.n)
        agg = bundle.aggregate(cost.Q, bundle.lam_vector(duals))
        mu = _mu_array(duals, ic)
        Gmu = np.einsum("tsm,ts->tm", ic.G, mu)
        mue = np.einsum("ts,ts->t", ic.e, mu)
        a = _sweep(sys.A, sys.B, cost.R, cost.P, agg, Gmu, mue)
        b = _sweep_numpy(sys.A, sys.B, cost.R, cost.P, agg, Gmu, mue)
        for name in ("F", "S", "r", "K", "l"):
            np.testing.assert_allclose(getattr(a, name), getattr(b, name), rtol=1e-10, atol=1e-10)
        ta = closed_loop_rollout(sys, a.K, a.l, x0)
        X = np.empty_like(ta.states)
        X[0] = x0
        for t in range(cost.T):
            X[t + 1] = sys.A @ X[t] + sys.B @ (b.l[t] - b.K[t] @ X[t])
        np.testing.assert_allclose(ta.states, X, rtol=1e-10, atol=1e-10)


def halfspace_instance(T=20):
    """Scalar double integrator asked to stay below position 0.5 mid-horizon."""
    dt = 0.1
    sys = LtiSystem([[1.0, dt], [0.0, 1.0]], [[0.5 * dt**2], [dt]])
    cost = CostSpec(np.diag([0.0, 0.0]), [[0.1]], 50 * np.eye(2), T)
    x0 = np.array([-1.0, 0.0])
    # the unconstrained solution heads for the origin; cap position at -0.5 on t = 8..12
    surr = [QuadraticSurrogate(np.zeros((2, 2)), np.array([1.0, 0.0]), 0.5, 0, t, np.zeros(2))
            for t in range(8, 13)]
    return sys, cost, surr, InputConstraint.box(5.0, 1, T), x0


class TestScales:
    # columns of a dual Hessian whose movable block is -[[2, 1], [1, 2]]; row 2 cannot move
    cols = -np.array([[2.0, 1.0], [1.0, 2.0], [0.5, 0.25]])
    movable = np.array([True, True, False])

    def test_gershgorin_row_sums(self):
        np.testing.assert_allclose(_row_scales(self.cols, self.movable), [1 / 3, 1 / 3, 1 / 0.75])

    def test_jacobi_uses_top_eigenvalue(self):
        # D^-1/2 B D^-1/2 = [[1, .5], [.5, 1]] has top eigenvalue 1.5
        np.testing.assert_allclose(_jacobi_scales(self.cols, self.movable)[:2], 1 / 3)

    def test_flat_block_falls_back_to_row_sums(self):
        cols = np.zeros((2, 2))
        mov = np.array([True, True])
        np.testing.assert_array_equal(_jacobi_scales(cols, mov), _row_scales(cols, mov))

    def test_scaled_hessian_has_unit_spectral_bound(self, rng):
        for _ in range(20):
            L = rng.normal(size=(6, 6))
            B = L @ L.T
            mov = np.ones(6, dtype=bool)
            for scales in (_row_scales(-B, mov), _jacobi_scales(-B, mov)):
                top = np.linalg.eigvals(scales[:, None] * B).real.max()
                assert top <= 1.0 + 1e-10
            # jacobi is tight: the bound is attained
            assert np.linalg.eigvals(_jacobi_scales(-B, mov)[:, None] * B).real.max() == pytest.approx(1.0)
