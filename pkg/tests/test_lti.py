import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from brsca.errors import DimensionError, NumericalError
from brsca.lti import (
    CostSpec,
    InputConstraint,
    LtiSystem,
    Trajectory,
    dare_limit,
    evaluate_cost,
    riccati_unconstrained,
    rollout,
)
from oracles import batch_gains


def random_instance(rng, n=3, m=2, T=5):
    A = rng.normal(size=(n, n))
    B = rng.normal(size=(n, m))
    L = rng.normal(size=(n, n))
    Q = L @ L.T
    R = np.eye(m) + 0.1 * np.diag(rng.random(m))
    L = rng.normal(size=(n, n))
    return LtiSystem(A, B), CostSpec(Q, R, L @ L.T, T)


class TestRollout:
    def test_identity_dynamics(self):
        sys = LtiSystem(np.eye(2), np.eye(2))
        tr = rollout(sys, [1, 1], np.zeros((4, 2)))
        assert np.all(tr.states == 1.0)

    def test_scalar_doubling(self):
        sys = LtiSystem([[2.0]], [[1.0]])
        tr = rollout(sys, [1.0], [[0.0], [0.0]])
        assert tr.states.ravel().tolist() == [1.0, 2.0, 4.0]

    def test_double_integrator_euler(self):
        dt = 0.1
        sys = LtiSystem([[1, dt], [0, 1]], [[0], [dt]])
        tr = rollout(sys, [0, 0], [[1.0], [1.0]])
        np.testing.assert_allclose(tr.states, [[0, 0], [0, 0.1], [0.01, 0.2]], atol=1e-15)

    def test_dimension_mismatch(self):
        sys = LtiSystem(np.eye(2), np.eye(2))
        with pytest.raises(DimensionError):
            rollout(sys, [1, 1, 1], np.zeros((3, 2)))
        with pytest.raises(DimensionError):
            rollout(sys, [1, 1], np.zeros((3, 3)))

    def test_states_are_read_only(self):
        tr = rollout(LtiSystem(np.eye(2), np.eye(2)), [1, 1], np.zeros((2, 2)))
        with pytest.raises(ValueError):
            tr.states[0, 0] = 5.0

    def test_rollout_of_extracted_inputs_is_identity(self, rng):
        sys, _ = random_instance(rng)
        tr = rollout(sys, rng.normal(size=3), rng.normal(size=(6, 2)))
        again = rollout(sys, tr.states[0], tr.inputs)
        assert tr.is_consistent(sys)
        np.testing.assert_array_equal(again.states, tr.states)


class TestCost:
    def test_zero_trajectory(self):
        cost = CostSpec(np.eye(2), np.eye(2), np.eye(2), 3)
        assert evaluate_cost(Trajectory(np.zeros((4, 2)), np.zeros((3, 2))), cost) == 0.0

    def test_pure_input_energy(self):
        cost = CostSpec(np.zeros((2, 2)), np.eye(2), np.zeros((2, 2)), 3)
        U = np.tile([1.0, 0.0], (3, 1))
        assert evaluate_cost(Trajectory(np.zeros((4, 2)), U), cost) == 3.0

    def test_constant_state(self):
        sys = LtiSystem(np.eye(2), np.eye(2))
        tr = rollout(sys, [1, 1], np.zeros((2, 2)))
        assert evaluate_cost(tr, CostSpec(np.eye(2), np.eye(2), np.eye(2), 2)) == 6.0

    def test_sign_flip_invariance(self, rng):
        sys, cost = random_instance(rng)
        tr = rollout(sys, rng.normal(size=3), rng.normal(size=(5, 2)))
        flipped = Trajectory(-tr.states, -tr.inputs)
        assert evaluate_cost(tr, cost) == pytest.approx(evaluate_cost(flipped, cost), rel=1e-14)

    def test_horizon_mismatch(self):
        cost = CostSpec(np.eye(2), np.eye(2), np.eye(2), 2)
        with pytest.raises(DimensionError):
            evaluate_cost(Trajectory(np.zeros((4, 2)), np.zeros((3, 2))), cost)

    def test_rejects_bad_weights(self):
        with pytest.raises(ValueError):
            CostSpec(-np.eye(2), np.eye(2), np.eye(2), 2)
        with pytest.raises(ValueError):
            CostSpec(np.eye(2), np.zeros((2, 2)), np.eye(2), 2)
        with pytest.raises(ValueError):
            CostSpec(np.eye(2), np.eye(2), np.eye(2), 0)


class TestSystemChecks:
    def test_unstabilizable_rejected(self):
        with pytest.raises(ValueError):
            LtiSystem(np.diag([2.0, 0.5]), [[0.0], [1.0]])

    def test_stable_uncontrolled_mode_is_fine(self):
        assert LtiSystem(np.diag([0.5, 2.0]), [[0.0], [1.0]]).is_stabilizable()

    def test_detectability(self):
        sys = LtiSystem.double_integrator(0.1)
        assert sys.is_detectable(np.diag([1.0, 1.0, 0.0, 0.0]))
        assert not sys.is_detectable(np.diag([0.0, 0.0, 1.0, 1.0]))

    def test_box_constraint_layout(self):
        ic = InputConstraint.box(0.7, 2, 3)
        np.testing.assert_allclose(ic.values(np.tile([0.9, 0.0], (3, 1)))[0], [0.2, -0.7, -1.6, -0.7])

    def test_empty_input_set_rejected(self):
        with pytest.raises(ValueError):
            InputConstraint.constant([[1.0], [-1.0]], [1.0, 1.0], 2)


class TestRiccati:
    def test_zero_cost_gives_zero_gains(self, rng):
        sys, _ = random_instance(rng)
        vf = riccati_unconstrained(sys, CostSpec(np.zeros((3, 3)), np.eye(2), np.zeros((3, 3)), 4))
        assert np.all(vf.F == 0) and np.all(vf.K == 0)

    def test_scalar_one_step(self):
        vf = riccati_unconstrained(LtiSystem([[1.0]], [[1.0]]), CostSpec([[1.0]], [[1.0]], [[1.0]], 1))
        assert vf.F[0, 0, 0] == pytest.approx(1.5, abs=1e-15)
        assert vf.K[0, 0, 0] == pytest.approx(0.5, abs=1e-15)

    def test_gains_match_batch_least_squares(self, rng):
        sys, cost = random_instance(rng, 3, 2, 5)
        vf = riccati_unconstrained(sys, cost)
        for t in range(cost.T):
            K_ref = batch_gains(sys.A, sys.B, cost.Q, cost.R, cost.P, cost.T - t)
            np.testing.assert_allclose(vf.K[t], K_ref, rtol=1e-8, atol=1e-10 * np.abs(K_ref).max())

    def test_symmetric_psd_sequence(self, rng):
        sys, cost = random_instance(rng, 4, 2, 30)
        vf = riccati_unconstrained(sys, cost)
        for F in vf.F:
            assert np.array_equal(F, F.T)
            assert np.linalg.eigvalsh(F).min() >= -1e-8 * max(1.0, np.abs(F).max())

    def test_converged_gain_stabilizes(self, rng):
        sys, cost = random_instance(rng, 3, 2, 5)
        F, K = dare_limit(sys, cost)
        assert np.abs(np.linalg.eigvals(sys.A - sys.B @ K)).max() < 1.0

    def test_ill_conditioned_innovation_raises(self):
        sys = LtiSystem(np.eye(2), np.eye(2))
        cost = CostSpec(np.eye(2), np.diag([1e-9, 1e-9]), np.diag([1e9, 0.0]), 1)
        with pytest.raises(NumericalError):
            riccati_unconstrained(sys, cost)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**31), T=st.integers(1, 8))
def test_riccati_matches_batch_for_random_horizons(seed, T):
    rng = np.random.default_rng(seed)
    sys, cost = random_instance(rng, 2, 1, T)
    vf = riccati_unconstrained(sys, cost)
    K_ref = batch_gains(sys.A, sys.B, cost.Q, cost.R, cost.P, T)
    np.testing.assert_allclose(vf.K[0], K_ref, rtol=1e-7, atol=1e-9)
