#!/usr/bin/env python3
"""
Test the CiLQR solver against Riccati recursions, hand algebra and finite differences
"""

import math

import numpy as np
import pytest

from cilqr_solver import (
    BackwardPassResult, BicycleDynamics, ConstraintSpec, ControlBound, CostSpec, EllipseObstacle,
    InfeasibleSeedError, LinearDynamics, SolverConfig, StateBound, Trajectory, augmented_cost,
    backward_pass, barrier, cost_expansion, forward_pass, solve,
)

DT = 0.1


def double_integrator():
    A = np.array([[1.0, DT], [0.0, 1.0]])
    B = np.array([[0.5 * DT ** 2], [DT]])
    return LinearDynamics(A, B)


def lq_cost(n_steps: int, final_scale: float = 10.0) -> CostSpec:
    return CostSpec(
        state_weight=np.eye(2),
        control_weight=np.array([[0.1]]),
        final_weight=final_scale * np.eye(2),
        reference_states=np.zeros((n_steps + 1, 2)),
    )


def riccati_gains(A, B, Q, R, Qf, n_steps):
    """Finite-horizon discrete Riccati recursion; returns gains K_k and P_0"""
    P = Qf
    gains = [None] * n_steps
    for k in range(n_steps - 1, -1, -1):
        K = -np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
        gains[k] = K
        P = Q + A.T @ P @ A + A.T @ P @ B @ K
    return np.array(gains), P


def bicycle_problem(n_steps: int = 40):
    dynamics = BicycleDynamics(DT)
    s_init = np.array([0.0, 2.0, 10.0, 0.0])
    reference = np.zeros((n_steps + 1, 4))
    reference[:, 0] = 10.0 * DT * np.arange(n_steps + 1)
    reference[:, 1] = 2.0
    reference[:, 2] = 10.0
    weights = np.diag([0.0, 0.5, 1.0, 1.0])
    cost = CostSpec(weights, np.diag([0.1, 1.0]), weights, reference)
    return dynamics, cost, s_init


def test_barrier_values():
    assert barrier(0.0, 1.0, 5.0) == pytest.approx(1.0)
    assert barrier(-0.5, 1.0, 5.0) == pytest.approx(0.0821, abs=5e-5)
    assert barrier(-0.5, 1.0, 5.0) == pytest.approx(math.exp(-2.5))
    assert barrier(-1e6, 1.0, 5.0) == 0.0


def test_barrier_exponent_is_capped():
    assert barrier(100.0, 1.0, 5.0) == pytest.approx(math.exp(30.0))
    assert math.isfinite(barrier(1e9, 2.0, 5.0))


def test_barrier_rejects_non_positive_parameters():
    with pytest.raises(ValueError):
        barrier(0.0, 0.0, 5.0)
    with pytest.raises(ValueError):
        ConstraintSpec(barrier_q2=-1.0)


def test_augmented_cost_without_constraints_is_quadratic():
    dynamics = double_integrator()
    traj = dynamics.rollout(np.array([1.0, -0.5]), np.array([[0.3], [-0.2], [0.1]]))
    cost = lq_cost(3)

    expected = 0.0
    for k in range(3):
        expected += 0.5 * traj.states[k] @ traj.states[k]
        expected += 0.5 * 0.1 * traj.controls[k, 0] ** 2
    expected += 0.5 * 10.0 * traj.states[3] @ traj.states[3]

    assert augmented_cost(traj, cost) == pytest.approx(expected, rel=1e-12)
    assert augmented_cost(traj, cost, ConstraintSpec()) == pytest.approx(expected, rel=1e-12)


def test_augmented_cost_on_reference_is_zero():
    traj = double_integrator().rollout(np.zeros(2), np.zeros((5, 1)))
    assert augmented_cost(traj, lq_cost(5)) == 0.0


def test_augmented_cost_adds_barrier_per_knot():
    traj = double_integrator().rollout(np.zeros(2), np.zeros((3, 1)))
    constraints = ConstraintSpec(state_constraints=[StateBound(0, 1.0)],
                                 control_constraints=[ControlBound(0, 2.0, upper=False)])
    # s[0] - 1 = -1 at 4 knots; -(u - 2) = 2 at 3 controls
    expected = 4 * math.exp(-5.0) + 3 * math.exp(10.0)
    assert augmented_cost(traj, lq_cost(3), constraints) == pytest.approx(expected, rel=1e-12)


def test_backward_pass_matches_riccati_gains():
    rng = np.random.Generator(np.random.PCG64(7))
    for _ in range(5):
        n, m, n_steps = 3, 2, 15
        A = np.eye(n) + 0.1 * rng.standard_normal((n, n))
        B = 0.1 * rng.standard_normal((n, m))
        Q = np.diag(rng.uniform(0.5, 2.0, n))
        R = np.diag(rng.uniform(0.1, 1.0, m))
        Qf = 5.0 * Q

        dynamics = LinearDynamics(A, B)
        cost = CostSpec(Q, R, Qf, np.zeros((n_steps + 1, n)))
        nominal = dynamics.rollout(rng.standard_normal(n), np.zeros((n_steps, m)))
        result = backward_pass(nominal, cost, None, dynamics, regularization=0.0)

        expected, _ = riccati_gains(A, B, Q, R, Qf, n_steps)
        assert result.success
        np.testing.assert_allclose(result.feedback, expected, rtol=1e-9, atol=1e-12)


def test_backward_pass_at_cost_minimum_gives_zero_gains():
    dynamics = double_integrator()
    cost = CostSpec(np.zeros((2, 2)), np.eye(1), np.zeros((2, 2)), np.zeros((6, 2)))
    nominal = dynamics.rollout(np.array([1.0, 2.0]), np.zeros((5, 1)))
    result = backward_pass(nominal, cost, None, dynamics, regularization=1e-6)
    assert result.success
    assert not result.feedforward.any()
    assert not result.feedback.any()


def test_single_step_scalar_problem():
    a, b, q, r, qf, s0 = 1.2, 0.5, 1.0, 0.3, 4.0, 2.0
    dynamics = LinearDynamics(np.array([[a]]), np.array([[b]]))
    cost = CostSpec(np.array([[q]]), np.array([[r]]), np.array([[qf]]), np.zeros((2, 1)))
    nominal = dynamics.rollout(np.array([s0]), np.zeros((1, 1)))

    result = backward_pass(nominal, cost, None, dynamics, regularization=0.0)
    gain = -qf * a * b / (r + qf * b ** 2)
    assert result.feedback[0, 0, 0] == pytest.approx(gain)
    assert result.feedforward[0, 0] == pytest.approx(gain * s0)


def test_forward_pass_with_zero_step_returns_nominal():
    dynamics = BicycleDynamics(DT)
    nominal = dynamics.rollout(np.array([0.0, 2.0, 10.0, 0.1]), np.full((10, 2), 0.05))
    gains = BackwardPassResult(success=True, feedforward=np.zeros((10, 2)), feedback=np.zeros((10, 2, 4)))
    candidate = forward_pass(nominal, gains, dynamics, step_scale=0.0)
    np.testing.assert_array_equal(candidate.states, nominal.states)
    np.testing.assert_array_equal(candidate.controls, nominal.controls)


def test_forward_pass_realizes_predicted_decrease_on_lq():
    dynamics = double_integrator()
    n_steps = 20
    cost = lq_cost(n_steps)
    nominal = dynamics.rollout(np.array([1.0, 0.0]), np.zeros((n_steps, 1)))
    gains = backward_pass(nominal, cost, None, dynamics, regularization=0.0)
    candidate = forward_pass(nominal, gains, dynamics, step_scale=1.0)

    change = augmented_cost(candidate, cost) - augmented_cost(nominal, cost)
    assert change == pytest.approx(gains.predicted_change(1.0), rel=1e-8)


def test_forward_pass_output_obeys_dynamics():
    dynamics, cost, s_init = bicycle_problem(20)
    nominal = dynamics.rollout(s_init, np.zeros((20, 2)))
    gains = backward_pass(nominal, cost, None, dynamics, regularization=1e-6)
    candidate = forward_pass(nominal, gains, dynamics, step_scale=0.5)
    for k in range(candidate.horizon):
        np.testing.assert_allclose(candidate.states[k + 1],
                                   dynamics.step(candidate.states[k], candidate.controls[k]),
                                   rtol=0, atol=1e-12)


def test_solve_lq_matches_riccati_optimum():
    dynamics = double_integrator()
    n_steps = 20
    cost = lq_cost(n_steps)
    s_init = np.array([1.0, 0.0])
    config = SolverConfig(horizon=n_steps, reg_init=0.0, reg_min=0.0)

    traj, diagnostics = solve(dynamics, cost, None, s_init, config=config)

    gains, P0 = riccati_gains(dynamics.A, dynamics.B, cost.state_weight, cost.control_weight,
                              cost.final_weight, n_steps)
    assert augmented_cost(traj, cost) == pytest.approx(0.5 * s_init @ P0 @ s_init, rel=1e-6)
    for k in range(n_steps):
        assert traj.controls[k] == pytest.approx(gains[k] @ traj.states[k], rel=1e-6, abs=1e-9)
    assert diagnostics.converged
    assert diagnostics.iterations <= 2


def random_point(seed: int):
    """Bicycle state and control away from the steering singularity"""
    rng = np.random.Generator(np.random.PCG64(seed))
    state = np.array([rng.uniform(-50.0, 50.0), rng.uniform(0.0, 8.0),
                      rng.uniform(0.0, 50.0), rng.uniform(-0.5, 0.5)])
    control = np.array([rng.uniform(-5.5, 5.5), rng.uniform(-0.8, 0.8)])
    return state, control


@pytest.mark.parametrize('seed', range(100))
def test_bicycle_jacobians_match_finite_differences(seed):
    dynamics = BicycleDynamics(DT)
    state, control = random_point(seed)
    A, B = dynamics.jacobians(state[None, :], control[None, :])
    eps = 1e-6
    for i in range(4):
        step = np.zeros(4)
        step[i] = eps
        column = (dynamics.step(state + step, control) - dynamics.step(state - step, control)) / (2 * eps)
        np.testing.assert_allclose(A[0][:, i], column, rtol=1e-5, atol=1e-7)
    for j in range(2):
        step = np.zeros(2)
        step[j] = eps
        column = (dynamics.step(state, control + step) - dynamics.step(state, control - step)) / (2 * eps)
        np.testing.assert_allclose(B[0][:, j], column, rtol=1e-5, atol=1e-7)


def random_cost_problem(seed: int):
    """Short bicycle rollout under random controls, with an obstacle near the path"""
    rng = np.random.Generator(np.random.PCG64(seed))
    dynamics, cost, s_init = bicycle_problem(10)
    controls = np.column_stack([rng.uniform(-2.0, 2.0, 10), rng.uniform(-0.2, 0.2, 10)])
    traj = dynamics.rollout(s_init, controls)
    center = [rng.uniform(2.0, 12.0), rng.uniform(1.0, 4.0)]
    obstacle = EllipseObstacle(np.tile(center, (11, 1)), 4.0, 1.5)
    constraints = ConstraintSpec(state_constraints=[obstacle, StateBound(1, 7.0)],
                                 control_constraints=[ControlBound(0, 5.5)])
    return traj, cost, constraints, int(rng.integers(0, 10))


@pytest.mark.parametrize('seed', range(100))
def test_cost_gradients_match_finite_differences(seed):
    traj, cost, constraints, k = random_cost_problem(seed)
    expansion = cost_expansion(traj, cost, constraints)
    eps = 1e-6

    for i in range(4):
        plus, minus = traj.copy(), traj.copy()
        plus.states[k, i] += eps
        minus.states[k, i] -= eps
        fd = (augmented_cost(plus, cost, constraints) - augmented_cost(minus, cost, constraints)) / (2 * eps)
        assert expansion.l_s[k, i] == pytest.approx(fd, rel=1e-5, abs=1e-6)
    for j in range(2):
        plus, minus = traj.copy(), traj.copy()
        plus.controls[k, j] += eps
        minus.controls[k, j] -= eps
        fd = (augmented_cost(plus, cost, constraints) - augmented_cost(minus, cost, constraints)) / (2 * eps)
        assert expansion.l_u[k, j] == pytest.approx(fd, rel=1e-5, abs=1e-6)


@pytest.mark.parametrize('seed', range(100))
def test_exact_state_hessian_matches_finite_differences(seed):
    traj, cost, constraints, k = random_cost_problem(seed)
    expansion = cost_expansion(traj, cost, constraints, exact_hessian=True)
    eps = 1e-6

    for i in range(4):
        plus, minus = traj.copy(), traj.copy()
        plus.states[k, i] += eps
        minus.states[k, i] -= eps
        column = (cost_expansion(plus, cost, constraints).l_s[k]
                  - cost_expansion(minus, cost, constraints).l_s[k]) / (2 * eps)
        np.testing.assert_allclose(expansion.l_ss[k][:, i], column, rtol=1e-5, atol=1e-6)


def random_lq_instance(seed: int):
    """Unconstrained LQ problem with n <= 4 states, m <= 2 controls and N <= 50"""
    rng = np.random.Generator(np.random.PCG64(seed))
    n = int(rng.integers(1, 5))
    m = int(rng.integers(1, 3))
    n_steps = int(rng.integers(1, 51))

    A = np.eye(n) + 0.2 * rng.normal(size=(n, n))
    radius = np.max(np.abs(np.linalg.eigvals(A)))
    if radius > 1.05:
        A *= 1.05 / radius
    B = rng.normal(size=(n, m))

    def weight(size: int) -> np.ndarray:
        M = rng.normal(size=(size, size))
        W = M @ M.T + 0.1 * np.eye(size)
        return 0.5 * (W + W.T)

    cost = CostSpec(weight(n), weight(m), weight(n), np.zeros((n_steps + 1, n)))
    return LinearDynamics(A, B), cost, rng.normal(size=n), n_steps


@pytest.mark.parametrize('seed', range(20))
def test_solve_random_lq_matches_riccati(seed):
    dynamics, cost, s_init, n_steps = random_lq_instance(seed)
    config = SolverConfig(horizon=n_steps, reg_init=0.0, reg_min=0.0)

    traj, _ = solve(dynamics, cost, None, s_init, config=config)

    gains, P0 = riccati_gains(dynamics.A, dynamics.B, cost.state_weight, cost.control_weight,
                              cost.final_weight, n_steps)
    oracle = [s_init]
    for k in range(n_steps):
        oracle.append(dynamics.A @ oracle[-1] + dynamics.B @ (gains[k] @ oracle[-1]))
    assert augmented_cost(traj, cost) == pytest.approx(0.5 * s_init @ P0 @ s_init, rel=1e-6)
    np.testing.assert_allclose(traj.states, np.array(oracle), rtol=1e-6, atol=1e-9)


def test_solve_converges_immediately_at_optimum():
    dynamics = double_integrator()
    traj, diagnostics = solve(dynamics, lq_cost(10), None, np.zeros(2))
    assert diagnostics.converged
    assert diagnostics.iterations == 1
    assert diagnostics.costs == [0.0]
    assert not traj.controls.any()


def test_solve_steers_around_static_obstacle():
    dynamics, cost, s_init = bicycle_problem(40)
    n_knots = 41
    obstacle = EllipseObstacle(np.tile([25.0, 1.0], (n_knots, 1)), 4.0, 1.5, label='static')
    constraints = ConstraintSpec(state_constraints=[obstacle])

    seed = dynamics.rollout(s_init, np.zeros((40, 2)))
    assert constraints.max_value(seed) > 0.0

    traj, diagnostics = solve(dynamics, cost, constraints, s_init, config=SolverConfig(horizon=40))

    assert diagnostics.max_constraint < 0.0
    assert diagnostics.feasible
    assert np.all(obstacle.value(traj.states) < 0.0)
    passing = np.argmin(np.abs(traj.states[:, 0] - 25.0))
    assert traj.states[passing, 1] > 2.4


def test_solve_costs_never_increase():
    dynamics, cost, s_init = bicycle_problem(30)
    obstacle = EllipseObstacle(np.tile([20.0, 1.2], (31, 1)), 4.0, 1.5)
    constraints = ConstraintSpec(state_constraints=[obstacle])
    _, diagnostics = solve(dynamics, cost, constraints, s_init,
                           config=SolverConfig(horizon=30, max_iterations=15))
    assert all(b <= a for a, b in zip(diagnostics.costs, diagnostics.costs[1:]))
    assert len(diagnostics.regularization_trace) == diagnostics.iterations


def test_solve_rejects_non_finite_seed():
    dynamics = double_integrator()
    nominal = Trajectory(np.zeros((4, 2)), np.array([[0.0], [math.nan], [0.0]]))
    with pytest.raises(InfeasibleSeedError, match="feasible seed"):
        solve(dynamics, lq_cost(3), None, np.zeros(2), nominal=nominal)


def test_solver_config_validation():
    with pytest.raises(ValueError, match="tolerance"):
        SolverConfig(tolerance=0.0)
    with pytest.raises(ValueError, match="line search"):
        SolverConfig(line_search_steps=(1.5,))


def test_diagnostics_serialize():
    dynamics = double_integrator()
    _, diagnostics = solve(dynamics, lq_cost(5), None, np.array([1.0, 0.0]))
    record = diagnostics.to_dict()
    assert record['status'] == 'converged'
    assert record['max_constraint'] is None
    assert record['costs'][0] >= record['costs'][-1]
