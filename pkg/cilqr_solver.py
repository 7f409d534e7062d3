"""
CiLQR Solver - constrained iterative LQR with exponential barrier constraint shaping

Inequality constraints g(s, u) < 0 are folded into the objective through the
barrier b(g) = q1 * exp(q2 * g). Each iteration runs a Gauss-Newton backward
pass (second-order dynamics terms dropped) followed by a backtracking forward
pass with adaptive Levenberg-Marquardt regularization on Q_uu.
"""

import math
import logging
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import numpy.typing as npt

from vehicle_dynamics import LF, LR

logger = logging.getLogger(__name__)

DoubleMatrix = npt.NDArray[np.float64]

DEFAULT_EXPONENT_CAP = 30.0


class InfeasibleSeedError(ValueError):
    """Raised when the nominal trajectory handed to solve has no finite cost"""


@dataclass
class Trajectory:
    """States s_0..s_N and controls u_0..u_{N-1}"""
    states: DoubleMatrix
    controls: DoubleMatrix

    def __post_init__(self) -> None:
        self.states = np.atleast_2d(np.asarray(self.states, dtype=float))
        self.controls = np.atleast_2d(np.asarray(self.controls, dtype=float))
        if self.states.shape[0] != self.controls.shape[0] + 1:
            raise ValueError(f"Expected {self.controls.shape[0] + 1} states for "
                             f"{self.controls.shape[0]} controls, got {self.states.shape[0]}")

    @property
    def horizon(self) -> int:
        return self.controls.shape[0]

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.states)) and np.all(np.isfinite(self.controls)))

    def copy(self) -> 'Trajectory':
        return Trajectory(self.states.copy(), self.controls.copy())


class Dynamics(ABC):
    """Discrete-time dynamics s_{k+1} = f(s_k, u_k)"""

    state_dim: int
    control_dim: int

    @abstractmethod
    def step(self, state: DoubleMatrix, control: DoubleMatrix) -> DoubleMatrix:
        pass

    @abstractmethod
    def jacobians(self, states: DoubleMatrix, controls: DoubleMatrix) -> Tuple[DoubleMatrix, DoubleMatrix]:
        """Batched (A_k, B_k) with shapes (N, n, n) and (N, n, m)"""

    def rollout(self, s_init: DoubleMatrix, controls: DoubleMatrix) -> Trajectory:
        controls = np.atleast_2d(np.asarray(controls, dtype=float))
        states = np.empty((controls.shape[0] + 1, self.state_dim))
        states[0] = s_init
        for k in range(controls.shape[0]):
            states[k + 1] = self.step(states[k], controls[k])
        return Trajectory(states, controls)


class LinearDynamics(Dynamics):
    def __init__(self, A: DoubleMatrix, B: DoubleMatrix):
        self.A = np.asarray(A, dtype=float)
        self.B = np.asarray(B, dtype=float)
        self.state_dim, self.control_dim = self.B.shape

    def step(self, state, control):
        return self.A @ state + self.B @ control

    def jacobians(self, states, controls):
        n_steps = controls.shape[0]
        return (np.broadcast_to(self.A, (n_steps,) + self.A.shape),
                np.broadcast_to(self.B, (n_steps,) + self.B.shape))


class BicycleDynamics(Dynamics):
    """Euler-discretized kinematic bicycle on (x, y, v, heading) with controls (accel, steer)"""

    state_dim = 4
    control_dim = 2

    def __init__(self, dt: float, lf: float = LF, lr: float = LR):
        if dt <= 0:
            raise ValueError("dt must be positive")
        self.dt = dt
        self.lf = lf
        self.lr = lr
        self.ratio = lr / (lf + lr)

    def step(self, state, control):
        _, _, v, psi = state
        accel, steer = control
        beta = math.atan(self.ratio * math.tan(steer))
        return state + self.dt * np.array([
            v * math.cos(psi + beta),
            v * math.sin(psi + beta),
            accel,
            (v / self.lr) * math.sin(beta),
        ])

    def jacobians(self, states, controls):
        v = states[:, 2]
        psi = states[:, 3]
        steer = controls[:, 1]
        tan_steer = np.tan(steer)
        beta = np.arctan(self.ratio * tan_steer)
        dbeta = self.ratio / np.cos(steer) ** 2 / (1.0 + (self.ratio * tan_steer) ** 2)
        cos_h, sin_h = np.cos(psi + beta), np.sin(psi + beta)

        n_steps = controls.shape[0]
        A = np.tile(np.eye(4), (n_steps, 1, 1))
        A[:, 0, 2] += self.dt * cos_h
        A[:, 0, 3] += -self.dt * v * sin_h
        A[:, 1, 2] += self.dt * sin_h
        A[:, 1, 3] += self.dt * v * cos_h
        A[:, 3, 2] += self.dt * np.sin(beta) / self.lr

        B = np.zeros((n_steps, 4, 2))
        B[:, 0, 1] = -self.dt * v * sin_h * dbeta
        B[:, 1, 1] = self.dt * v * cos_h * dbeta
        B[:, 2, 0] = self.dt
        B[:, 3, 1] = self.dt * (v / self.lr) * np.cos(beta) * dbeta
        return A, B


@dataclass
class CostSpec:
    """Quadratic tracking cost 1/2 |s - r|_Q^2 + 1/2 |u - u_ref|_R^2 plus 1/2 |s_N - r_N|_Qf^2"""
    state_weight: DoubleMatrix
    control_weight: DoubleMatrix
    final_weight: DoubleMatrix
    reference_states: DoubleMatrix
    reference_controls: Optional[DoubleMatrix] = None

    def __post_init__(self) -> None:
        self.state_weight = np.asarray(self.state_weight, dtype=float)
        self.control_weight = np.asarray(self.control_weight, dtype=float)
        self.final_weight = np.asarray(self.final_weight, dtype=float)
        self.reference_states = np.atleast_2d(np.asarray(self.reference_states, dtype=float))
        if self.reference_controls is None:
            self.reference_controls = np.zeros((self.reference_states.shape[0] - 1,
                                                self.control_weight.shape[0]))
        self.reference_controls = np.atleast_2d(np.asarray(self.reference_controls, dtype=float))

        for name in ('state_weight', 'control_weight', 'final_weight'):
            matrix = getattr(self, name)
            if not np.allclose(matrix, matrix.T):
                raise ValueError(f"{name} must be symmetric")
        try:
            np.linalg.cholesky(self.control_weight)
        except np.linalg.LinAlgError:
            raise ValueError("control_weight must be positive definite")


class StateConstraint(ABC):
    """Scalar constraint g(s_k) < 0 applied at every knot k = 0..N"""

    @abstractmethod
    def value(self, states: DoubleMatrix) -> DoubleMatrix:
        pass

    @abstractmethod
    def gradient(self, states: DoubleMatrix) -> DoubleMatrix:
        pass

    @abstractmethod
    def hessian(self, states: DoubleMatrix) -> DoubleMatrix:
        pass


class ControlConstraint(ABC):
    """Scalar constraint g(u_k) < 0 applied at every control k = 0..N-1"""

    @abstractmethod
    def value(self, controls: DoubleMatrix) -> DoubleMatrix:
        pass

    @abstractmethod
    def gradient(self, controls: DoubleMatrix) -> DoubleMatrix:
        pass

    @abstractmethod
    def hessian(self, controls: DoubleMatrix) -> DoubleMatrix:
        pass


class EllipseObstacle(StateConstraint):
    """Keep (x, y) outside an axis-aligned ellipse moving along given centers"""

    def __init__(self, centers: DoubleMatrix, semi_x: float, semi_y: float, label: str = ''):
        self.centers = np.atleast_2d(np.asarray(centers, dtype=float))
        self.semi_x = semi_x
        self.semi_y = semi_y
        self.label = label

    def value(self, states):
        dx = (states[:, 0] - self.centers[:, 0]) / self.semi_x
        dy = (states[:, 1] - self.centers[:, 1]) / self.semi_y
        return 1.0 - dx ** 2 - dy ** 2

    def gradient(self, states):
        grad = np.zeros_like(states)
        grad[:, 0] = -2.0 * (states[:, 0] - self.centers[:, 0]) / self.semi_x ** 2
        grad[:, 1] = -2.0 * (states[:, 1] - self.centers[:, 1]) / self.semi_y ** 2
        return grad

    def hessian(self, states):
        n_knots, dim = states.shape
        hess = np.zeros((n_knots, dim, dim))
        hess[:, 0, 0] = -2.0 / self.semi_x ** 2
        hess[:, 1, 1] = -2.0 / self.semi_y ** 2
        return hess


class _Bound:
    def __init__(self, index: int, limit: float, upper: bool = True):
        self.index = index
        self.limit = limit
        self.sign = 1.0 if upper else -1.0

    def _value(self, values):
        return self.sign * (values[:, self.index] - self.limit)

    def _gradient(self, values):
        grad = np.zeros_like(values)
        grad[:, self.index] = self.sign
        return grad

    def _hessian(self, values):
        n_rows, dim = values.shape
        return np.zeros((n_rows, dim, dim))


class StateBound(_Bound, StateConstraint):
    """s[index] < limit (upper) or s[index] > limit (lower)"""

    def value(self, states):
        return self._value(states)

    def gradient(self, states):
        return self._gradient(states)

    def hessian(self, states):
        return self._hessian(states)


class ControlBound(_Bound, ControlConstraint):
    """u[index] < limit (upper) or u[index] > limit (lower)"""

    def value(self, controls):
        return self._value(controls)

    def gradient(self, controls):
        return self._gradient(controls)

    def hessian(self, controls):
        return self._hessian(controls)


@dataclass
class ConstraintSpec:
    state_constraints: List[StateConstraint] = field(default_factory=list)
    control_constraints: List[ControlConstraint] = field(default_factory=list)
    barrier_q1: float = 1.0
    barrier_q2: float = 5.0
    exponent_cap: float = DEFAULT_EXPONENT_CAP

    def __post_init__(self) -> None:
        if self.barrier_q1 <= 0 or self.barrier_q2 <= 0:
            raise ValueError("barrier_q1 and barrier_q2 must be positive")

    @property
    def empty(self) -> bool:
        return not self.state_constraints and not self.control_constraints

    def max_value(self, trajectory: Trajectory) -> float:
        """Largest g over the trajectory, -inf without constraints"""
        worst = -math.inf
        for constraint in self.state_constraints:
            worst = max(worst, float(np.max(constraint.value(trajectory.states))))
        for constraint in self.control_constraints:
            worst = max(worst, float(np.max(constraint.value(trajectory.controls))))
        return worst


@dataclass(frozen=True)
class SolverConfig:
    """Parameters of the solve loop"""
    horizon: int = 50                   # knots planned by callers that build nominals
    max_iterations: int = 50
    tolerance: float = 1e-6             # relative cost decrease that stops the loop
    reg_init: float = 1e-6
    reg_min: float = 1e-8
    reg_max: float = 1e8
    reg_growth: float = 10.0
    reg_shrink: float = 2.0
    line_search_steps: Tuple[float, ...] = tuple(0.5 ** i for i in range(11))
    exact_hessian: bool = False         # keep b'(g) * g_ss in the barrier Hessian

    def __post_init__(self) -> None:
        errors = []
        if self.horizon < 1:
            errors.append("horizon must be at least 1")
        if self.max_iterations < 1:
            errors.append("max_iterations must be at least 1")
        if self.tolerance <= 0:
            errors.append("tolerance must be positive")
        if self.reg_init < 0 or self.reg_min < 0 or self.reg_max < self.reg_min:
            errors.append("regularization bounds must satisfy 0 <= reg_min <= reg_max, reg_init >= 0")
        if self.reg_growth <= 1 or self.reg_shrink <= 1:
            errors.append("regularization growth and shrink factors must exceed 1")
        if not self.line_search_steps or any(not 0 < a <= 1 for a in self.line_search_steps):
            errors.append("line search steps must lie in (0, 1]")
        if errors:
            raise ValueError("Solver configuration errors: " + "; ".join(errors))


@dataclass
class SolveDiagnostics:
    iterations: int = 0
    costs: List[float] = field(default_factory=list)
    converged: bool = False
    status: str = 'max_iterations'      # converged | max_iterations | regularization_limit
    max_constraint: float = -math.inf
    regularization_trace: List[float] = field(default_factory=list)
    barrier_capped: bool = False

    @property
    def feasible(self) -> bool:
        return self.max_constraint < 0.0

    def to_dict(self) -> Dict[str, Any]:
        return {
            'iterations': self.iterations,
            'costs': [float(c) for c in self.costs],
            'converged': self.converged,
            'status': self.status,
            'max_constraint': None if math.isinf(self.max_constraint) else float(self.max_constraint),
            'regularization_trace': [float(r) for r in self.regularization_trace],
            'barrier_capped': self.barrier_capped,
        }


@dataclass
class CostExpansion:
    """Stage derivatives for k = 0..N-1 and terminal derivatives at N"""
    l_s: DoubleMatrix
    l_u: DoubleMatrix
    l_ss: DoubleMatrix
    l_uu: DoubleMatrix
    l_us: DoubleMatrix
    lf_s: DoubleMatrix
    lf_ss: DoubleMatrix
    barrier_capped: bool = False


@dataclass
class BackwardPassResult:
    success: bool
    feedforward: Optional[DoubleMatrix] = None      # k_k, (N, m)
    feedback: Optional[DoubleMatrix] = None         # K_k, (N, m, n)
    expected_decrease: Tuple[float, float] = (0.0, 0.0)

    def predicted_change(self, step_scale: float) -> float:
        """Model cost change for a forward pass at step_scale (negative is a decrease)"""
        linear, quadratic = self.expected_decrease
        return step_scale * linear + step_scale ** 2 * quadratic


def barrier(g_value, barrier_q1: float, barrier_q2: float,
            exponent_cap: float = DEFAULT_EXPONENT_CAP):
    """q1 * exp(q2 * g) with the exponent argument capped"""
    if barrier_q1 <= 0 or barrier_q2 <= 0:
        raise ValueError("barrier_q1 and barrier_q2 must be positive")
    return barrier_q1 * np.exp(np.minimum(barrier_q2 * np.asarray(g_value, dtype=float), exponent_cap))


def augmented_cost(trajectory: Trajectory, cost: CostSpec, constraints: ConstraintSpec = None) -> float:
    """Quadratic tracking cost plus the barrier of every constraint at every knot"""
    n_steps = trajectory.horizon
    ds = trajectory.states - cost.reference_states
    du = trajectory.controls - cost.reference_controls

    total = 0.5 * float(np.einsum('ki,ij,kj->', ds[:n_steps], cost.state_weight, ds[:n_steps]))
    total += 0.5 * float(np.einsum('ki,ij,kj->', du, cost.control_weight, du))
    total += 0.5 * float(ds[n_steps] @ cost.final_weight @ ds[n_steps])

    if constraints is not None:
        q1, q2, cap = constraints.barrier_q1, constraints.barrier_q2, constraints.exponent_cap
        for constraint in constraints.state_constraints:
            total += float(np.sum(barrier(constraint.value(trajectory.states), q1, q2, cap)))
        for constraint in constraints.control_constraints:
            total += float(np.sum(barrier(constraint.value(trajectory.controls), q1, q2, cap)))

    return total


def _barrier_terms(constraint, values: DoubleMatrix, spec: ConstraintSpec, exact_hessian: bool):
    """Gradient and Hessian contributions of one constraint's barrier"""
    g = constraint.value(values)
    capped = bool(np.any(spec.barrier_q2 * g > spec.exponent_cap))
    b = barrier(g, spec.barrier_q1, spec.barrier_q2, spec.exponent_cap)
    first = spec.barrier_q2 * b
    second = spec.barrier_q2 ** 2 * b

    grad = constraint.gradient(values)
    gradient = first[:, None] * grad
    hessian = second[:, None, None] * grad[:, :, None] * grad[:, None, :]
    if exact_hessian:
        hessian = hessian + first[:, None, None] * constraint.hessian(values)
    return gradient, hessian, capped


def cost_expansion(trajectory: Trajectory, cost: CostSpec, constraints: ConstraintSpec = None,
                   exact_hessian: bool = False) -> CostExpansion:
    """First and second derivatives of the augmented cost along a trajectory"""
    n_steps = trajectory.horizon
    n, m = trajectory.states.shape[1], trajectory.controls.shape[1]
    ds = trajectory.states - cost.reference_states
    du = trajectory.controls - cost.reference_controls

    s_grad = np.vstack([ds[:n_steps] @ cost.state_weight, (cost.final_weight @ ds[n_steps])[None, :]])
    s_hess = np.concatenate([np.broadcast_to(cost.state_weight, (n_steps, n, n)),
                             cost.final_weight[None, :, :]])
    u_grad = du @ cost.control_weight
    u_hess = np.array(np.broadcast_to(cost.control_weight, (n_steps, m, m)))
    capped = False

    if constraints is not None:
        for constraint in constraints.state_constraints:
            grad, hess, hit = _barrier_terms(constraint, trajectory.states, constraints, exact_hessian)
            s_grad = s_grad + grad
            s_hess = s_hess + hess
            capped = capped or hit
        for constraint in constraints.control_constraints:
            grad, hess, hit = _barrier_terms(constraint, trajectory.controls, constraints, exact_hessian)
            u_grad = u_grad + grad
            u_hess = u_hess + hess
            capped = capped or hit

    return CostExpansion(
        l_s=s_grad[:n_steps],
        l_u=u_grad,
        l_ss=np.array(s_hess[:n_steps]),
        l_uu=u_hess,
        l_us=np.zeros((n_steps, m, n)),
        lf_s=s_grad[n_steps],
        lf_ss=np.array(s_hess[n_steps]),
        barrier_capped=capped,
    )


def backward_pass(nominal: Trajectory, cost: CostSpec, constraints: Optional[ConstraintSpec],
                  dynamics: Dynamics, regularization: float,
                  exact_hessian: bool = False) -> BackwardPassResult:
    """Riccati-like recursion of the local quadratic value function"""
    expansion = cost_expansion(nominal, cost, constraints, exact_hessian)
    A, B = dynamics.jacobians(nominal.states[:-1], nominal.controls)
    n_steps = nominal.horizon
    m, n = nominal.controls.shape[1], nominal.states.shape[1]

    V_s = expansion.lf_s.copy()
    V_ss = expansion.lf_ss.copy()
    feedforward = np.zeros((n_steps, m))
    feedback = np.zeros((n_steps, m, n))
    linear, quadratic = 0.0, 0.0
    eye_m = np.eye(m)

    for k in range(n_steps - 1, -1, -1):
        A_k, B_k = A[k], B[k]
        Q_s = expansion.l_s[k] + A_k.T @ V_s
        Q_u = expansion.l_u[k] + B_k.T @ V_s
        Q_ss = expansion.l_ss[k] + A_k.T @ V_ss @ A_k
        Q_uu = expansion.l_uu[k] + B_k.T @ V_ss @ B_k
        Q_us = expansion.l_us[k] + B_k.T @ V_ss @ A_k

        Q_uu_reg = Q_uu + regularization * eye_m
        try:
            chol = np.linalg.cholesky(Q_uu_reg)
        except np.linalg.LinAlgError:
            logger.debug(f"Q_uu not positive definite at k={k} with regularization {regularization:.1e}")
            return BackwardPassResult(success=False)

        rhs = np.column_stack([Q_u, Q_us])
        solved = np.linalg.solve(chol.T, np.linalg.solve(chol, rhs))
        k_k = -solved[:, 0]
        K_k = -solved[:, 1:]

        feedforward[k] = k_k
        feedback[k] = K_k
        linear += float(k_k @ Q_u)
        quadratic += 0.5 * float(k_k @ Q_uu @ k_k)

        V_s = Q_s + K_k.T @ Q_uu @ k_k + K_k.T @ Q_u + Q_us.T @ k_k
        V_ss = Q_ss + K_k.T @ Q_uu @ K_k + K_k.T @ Q_us + Q_us.T @ K_k
        V_ss = 0.5 * (V_ss + V_ss.T)

    return BackwardPassResult(
        success=True,
        feedforward=feedforward,
        feedback=feedback,
        expected_decrease=(linear, quadratic),
    )


def forward_pass(nominal: Trajectory, gains: BackwardPassResult, dynamics: Dynamics,
                 step_scale: float, s_init: Optional[DoubleMatrix] = None) -> Optional[Trajectory]:
    """Roll out u_k = u_bar_k + step_scale * k_k + K_k (s_k - s_bar_k); None if it blows up"""
    n_steps = nominal.horizon
    states = np.empty_like(nominal.states)
    controls = np.empty_like(nominal.controls)
    states[0] = nominal.states[0] if s_init is None else s_init

    for k in range(n_steps):
        controls[k] = (nominal.controls[k]
                       + step_scale * gains.feedforward[k]
                       + gains.feedback[k] @ (states[k] - nominal.states[k]))
        states[k + 1] = dynamics.step(states[k], controls[k])

    candidate = Trajectory(states, controls)
    if not candidate.is_finite():
        return None
    return candidate


def solve(dynamics: Dynamics, cost: CostSpec, constraints: Optional[ConstraintSpec],
          s_init: DoubleMatrix, nominal: Optional[Trajectory] = None,
          config: SolverConfig = None) -> Tuple[Trajectory, SolveDiagnostics]:
    """Iterate backward/forward passes until the relative cost decrease drops below tolerance"""
    config = config or SolverConfig()
    constraints = constraints or ConstraintSpec()
    n_steps = cost.reference_states.shape[0] - 1

    if nominal is None:
        controls = np.zeros((n_steps, dynamics.control_dim))
    else:
        controls = nominal.controls
    trajectory = dynamics.rollout(np.asarray(s_init, dtype=float), controls)

    current = augmented_cost(trajectory, cost, constraints)
    if not trajectory.is_finite() or not math.isfinite(current):
        raise InfeasibleSeedError(
            "Nominal trajectory has no finite augmented cost; supply a feasible seed "
            "such as a zero-control rollout"
        )

    diagnostics = SolveDiagnostics(costs=[current])
    regularization = config.reg_init

    while diagnostics.iterations < config.max_iterations:
        diagnostics.iterations += 1
        diagnostics.regularization_trace.append(regularization)

        gains = backward_pass(trajectory, cost, constraints, dynamics, regularization, config.exact_hessian)
        if not gains.success:
            regularization = max(regularization * config.reg_growth, config.reg_min)
            if regularization > config.reg_max:
                diagnostics.status = 'regularization_limit'
                break
            continue

        expected = -gains.predicted_change(1.0)
        if expected <= config.tolerance * max(abs(current), 1e-12):
            diagnostics.status = 'converged'
            diagnostics.converged = True
            break

        accepted = None
        for step_scale in config.line_search_steps:
            candidate = forward_pass(trajectory, gains, dynamics, step_scale)
            if candidate is None:
                continue
            candidate_cost = augmented_cost(candidate, cost, constraints)
            if math.isfinite(candidate_cost) and candidate_cost < current:
                accepted = (candidate, candidate_cost)
                break

        if accepted is None:
            regularization = max(regularization * config.reg_growth, config.reg_min)
            if regularization > config.reg_max:
                diagnostics.status = 'regularization_limit'
                break
            continue

        trajectory, new_cost = accepted
        relative = (current - new_cost) / max(abs(current), 1e-12)
        current = new_cost
        diagnostics.costs.append(current)
        regularization = max(regularization / config.reg_shrink, config.reg_min) if regularization > 0 else 0.0

        if relative < config.tolerance:
            diagnostics.status = 'converged'
            diagnostics.converged = True
            break

    final = cost_expansion(trajectory, cost, constraints)
    diagnostics.barrier_capped = final.barrier_capped
    diagnostics.max_constraint = constraints.max_value(trajectory)

    logger.debug(f"CiLQR finished: status={diagnostics.status}, iterations={diagnostics.iterations}, "
                 f"cost={current:.4f}, max g={diagnostics.max_constraint:.3f}")
    return trajectory, diagnostics


def dump_diagnostics(diagnostics_list: Sequence[SolveDiagnostics]) -> List[Dict[str, Any]]:
    return [diagnostics.to_dict() for diagnostics in diagnostics_list]
