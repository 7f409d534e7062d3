"""
Vehicle Dynamics - vehicle state, actuator commands and the kinematic bicycle model
"""

import math
import logging
from dataclasses import dataclass, replace
from typing import List, Tuple

import numpy as np

logger = logging.getLogger(__name__)

# Actuator and body limits of the ego vehicle
MAX_ACCEL = 5.5     # m/s^2
MAX_STEER = 1.0     # rad
MAX_SPEED = 60.0    # m/s
EGO_LENGTH = 5.0    # m
EGO_WIDTH = 2.0     # m

# Axle distances from the center of gravity
LF = 2.5
LR = 2.5


@dataclass
class VehicleState:
    """Pose and velocity of one vehicle in the global frame"""
    x: float
    y: float
    speed: float
    heading: float
    length: float = EGO_LENGTH
    width: float = EGO_WIDTH
    lane_id: int = 0
    direction: int = 1

    def validate(self) -> List[str]:
        """Validate state data"""
        errors = []

        for name in ('x', 'y', 'speed', 'heading', 'length', 'width'):
            if not math.isfinite(getattr(self, name)):
                errors.append(f"{name} must be finite")

        if self.length <= 0:
            errors.append("length must be positive")
        if self.width <= 0:
            errors.append("width must be positive")
        if self.direction not in (1, -1):
            errors.append("direction must be +1 or -1")
        if self.lane_id not in (0, 1):
            errors.append("lane_id must be 0 or 1")

        return errors

    @property
    def vx(self) -> float:
        return self.speed * math.cos(self.heading)

    @property
    def vy(self) -> float:
        return self.speed * math.sin(self.heading)

    def as_array(self) -> np.ndarray:
        """State vector (x, y, v, heading) used by the planner"""
        return np.array([self.x, self.y, self.speed, self.heading], dtype=float)

    def corners(self) -> np.ndarray:
        return footprint_corners(self.x, self.y, self.heading, self.length, self.width)


@dataclass(frozen=True)
class Action:
    """Longitudinal acceleration (m/s^2) and front-wheel steering angle (rad)"""
    accel: float = 0.0
    steer: float = 0.0

    def is_finite(self) -> bool:
        return math.isfinite(self.accel) and math.isfinite(self.steer)

    def clamped(self) -> 'Action':
        """Copy of the action limited to the actuator envelope"""
        return Action(
            accel=min(max(self.accel, -MAX_ACCEL), MAX_ACCEL),
            steer=min(max(self.steer, -MAX_STEER), MAX_STEER),
        )

    def as_array(self) -> np.ndarray:
        return np.array([self.accel, self.steer], dtype=float)

    @classmethod
    def from_array(cls, values) -> 'Action':
        values = np.asarray(values, dtype=float).reshape(-1)
        return cls(accel=float(values[0]), steer=float(values[1]))

    def normalized(self) -> np.ndarray:
        """Action scaled to [-1, 1] per dimension"""
        return np.array([self.accel / MAX_ACCEL, self.steer / MAX_STEER])

    @classmethod
    def from_normalized(cls, values) -> 'Action':
        values = np.asarray(values, dtype=float).reshape(-1)
        return cls(accel=float(values[0]) * MAX_ACCEL, steer=float(values[1]) * MAX_STEER)


def slip_angle(steer: float, lf: float = LF, lr: float = LR) -> float:
    return math.atan(lr * math.tan(steer) / (lf + lr))


def bicycle_derivative(state: np.ndarray, accel: float, steer: float,
                       lf: float = LF, lr: float = LR) -> np.ndarray:
    """Continuous kinematic bicycle model for the state (x, y, v, heading)"""
    _, _, v, psi = state
    beta = slip_angle(steer, lf, lr)
    return np.array([
        v * math.cos(psi + beta),
        v * math.sin(psi + beta),
        accel,
        (v / lr) * math.sin(beta),
    ])


def step_ego_kinematics(state: VehicleState, action: Action, dt: float) -> VehicleState:
    """Advance the ego one step with a single RK4 step of the bicycle model.

    Speed is clamped to [0, MAX_SPEED] after integration.
    """
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")

    errors = state.validate()
    if errors:
        raise ValueError("Invalid vehicle state: " + "; ".join(errors))
    if not action.is_finite():
        raise ValueError(f"Non-finite action: {action}")

    command = action.clamped()
    s = state.as_array()

    k1 = bicycle_derivative(s, command.accel, command.steer)
    k2 = bicycle_derivative(s + 0.5 * dt * k1, command.accel, command.steer)
    k3 = bicycle_derivative(s + 0.5 * dt * k2, command.accel, command.steer)
    k4 = bicycle_derivative(s + dt * k3, command.accel, command.steer)
    s_next = s + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)

    return replace(
        state,
        x=float(s_next[0]),
        y=float(s_next[1]),
        speed=float(min(max(s_next[2], 0.0), MAX_SPEED)),
        heading=float(s_next[3]),
    )


def footprint_corners(x: float, y: float, heading: float,
                      length: float, width: float) -> np.ndarray:
    """Four corners (4x2) of an oriented rectangle centered at (x, y)"""
    c, s = math.cos(heading), math.sin(heading)
    half_l, half_w = 0.5 * length, 0.5 * width
    local = np.array([
        [half_l, half_w],
        [half_l, -half_w],
        [-half_l, -half_w],
        [-half_l, half_w],
    ])
    rotation = np.array([[c, -s], [s, c]])
    return local @ rotation.T + np.array([x, y])


def _project(corners: np.ndarray, axis: np.ndarray) -> Tuple[float, float]:
    values = corners @ axis
    return float(values.min()), float(values.max())


def rectangles_overlap(corners_a: np.ndarray, corners_b: np.ndarray) -> bool:
    """Separating axis test for two convex quadrilaterals.

    Touching edges count as separated.
    """
    for corners in (corners_a, corners_b):
        for i in range(2):
            edge = corners[i + 1] - corners[i]
            axis = np.array([-edge[1], edge[0]])
            norm = np.hypot(axis[0], axis[1])
            if norm == 0.0:
                continue
            axis /= norm
            min_a, max_a = _project(corners_a, axis)
            min_b, max_b = _project(corners_b, axis)
            if max_a <= min_b or max_b <= min_a:
                return False
    return True


def vehicles_overlap(a: VehicleState, b: VehicleState) -> bool:
    """Oriented-rectangle overlap with a cheap bounding-circle prefilter"""
    reach = 0.5 * (math.hypot(a.length, a.width) + math.hypot(b.length, b.width))
    if math.hypot(a.x - b.x, a.y - b.y) >= reach:
        return False
    return rectangles_overlap(a.corners(), b.corners())
