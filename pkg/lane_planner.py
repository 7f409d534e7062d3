"""
Lane Planner - responsive lane follow: CiLQR plans along a lane-center reference around predicted NPCs
"""

import math
import logging
from dataclasses import dataclass, field
from typing import List, Optional, Tuple

import numpy as np

from cilqr_solver import (
    BicycleDynamics, ConstraintSpec, ControlBound, CostSpec, EllipseObstacle,
    InfeasibleSeedError, SolveDiagnostics, SolverConfig, StateBound, Trajectory, solve,
)
from highway_env import NpcVehicle, World
from vehicle_dynamics import (
    MAX_ACCEL, MAX_SPEED, MAX_STEER, Action, footprint_corners, rectangles_overlap, step_ego_kinematics,
)

logger = logging.getLogger(__name__)


@dataclass
class PlannerConfig:
    """Receding-horizon settings of the lane-follow planner"""
    horizon: int = 50                   # knots
    plan_dt: float = 0.1                # s per knot
    replan_interval: int = 10           # simulation steps between solves
    desired_speed: float = 45.0         # m/s
    reference_accel: float = 2.0        # m/s^2 ramp of the speed reference
    overtake_range: float = 120.0       # bumper gap below which a slower leader is overtaken
    overtake_speed_margin: float = 2.0  # leader must be this much slower than desired_speed
    obstacle_margin: float = 1.0        # m added to the combined half-extents
    obstacle_range: float = 400.0       # NPCs farther than this are ignored
    lateral_margin: float = 1.0         # ego center kept this far from the road edges
    state_weights: Tuple[float, float, float, float] = (0.0, 1.0, 0.5, 2.0)
    control_weights: Tuple[float, float] = (0.1, 1.0)
    barrier_q1: float = 1.0
    barrier_q2: float = 5.0
    max_iterations: int = 10
    tolerance: float = 1e-3

    def __post_init__(self):
        errors = self.validate()
        if errors:
            raise ValueError("Planner configuration errors: " + "; ".join(errors))

    def validate(self) -> List[str]:
        errors = []

        if self.horizon < 1:
            errors.append("horizon must be at least 1")
        if self.plan_dt <= 0:
            errors.append("plan_dt must be positive")
        if self.replan_interval < 1:
            errors.append("replan_interval must be at least 1")
        if not 0 < self.desired_speed <= MAX_SPEED:
            errors.append(f"desired_speed must lie in (0, {MAX_SPEED}]")
        if self.reference_accel <= 0:
            errors.append("reference_accel must be positive")
        if len(self.state_weights) != 4 or any(w < 0 for w in self.state_weights):
            errors.append("state_weights needs four non-negative entries")
        if len(self.control_weights) != 2 or any(w <= 0 for w in self.control_weights):
            errors.append("control_weights needs two positive entries")

        return errors

    def solver_config(self) -> SolverConfig:
        return SolverConfig(
            horizon=self.horizon,
            max_iterations=self.max_iterations,
            tolerance=self.tolerance,
        )


@dataclass
class LaneTarget:
    """Lane the reference path follows and the leader it overtakes, if any"""
    lane_id: int = 0
    desired_speed: float = 45.0
    overtake: Optional[NpcVehicle] = None


@dataclass
class PlanResult:
    trajectory: Trajectory
    reference: np.ndarray
    target: LaneTarget
    diagnostics: Optional[SolveDiagnostics] = None
    feasible: bool = True
    reason: str = ''
    obstacles: List[NpcVehicle] = field(default_factory=list)

    @property
    def first_action(self) -> Action:
        return Action.from_array(self.trajectory.controls[0]).clamped()

    def to_dict(self) -> dict:
        record = {'feasible': self.feasible, 'reason': self.reason,
                  'target_lane': self.target.lane_id,
                  'overtaking': self.target.overtake is not None}
        if self.diagnostics is not None:
            record.update(self.diagnostics.to_dict())
        return record


def pass_clearance(ego_length: float, leader_length: float) -> float:
    """Longitudinal lead over a leader's center needed before merging back"""
    return 0.5 * (ego_length + leader_length) + 2.0 * ego_length


def find_leader(world: World) -> Optional[NpcVehicle]:
    """Rearmost lane-0 NPC that the ego has not yet passed by the pass clearance"""
    ego = world.ego
    candidates = [
        npc for npc in world.npcs
        if npc.state.lane_id == 0 and npc.state.direction > 0
        and npc.state.x > ego.x - pass_clearance(ego.length, npc.state.length)
    ]
    if not candidates:
        return None
    return min(candidates, key=lambda npc: npc.state.x)


def bumper_gap(world: World, npc: NpcVehicle) -> float:
    return npc.state.x - world.ego.x - 0.5 * (world.ego.length + npc.state.length)


def choose_target(world: World, config: PlannerConfig = None) -> LaneTarget:
    """Overtake a slower leader within range, otherwise follow the own lane"""
    config = config or PlannerConfig()
    target = LaneTarget(lane_id=0, desired_speed=config.desired_speed)

    leader = find_leader(world)
    if leader is None:
        return target

    slower = leader.state.speed < config.desired_speed - config.overtake_speed_margin
    if slower and bumper_gap(world, leader) < config.overtake_range:
        target.overtake = leader
    return target


def build_reference(world: World, target: LaneTarget, config: PlannerConfig) -> np.ndarray:
    """Reference states (x, y, v, heading) for knots 0..N"""
    ego = world.ego
    road = world.road
    times = np.arange(config.horizon + 1) * config.plan_dt

    if ego.speed <= target.desired_speed:
        speeds = np.minimum(target.desired_speed, ego.speed + config.reference_accel * times)
    else:
        speeds = np.maximum(target.desired_speed, ego.speed - config.reference_accel * times)

    xs = np.empty_like(times)
    xs[0] = ego.x
    xs[1:] = ego.x + np.cumsum(0.5 * (speeds[1:] + speeds[:-1]) * config.plan_dt)

    ys = np.full_like(times, road.lane_center(target.lane_id))
    if target.overtake is not None:
        leader = target.overtake.state
        leader_xs = leader.x + leader.vx * times
        clearance = pass_clearance(ego.length, leader.length)
        ys = np.where(xs < leader_xs + clearance, road.lane_center(world.opposing_lane), ys)

    return np.column_stack([xs, ys, speeds, np.zeros_like(times)])


def predict_npc(npc: NpcVehicle, times: np.ndarray) -> np.ndarray:
    """Constant-velocity center positions (len(times), 2)"""
    state = npc.state
    return np.column_stack([state.x + state.vx * times, state.y + state.vy * times])


def build_constraints(world: World, config: PlannerConfig) -> Tuple[ConstraintSpec, List[NpcVehicle]]:
    ego = world.ego
    times = np.arange(config.horizon + 1) * config.plan_dt
    nearby = [npc for npc in world.npcs if abs(npc.state.x - ego.x) < config.obstacle_range]

    state_constraints = [
        StateBound(1, world.road.road_width - config.lateral_margin, upper=True),
        StateBound(1, config.lateral_margin, upper=False),
        StateBound(2, MAX_SPEED, upper=True),
        StateBound(2, 0.0, upper=False),
    ]
    for npc in nearby:
        state_constraints.append(EllipseObstacle(
            predict_npc(npc, times),
            semi_x=0.5 * (ego.length + npc.state.length) + config.obstacle_margin,
            semi_y=0.5 * (ego.width + npc.state.width) + config.obstacle_margin,
            label=npc.profile_name,
        ))

    control_constraints = [
        ControlBound(0, MAX_ACCEL, upper=True),
        ControlBound(0, -MAX_ACCEL, upper=False),
        ControlBound(1, MAX_STEER, upper=True),
        ControlBound(1, -MAX_STEER, upper=False),
    ]
    spec = ConstraintSpec(state_constraints, control_constraints,
                          barrier_q1=config.barrier_q1, barrier_q2=config.barrier_q2)
    return spec, nearby


def assess_plan(world: World, trajectory: Trajectory, reference: np.ndarray,
                obstacles: List[NpcVehicle], config: PlannerConfig) -> Tuple[bool, str]:
    """Verdict on a planned trajectory: (feasible, reason)"""
    if not trajectory.is_finite():
        return False, 'solver_failure'

    ego = world.ego
    road_width = world.road.road_width
    times = np.arange(config.horizon + 1) * config.plan_dt
    states = trajectory.states

    for k in range(states.shape[0]):
        corners = footprint_corners(states[k, 0], states[k, 1], states[k, 3], ego.length, ego.width)
        if corners[:, 1].min() < 0.0 or corners[:, 1].max() > road_width:
            return False, 'boundary'

    for npc in obstacles:
        centers = predict_npc(npc, times)
        reach = 0.5 * (math.hypot(ego.length, ego.width) + math.hypot(npc.state.length, npc.state.width))
        close = np.hypot(states[:, 0] - centers[:, 0], states[:, 1] - centers[:, 1]) < reach
        for k in np.flatnonzero(close):
            ego_corners = footprint_corners(states[k, 0], states[k, 1], states[k, 3], ego.length, ego.width)
            npc_corners = footprint_corners(centers[k, 0], centers[k, 1], npc.state.heading,
                                            npc.state.length, npc.state.width)
            if rectangles_overlap(ego_corners, npc_corners):
                return False, 'collision'

    if np.mean(np.abs(states[:, 1] - reference[:, 1])) > 0.5 * world.road.lane_width:
        return False, 'lane_abandoned'

    return True, ''


def held_control_stays_on_road(world: World, action: Action, config: PlannerConfig) -> bool:
    """Whether the ego footprint stays on the road while action is held for one re-plan interval.

    The plan only sees the knots; this integrates the plant at the simulation
    step (plan_dt / replan_interval) and checks every intermediate pose.
    """
    sim_dt = config.plan_dt / config.replan_interval
    road_width = world.road.road_width
    state = world.ego
    for _ in range(config.replan_interval):
        state = step_ego_kinematics(state, action, sim_dt)
        corners_y = state.corners()[:, 1]
        if corners_y.min() < 0.0 or corners_y.max() > road_width:
            return False
    return True


def _warm_start(previous: Optional[PlanResult], horizon: int) -> np.ndarray:
    if previous is None or previous.trajectory.horizon != horizon:
        return np.zeros((horizon, 2))
    controls = previous.trajectory.controls
    return np.vstack([controls[1:], controls[-1:]])


def plan_lane_follow(world: World, horizon: int = None, target: LaneTarget = None,
                     previous: Optional[PlanResult] = None,
                     config: PlannerConfig = None) -> PlanResult:
    """Plan an obstacle-free lane-follow trajectory and judge whether it is usable"""
    config = config or PlannerConfig()
    if horizon is not None and horizon != config.horizon:
        config = PlannerConfig(**{**config.__dict__, 'horizon': horizon})
    target = target or choose_target(world, config)

    reference = build_reference(world, target, config)
    constraints, nearby = build_constraints(world, config)
    cost = CostSpec(
        state_weight=np.diag(config.state_weights),
        control_weight=np.diag(config.control_weights),
        final_weight=np.diag(config.state_weights),
        reference_states=reference,
    )
    dynamics = BicycleDynamics(config.plan_dt)
    s_init = world.ego.as_array()

    seed = dynamics.rollout(s_init, _warm_start(previous, config.horizon))
    if not seed.is_finite():
        seed = dynamics.rollout(s_init, np.zeros((config.horizon, 2)))

    try:
        trajectory, diagnostics = solve(dynamics, cost, constraints, s_init, seed, config.solver_config())
    except InfeasibleSeedError as e:
        logger.warning(f"Lane-follow plan at step {world.step_count} has no feasible seed: {e}")
        return PlanResult(trajectory=seed, reference=reference, target=target,
                          feasible=False, reason='solver_failure', obstacles=nearby)

    if diagnostics.status == 'regularization_limit':
        feasible, reason = False, 'solver_failure'
    else:
        feasible, reason = assess_plan(world, trajectory, reference, nearby, config)
    if feasible:
        first = Action.from_array(trajectory.controls[0]).clamped()
        if not held_control_stays_on_road(world, first, config):
            feasible, reason = False, 'boundary'

    if not feasible:
        logger.debug(f"Lane-follow plan infeasible at step {world.step_count}: {reason}")

    return PlanResult(trajectory=trajectory, reference=reference, target=target,
                      diagnostics=diagnostics, feasible=feasible, reason=reason, obstacles=nearby)
