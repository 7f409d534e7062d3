"""
Expert System - guidance state machine over CiLQR lane follow and PID auxiliary controllers

Modes:
    RLF  responsive lane follow, the CiLQR plan is used as is
    FLV  follow the leading vehicle in the own lane
    DMB  decelerate behind the leader on the opposite lane, then merge back
    AMB  accelerate past the leader on the opposite lane, then merge back
"""

import math
import time
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Dict, List, Optional

import numpy as np

from highway_env import NpcVehicle, World
from lane_planner import PlannerConfig, PlanResult, bumper_gap, find_leader, plan_lane_follow
from traffic_models import DRIVER_PROFILES
from vehicle_dynamics import MAX_ACCEL, MAX_STEER, Action

logger = logging.getLogger(__name__)


class GuidanceMode(Enum):
    RLF = "RLF"
    FLV = "FLV"
    DMB = "DMB"
    AMB = "AMB"


@dataclass
class PidGains:
    kp: float = 0.0
    ki: float = 0.0
    kd: float = 0.0
    integral_limit: float = 10.0    # anti-windup bound on the accumulated error


class PidController:
    """Discrete PID with a clamped integrator and no derivative kick on the first sample"""

    def __init__(self, gains: PidGains):
        self.gains = gains
        self.integral = 0.0
        self.previous_error: Optional[float] = None

    def reset(self):
        self.integral = 0.0
        self.previous_error = None

    def step(self, error: float, dt: float) -> float:
        return pid_step(self, error, dt)


def pid_step(controller: PidController, error: float, dt: float) -> float:
    """kp*e + ki*integral(e dt) + kd*de/dt, updating the controller state"""
    if dt <= 0:
        raise ValueError(f"dt must be positive, got {dt}")

    gains = controller.gains
    limit = gains.integral_limit
    controller.integral = min(max(controller.integral + error * dt, -limit), limit)

    derivative = 0.0
    if controller.previous_error is not None:
        derivative = (error - controller.previous_error) / dt
    controller.previous_error = error

    return gains.kp * error + gains.ki * controller.integral + gains.kd * derivative


@dataclass
class ExpertConfig:
    """Auxiliary-controller settings of the expert"""
    steering: PidGains = field(default_factory=lambda: PidGains(kp=0.05, ki=0.005, kd=0.0, integral_limit=5.0))
    gap: PidGains = field(default_factory=lambda: PidGains(kp=0.5, ki=0.0, kd=0.3))
    speed: PidGains = field(default_factory=lambda: PidGains(kp=0.5, ki=0.0, kd=0.0))
    preview_time: float = 0.4           # s, steering error is taken at a point v*preview_time ahead
    follow_profile: str = 'normal'      # desired gap = jam_distance + time_headway * speed
    dmb_decel: float = -3.0             # m/s^2
    amb_accel: float = 3.0              # m/s^2
    clear_lengths: float = 2.0          # lane free when every NPC is this many ego lengths away
    dt: float = 0.01
    planner: PlannerConfig = field(default_factory=PlannerConfig)

    def __post_init__(self):
        errors = []
        if self.follow_profile not in DRIVER_PROFILES:
            errors.append(f"unknown follow_profile '{self.follow_profile}'")
        if not -MAX_ACCEL <= self.dmb_decel < 0:
            errors.append(f"dmb_decel must lie in [-{MAX_ACCEL}, 0)")
        if not 0 < self.amb_accel <= MAX_ACCEL:
            errors.append(f"amb_accel must lie in (0, {MAX_ACCEL}]")
        if self.preview_time < 0:
            errors.append("preview_time must be non-negative")
        if self.dt <= 0:
            errors.append("dt must be positive")
        if errors:
            raise ValueError("Expert configuration errors: " + "; ".join(errors))


@dataclass
class ExpertContext:
    """What the transition rule looks at on one step"""
    plan: Optional[PlanResult]
    plan_feasible: bool
    on_opposite_lane: bool
    leader: Optional[NpcVehicle] = None
    crossed_leader: bool = False
    lane_free: bool = True


def evaluate_transition(context: ExpertContext) -> GuidanceMode:
    if context.plan_feasible:
        return GuidanceMode.RLF
    if not context.on_opposite_lane:
        return GuidanceMode.FLV
    if not context.crossed_leader:
        return GuidanceMode.DMB
    return GuidanceMode.AMB


def own_lane_free(world: World, clear_lengths: float = 2.0) -> bool:
    """No NPC of the ego's original lane within clear_lengths ego lengths, bumper to bumper"""
    ego = world.ego
    margin = clear_lengths * ego.length
    for npc in world.npcs:
        if npc.state.lane_id != 0:
            continue
        gap = abs(npc.state.x - ego.x) - 0.5 * (ego.length + npc.state.length)
        if gap < margin:
            return False
    return True


class ExpertDriver:
    """Expert policy: plan, pick a mode, emit that mode's reference action"""

    def __init__(self, config: ExpertConfig = None, diagnostics_sink: Optional[List[Dict[str, Any]]] = None):
        self.config = config or ExpertConfig()
        self.planner_config = self.config.planner
        self.steer_pid = PidController(self.config.steering)
        self.gap_pid = PidController(self.config.gap)
        self.speed_pid = PidController(self.config.speed)
        self.follow_profile = DRIVER_PROFILES[self.config.follow_profile]
        self.diagnostics_sink = diagnostics_sink

        self.mode = GuidanceMode.RLF
        self.plan: Optional[PlanResult] = None
        self.plan_step: Optional[int] = None
        self.last_compute_ms = 0.0
        self.mode_history: List[GuidanceMode] = []

    def reset(self):
        self.mode = GuidanceMode.RLF
        self.plan = None
        self.plan_step = None
        self.last_compute_ms = 0.0
        self.mode_history = []
        self._reset_controllers()

    def _reset_controllers(self):
        self.steer_pid.reset()
        self.gap_pid.reset()
        self.speed_pid.reset()

    def update_plan(self, world: World) -> PlanResult:
        """Re-solve on the re-plan cadence, otherwise keep the cached plan"""
        due = (self.plan is None or self.plan_step is None
               or world.step_count - self.plan_step >= self.planner_config.replan_interval
               or world.step_count < self.plan_step)
        if due:
            self.plan = plan_lane_follow(world, previous=self.plan, config=self.planner_config)
            self.plan_step = world.step_count
            if self.diagnostics_sink is not None:
                self.diagnostics_sink.append({'step': world.step_count, **self.plan.to_dict()})
        return self.plan

    def build_context(self, world: World) -> ExpertContext:
        plan = self.update_plan(world)
        leader = find_leader(world)
        on_opposite = world.ego_lane() == world.opposing_lane
        return ExpertContext(
            plan=plan,
            plan_feasible=plan.feasible,
            on_opposite_lane=on_opposite,
            leader=leader,
            crossed_leader=leader is None or world.ego.x > leader.state.x,
            lane_free=own_lane_free(world, self.config.clear_lengths),
        )

    def _steer_to(self, world: World, lane_id: int) -> float:
        ego = world.ego
        preview_y = ego.y + self.config.preview_time * ego.speed * math.sin(ego.heading)
        error = world.road.lane_center(lane_id) - preview_y
        return self.steer_pid.step(error, self.config.dt)

    def _follow_accel(self, world: World, leader: Optional[NpcVehicle]) -> float:
        ego = world.ego
        cruise = self.speed_pid.step(self.planner_config.desired_speed - ego.speed, self.config.dt)
        if leader is None or bumper_gap(world, leader) < 0:
            return cruise
        profile = self.follow_profile
        desired_gap = profile.jam_distance + profile.desired_time_headway * ego.speed
        # never faster than the cruise command
        return min(self.gap_pid.step(bumper_gap(world, leader) - desired_gap, self.config.dt), cruise)

    def reference_action(self, world: World, mode: GuidanceMode, context: ExpertContext = None) -> Action:
        """Command of the given mode, clamped to the actuator limits"""
        context = context or self.build_context(world)
        own_lane, opposite_lane = 0, world.opposing_lane

        if mode == GuidanceMode.RLF:
            return context.plan.first_action

        if mode == GuidanceMode.FLV:
            accel = self._follow_accel(world, context.leader)
            steer = self._steer_to(world, own_lane)
        elif mode == GuidanceMode.DMB:
            if context.lane_free:
                accel = self._follow_accel(world, context.leader)
                steer = self._steer_to(world, own_lane)
            else:
                accel = self.config.dmb_decel
                steer = self._steer_to(world, opposite_lane)
        else:
            if context.lane_free:
                accel = 0.0
                steer = self._steer_to(world, own_lane)
            else:
                accel = self.config.amb_accel
                steer = self._steer_to(world, opposite_lane)

        return Action(accel=float(np.clip(accel, -MAX_ACCEL, MAX_ACCEL)),
                      steer=float(np.clip(steer, -MAX_STEER, MAX_STEER)))

    def __call__(self, observation, world: World) -> Action:
        started = time.perf_counter()

        context = self.build_context(world)
        mode = evaluate_transition(context)
        if mode != self.mode:
            logger.debug(f"Step {world.step_count}: {self.mode.value} -> {mode.value}"
                         f"{' (' + context.plan.reason + ')' if context.plan.reason else ''}")
            self._reset_controllers()
            self.mode = mode
        self.mode_history.append(mode)

        action = self.reference_action(world, mode, context)
        self.last_compute_ms = (time.perf_counter() - started) * 1000.0
        return action


def expert_policy(world: World, driver: ExpertDriver = None) -> Action:
    """One expert query on a world; a fresh driver is stateless between calls"""
    driver = driver or ExpertDriver()
    return driver(None, world)
