"""
Highway Environment - two-lane world, NPC traffic, observations, rewards and episodes
"""

import math
import time
import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Dict, List, Optional, Sequence

import numpy as np
import pandas as pd

from scenario_config import RoadSpec, RewardWeights, ScenarioConfig
from traffic_models import (
    DRIVER_PROFILES, DriverProfile, MobilContext, idm_acceleration, mobil_decision,
)
from vehicle_dynamics import (
    EGO_LENGTH, EGO_WIDTH, Action, VehicleState, step_ego_kinematics, vehicles_overlap,
)

logger = logging.getLogger(__name__)

OBSERVATION_COLUMNS = 6


class PolicyActionError(RuntimeError):
    """Raised when a policy emits a non-finite action"""


class TerminationReason(Enum):
    RUNNING = "Running"
    VEHICLE_COLLISION = "VehicleCollision"
    BOUNDARY_COLLISION = "BoundaryCollision"
    DESTINATION = "Destination"
    TIMEOUT = "Timeout"


@dataclass
class NpcVehicle:
    state: VehicleState
    profile: DriverProfile
    profile_name: str


@dataclass
class CollisionEvent:
    kind: str                       # 'vehicle' or 'boundary'
    npc_index: Optional[int] = None


@dataclass
class World:
    """Mutable simulation state of one episode"""
    road: RoadSpec
    ego: VehicleState
    npcs: List[NpcVehicle] = field(default_factory=list)
    step_count: int = 0
    braking_floor: float = -9.0
    mobil_interval: int = 100

    @property
    def opposing_lane(self) -> int:
        return 1

    def ego_lane(self) -> int:
        return self.road.lane_of(self.ego.y)

    def add_npc(self, profile_name: str, x: float, lane_id: int, speed: float = None) -> NpcVehicle:
        """Place an NPC on a lane center, travelling in the lane's direction"""
        profile = DRIVER_PROFILES[profile_name]
        direction = self.road.lane_directions[lane_id]
        npc = NpcVehicle(
            state=VehicleState(
                x=x,
                y=self.road.lane_center(lane_id),
                speed=profile.desired_speed if speed is None else speed,
                heading=0.0 if direction > 0 else math.pi,
                length=profile.length,
                width=profile.width,
                lane_id=lane_id,
                direction=direction,
            ),
            profile=profile,
            profile_name=profile_name,
        )
        self.npcs.append(npc)
        return npc

    def _lane_queue(self, lane_id: int, direction: int) -> List[tuple]:
        """Vehicles in a lane sorted by progress along the lane's direction.

        Entries are (progress, npc index or None for the ego).
        """
        queue = [
            (npc.state.x * direction, idx)
            for idx, npc in enumerate(self.npcs)
            if npc.state.lane_id == lane_id and npc.state.direction == direction
        ]
        if self.ego_lane() == lane_id:
            queue.append((self.ego.x * direction, None))
        queue.sort(key=lambda entry: (entry[0], -1 if entry[1] is None else entry[1]))
        return queue

    def _vehicle(self, idx: Optional[int]) -> VehicleState:
        return self.ego if idx is None else self.npcs[idx].state

    def _gap_and_speed(self, follower: VehicleState, leader: VehicleState, direction: int):
        gap = (leader.x - follower.x) * direction - 0.5 * (follower.length + leader.length)
        leader_speed = leader.vx * direction
        return gap, leader_speed

    def _mobil_contexts(self, idx: int, lane_id: int) -> MobilContext:
        """Leader/follower context of NPC idx as seen in lane_id, the ego included"""
        npc = self.npcs[idx].state
        direction = npc.direction
        neighbours = [
            (other.state, other.profile) for other_idx, other in enumerate(self.npcs)
            if other_idx != idx and other.state.lane_id == lane_id and other.state.direction == direction
        ]
        if self.ego_lane() == lane_id and self.ego.direction == direction:
            # no profile of its own; judged as a normal driver when it follows
            neighbours.append((self.ego, None))

        context = MobilContext()
        best_ahead, best_behind = math.inf, math.inf
        for other, profile in neighbours:
            offset = (other.x - npc.x) * direction
            gap = abs(offset) - 0.5 * (npc.length + other.length)
            if offset >= 0 and gap < best_ahead:
                best_ahead = gap
                context.leader_gap = gap
                context.leader_speed = other.speed
            elif offset < 0 and gap < best_behind:
                best_behind = gap
                context.follower_gap = gap
                context.follower_speed = other.speed
                context.follower_profile = profile
        return context

    def _apply_lane_changes(self):
        """MOBIL lane changes between lanes that share a travel direction"""
        if self.road.lane_directions[0] != self.road.lane_directions[1]:
            return

        for idx, npc in enumerate(self.npcs):
            current_lane = npc.state.lane_id
            target_lane = 1 - current_lane
            current = self._mobil_contexts(idx, current_lane)
            target = self._mobil_contexts(idx, target_lane)
            if mobil_decision(npc.state.speed, current, target, npc.profile, self.braking_floor):
                npc.state = replace(npc.state, lane_id=target_lane,
                                    y=self.road.lane_center(target_lane))
                logger.debug(f"NPC {idx} changed lane {current_lane} -> {target_lane}")

    def advance_traffic(self, dt: float):
        """Advance every NPC one step with IDM, all accelerations computed first"""
        accelerations = np.zeros(len(self.npcs))

        lanes = {(npc.state.lane_id, npc.state.direction) for npc in self.npcs}
        for lane_id, direction in sorted(lanes):
            queue = self._lane_queue(lane_id, direction)
            for position, (_, idx) in enumerate(queue):
                if idx is None:
                    continue
                npc = self.npcs[idx]
                if position + 1 < len(queue):
                    leader = self._vehicle(queue[position + 1][1])
                    gap, leader_speed = self._gap_and_speed(npc.state, leader, direction)
                    accelerations[idx] = idm_acceleration(
                        npc.state.speed, gap, npc.state.speed - leader_speed,
                        npc.profile, self.braking_floor,
                    )
                else:
                    accelerations[idx] = idm_acceleration(
                        npc.state.speed, math.inf, 0.0, npc.profile, self.braking_floor,
                    )

        for npc, accel in zip(self.npcs, accelerations):
            state = npc.state
            new_speed = max(state.speed + float(accel) * dt, 0.0)
            travelled = 0.5 * (state.speed + new_speed) * dt
            npc.state = replace(state, speed=new_speed, x=state.x + state.direction * travelled)

        if self.npcs and self.mobil_interval and (self.step_count + 1) % self.mobil_interval == 0:
            self._apply_lane_changes()


def spawn_traffic(seed: int, scenario: ScenarioConfig) -> World:
    """Build the initial world: ego at its start pose plus seeded NPC traffic"""
    road = scenario.road
    traffic = scenario.traffic
    sim = scenario.simulation

    ego = VehicleState(
        x=sim.ego_start_x,
        y=road.lane_center(0),
        speed=sim.ego_initial_speed,
        heading=0.0,
        length=EGO_LENGTH,
        width=EGO_WIDTH,
        lane_id=0,
        direction=1,
    )
    world = World(road=road, ego=ego, braking_floor=traffic.braking_floor,
                  mobil_interval=traffic.mobil_interval)

    if not traffic.enabled:
        return world

    rng = np.random.Generator(np.random.PCG64(seed))
    names = sorted(traffic.mixture)
    probabilities = np.array([traffic.mixture[name] for name in names], dtype=float)
    probabilities /= probabilities.sum()

    layout = [(0, traffic.same_direction_spacing, road.road_length + traffic.same_direction_spacing)]
    if road.lane_directions[1] < 0:
        layout.append((1, traffic.opposing_spacing, road.road_length * traffic.opposing_extent))
    else:
        layout.append((1, traffic.same_direction_spacing, road.road_length + traffic.same_direction_spacing))

    for lane_id, spacing, extent in layout:
        k = 1
        while k * spacing <= extent:
            name = names[int(rng.choice(len(names), p=probabilities))]
            noise = float(rng.uniform(-traffic.spawn_noise, traffic.spawn_noise))
            world.add_npc(name, sim.ego_start_x + k * spacing + noise, lane_id)
            k += 1

    logger.debug(f"Spawned {len(world.npcs)} NPCs for seed {seed}")
    return world


def build_observation(world: World, rows: int = 7) -> np.ndarray:
    """rows x 6 matrix (presence, x, y, vx, vy, heading), ego first then nearest NPCs"""
    observation = np.zeros((rows, OBSERVATION_COLUMNS))
    ego = world.ego
    observation[0] = (1.0, ego.x, ego.y, ego.vx, ego.vy, ego.heading)

    if rows > 1 and world.npcs:
        positions = np.array([(npc.state.x, npc.state.y) for npc in world.npcs])
        distances = np.hypot(positions[:, 0] - ego.x, positions[:, 1] - ego.y)
        order = np.argsort(distances, kind='stable')[:rows - 1]
        for row, idx in enumerate(order, start=1):
            state = world.npcs[idx].state
            observation[row] = (1.0, state.x, state.y, state.vx, state.vy, state.heading)

    return observation


def detect_collisions(world: World) -> List[CollisionEvent]:
    """Ego-vs-NPC rectangle overlaps and ego-vs-road-edge crossings"""
    events = []
    corners_y = world.ego.corners()[:, 1]
    if corners_y.min() < 0.0 or corners_y.max() > world.road.road_width:
        events.append(CollisionEvent(kind='boundary'))

    for idx, npc in enumerate(world.npcs):
        if vehicles_overlap(world.ego, npc.state):
            events.append(CollisionEvent(kind='vehicle', npc_index=idx))

    return events


@dataclass
class RewardBreakdown:
    collision: float = 0.0
    velocity: float = 0.0
    steering: float = 0.0
    acceleration: float = 0.0
    prize: float = 0.0

    @property
    def total(self) -> float:
        return self.collision + self.velocity + self.steering + self.acceleration + self.prize

    def as_dict(self) -> Dict[str, float]:
        return {
            'r_collision': self.collision,
            'r_velocity': self.velocity,
            'r_steering': self.steering,
            'r_acceleration': self.acceleration,
            'r_prize': self.prize,
        }


def reward_components(state: VehicleState, action: Action, collided: bool, arrived: bool,
                      weights: RewardWeights) -> RewardBreakdown:
    """Weighted reward terms of one step"""
    speed_band = weights.v_max - weights.v_min
    r_velocity = min(max((state.speed - weights.v_min) / speed_band, 0.0), 1.0)
    return RewardBreakdown(
        collision=weights.c1 * (1.0 if collided else 0.0),
        velocity=weights.c2 * r_velocity,
        steering=weights.c3 * -(action.steer ** 2),
        acceleration=weights.c4 * -(action.accel ** 2),
        prize=weights.c5 * (1.0 if arrived else 0.0),
    )


def compute_reward(state: VehicleState, action: Action, collided: bool, arrived: bool,
                   weights: RewardWeights) -> float:
    return reward_components(state, action, collided, arrived, weights).total


@dataclass
class StepOutcome:
    observation: np.ndarray
    reward: float
    done: bool
    reason: TerminationReason
    ego: Optional[VehicleState] = None
    action: Optional[Action] = None
    components: Optional[RewardBreakdown] = None


WorldBuilder = Callable[[int], World]
WorldEvent = Callable[[World], None]


class HighwayEnv:
    """Episode lifecycle around a World"""

    def __init__(self, scenario: ScenarioConfig = None,
                 world_builder: Optional[WorldBuilder] = None,
                 event_factory: Optional[Callable[[], Sequence[WorldEvent]]] = None,
                 label: str = None):
        self.scenario = scenario or ScenarioConfig()
        self.world_builder = world_builder
        self.event_factory = event_factory
        self.label = label or self.scenario.name
        self.world: Optional[World] = None
        self.seed: Optional[int] = None
        self.done = False
        self._events: Sequence[WorldEvent] = ()

    @property
    def dt(self) -> float:
        return self.scenario.simulation.dt

    @property
    def max_steps(self) -> int:
        return self.scenario.simulation.max_steps

    @property
    def observation_rows(self) -> int:
        return self.scenario.simulation.observation_rows

    def reset(self, seed: int) -> np.ndarray:
        self.seed = seed
        if self.world_builder is not None:
            self.world = self.world_builder(seed)
        else:
            self.world = spawn_traffic(seed, self.scenario)
        self._events = tuple(self.event_factory()) if self.event_factory else ()
        self.done = False
        return build_observation(self.world, self.observation_rows)

    def observe(self) -> np.ndarray:
        return build_observation(self.world, self.observation_rows)

    def step(self, action: Action) -> StepOutcome:
        if self.world is None:
            raise RuntimeError("reset() must be called before step()")
        if self.done:
            raise RuntimeError("episode already terminated; call reset()")
        if not action.is_finite():
            logger.error(f"Policy produced non-finite action {action} at step {self.world.step_count}")
            raise PolicyActionError(f"Non-finite action {action} at step {self.world.step_count}")

        world = self.world
        applied = action.clamped()
        ego = step_ego_kinematics(world.ego, applied, self.dt)
        world.ego = replace(ego, lane_id=world.road.lane_of(ego.y))
        world.advance_traffic(self.dt)
        world.step_count += 1

        for event in self._events:
            event(world)

        collisions = detect_collisions(world)
        vehicle_hit = any(event.kind == 'vehicle' for event in collisions)
        boundary_hit = any(event.kind == 'boundary' for event in collisions)
        arrived = world.ego.x >= world.road.road_length

        if vehicle_hit:
            reason = TerminationReason.VEHICLE_COLLISION
        elif boundary_hit:
            reason = TerminationReason.BOUNDARY_COLLISION
        elif arrived:
            reason = TerminationReason.DESTINATION
        elif world.step_count >= self.max_steps:
            reason = TerminationReason.TIMEOUT
        else:
            reason = TerminationReason.RUNNING

        components = reward_components(
            world.ego, applied, vehicle_hit or boundary_hit,
            reason == TerminationReason.DESTINATION, self.scenario.reward,
        )
        self.done = reason != TerminationReason.RUNNING

        return StepOutcome(
            observation=build_observation(world, self.observation_rows),
            reward=components.total,
            done=self.done,
            reason=reason,
            ego=world.ego,
            action=applied,
            components=components,
        )


class ConstantPolicy:
    """Policy returning the same command every step"""

    def __init__(self, accel: float = 0.0, steer: float = 0.0):
        self.action = Action(accel, steer)

    def __call__(self, observation: np.ndarray, world: World) -> Action:
        return self.action


@dataclass
class StepRecord:
    step: int
    x: float
    y: float
    speed: float
    heading: float
    accel: float
    steer: float
    reward: float
    r_collision: float
    r_velocity: float
    r_steering: float
    r_acceleration: float
    r_prize: float
    fsm_state: str
    compute_ms: float


TRACE_COLUMNS = [
    'step', 'x', 'y', 'speed', 'heading', 'accel', 'steer', 'reward',
    'r_collision', 'r_velocity', 'r_steering', 'r_acceleration', 'r_prize',
    'fsm_state', 'compute_ms', 'termination',
]


@dataclass
class EpisodeTrace:
    """Timestep-by-timestep record of one episode"""
    scenario_name: str
    seed: int
    road_length: float
    dt: float
    initial_x: float
    records: List[StepRecord] = field(default_factory=list)
    reason: TerminationReason = TerminationReason.RUNNING
    outcomes: List[StepOutcome] = field(default_factory=list)

    @property
    def complete(self) -> bool:
        return bool(self.records) and self.reason != TerminationReason.RUNNING

    @property
    def fsm_states(self) -> List[str]:
        return [record.fsm_state for record in self.records]

    def to_dataframe(self) -> pd.DataFrame:
        frame = pd.DataFrame([record.__dict__ for record in self.records],
                             columns=TRACE_COLUMNS[:-1])
        frame['termination'] = ''
        if len(frame):
            frame.loc[frame.index[-1], 'termination'] = self.reason.value
        return frame


def _policy_mode(policy) -> str:
    mode = getattr(policy, 'mode', None)
    if mode is None:
        return ''
    return getattr(mode, 'value', str(mode))


def run_episode(policy, env: HighwayEnv, seed: int, max_steps: int = None,
                keep_outcomes: bool = False) -> EpisodeTrace:
    """Roll a policy through one episode and return its trace.

    The policy is called as policy(observation, world) and returns an Action.
    """
    observation = env.reset(seed)
    if hasattr(policy, 'reset'):
        policy.reset()

    limit = max_steps if max_steps is not None else env.max_steps
    trace = EpisodeTrace(
        scenario_name=env.label,
        seed=seed,
        road_length=env.world.road.road_length,
        dt=env.dt,
        initial_x=env.world.ego.x,
    )

    for _ in range(limit):
        started = time.perf_counter()
        action = policy(observation, env.world)
        compute_ms = (time.perf_counter() - started) * 1000.0

        outcome = env.step(action)
        ego = outcome.ego
        components = outcome.components
        trace.records.append(StepRecord(
            step=env.world.step_count,
            x=ego.x,
            y=ego.y,
            speed=ego.speed,
            heading=ego.heading,
            accel=outcome.action.accel,
            steer=outcome.action.steer,
            reward=outcome.reward,
            fsm_state=_policy_mode(policy),
            compute_ms=compute_ms,
            **components.as_dict(),
        ))
        if keep_outcomes:
            trace.outcomes.append(outcome)

        observation = outcome.observation
        if outcome.done:
            trace.reason = outcome.reason
            break

    logger.debug(f"Episode {env.label}/seed {seed} ended after {len(trace.records)} steps: "
                 f"{trace.reason.value}")
    return trace
