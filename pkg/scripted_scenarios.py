"""
Scripted Scenarios - hand-built worlds for expert acceptance runs

    empty-road      no traffic at all
    slow-leader     a truck ahead in the ego lane, oncoming lane clear
    overtake-abort  an oncoming car appears while the ego is passing a truck
"""

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Dict, Optional, Sequence, Union

import numpy as np

from highway_env import HighwayEnv, World, WorldEvent, spawn_traffic
from lane_planner import find_leader
from scenario_config import ScenarioConfig, load_scenario

logger = logging.getLogger(__name__)


def _scripted_config(name: str, road_length: float, max_steps: int, ego_speed: float) -> ScenarioConfig:
    return ScenarioConfig.model_validate({
        'name': name,
        'road': {'road_length': road_length},
        'traffic': {'enabled': False},
        'simulation': {'max_steps': max_steps, 'ego_initial_speed': ego_speed},
    })


def _jitter(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(seed))


class OncomingVehicleEvent:
    """Spawn one oncoming car ahead of the ego as soon as it enters the opposing lane behind the leader.

    The default distance leaves too little room to finish the pass, so the
    lane-follow plan turns infeasible while the ego is still behind the leader.
    """

    def __init__(self, distance: float = 90.0, speed: float = 20.0, profile: str = 'normal',
                 min_leader_lead: float = 18.0):
        self.distance = distance
        self.speed = speed
        self.profile = profile
        self.min_leader_lead = min_leader_lead
        self.fired_at: Optional[int] = None

    def __call__(self, world: World):
        if self.fired_at is not None or world.ego_lane() != world.opposing_lane:
            return
        leader = find_leader(world)
        if leader is None or leader.state.x - world.ego.x <= self.min_leader_lead:
            return

        world.add_npc(self.profile, world.ego.x + self.distance, world.opposing_lane, speed=self.speed)
        self.fired_at = world.step_count
        logger.debug(f"Oncoming vehicle spawned at step {world.step_count}, "
                     f"x={world.ego.x + self.distance:.1f}")


@dataclass
class ScriptedScenario:
    name: str
    scenario: ScenarioConfig
    build_world: Callable[[int], World]
    event_factory: Optional[Callable[[], Sequence[WorldEvent]]] = None
    expects_destination: bool = True

    def make_env(self) -> HighwayEnv:
        return HighwayEnv(self.scenario, world_builder=self.build_world,
                          event_factory=self.event_factory, label=self.name)


def _empty_road() -> ScriptedScenario:
    scenario = _scripted_config('empty-road', road_length=400.0, max_steps=2000, ego_speed=45.0)
    return ScriptedScenario('empty-road', scenario, lambda seed: spawn_traffic(seed, scenario))


def _slow_leader() -> ScriptedScenario:
    scenario = _scripted_config('slow-leader', road_length=500.0, max_steps=3000, ego_speed=45.0)

    def build(seed: int) -> World:
        world = spawn_traffic(seed, scenario)
        rng = _jitter(seed)
        world.add_npc('truck', 100.0 + float(rng.uniform(-5.0, 5.0)), 0,
                      speed=20.0 + float(rng.uniform(-1.0, 1.0)))
        return world

    return ScriptedScenario('slow-leader', scenario, build)


def _overtake_abort() -> ScriptedScenario:
    scenario = _scripted_config('overtake-abort', road_length=500.0, max_steps=3000, ego_speed=22.0)

    def build(seed: int) -> World:
        world = spawn_traffic(seed, scenario)
        rng = _jitter(seed)
        world.add_npc('truck', 40.0 + float(rng.uniform(-2.0, 2.0)), 0, speed=22.0)
        return world

    return ScriptedScenario('overtake-abort', scenario, build,
                            event_factory=lambda: [OncomingVehicleEvent()],
                            expects_destination=False)


SCRIPTED_SCENARIOS: Dict[str, Callable[[], ScriptedScenario]] = {
    'empty-road': _empty_road,
    'slow-leader': _slow_leader,
    'overtake-abort': _overtake_abort,
}


def get_scripted(name: str) -> ScriptedScenario:
    try:
        return SCRIPTED_SCENARIOS[name]()
    except KeyError:
        raise ValueError(f"Unknown scripted scenario '{name}'. "
                         f"Available: {', '.join(sorted(SCRIPTED_SCENARIOS))}")


def make_env(name_or_path: Union[str, Path, ScenarioConfig]) -> HighwayEnv:
    """Environment for a scripted scenario name, a preset name, a scenario file or a config"""
    if isinstance(name_or_path, ScenarioConfig):
        return HighwayEnv(name_or_path)
    if str(name_or_path) in SCRIPTED_SCENARIOS:
        return get_scripted(str(name_or_path)).make_env()
    return HighwayEnv(load_scenario(name_or_path))
