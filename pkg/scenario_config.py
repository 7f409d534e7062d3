"""
Scenario Config - validated scenario files for the highway simulator
"""

import json
import hashlib
import logging
from pathlib import Path
from typing import Any, Dict, Tuple, Union

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from config import Config
from traffic_models import DRIVER_PROFILES

logger = logging.getLogger(__name__)

PRESET_NAMES = ('canonical', 'reduced')


class _Section(BaseModel):
    model_config = ConfigDict(frozen=True, extra='forbid')


class RoadSpec(_Section):
    """Straight two-lane road"""
    road_length: float = Field(1000.0, gt=0)
    lane_width: float = Field(4.0, gt=0)
    lane_count: int = 2
    lane_directions: Tuple[int, int] = (1, -1)

    @field_validator('lane_count')
    @classmethod
    def _two_lanes(cls, value: int) -> int:
        if value != 2:
            raise ValueError("only two-lane roads are supported")
        return value

    @field_validator('lane_directions')
    @classmethod
    def _signs(cls, value: Tuple[int, int]) -> Tuple[int, int]:
        if any(d not in (1, -1) for d in value):
            raise ValueError("lane directions must be +1 or -1")
        if value[0] != 1:
            raise ValueError("lane 0 carries the ego and must travel in +x")
        return value

    @property
    def road_width(self) -> float:
        return self.lane_count * self.lane_width

    def lane_center(self, lane_id: int) -> float:
        return (lane_id + 0.5) * self.lane_width

    def lane_of(self, y: float) -> int:
        """Lane index containing lateral position y (clamped to the road)"""
        return min(max(int(y // self.lane_width), 0), self.lane_count - 1)


class TrafficSpec(_Section):
    """NPC population and spawning"""
    enabled: bool = True
    mixture: Dict[str, float] = Field(default_factory=lambda: {
        'normal': 0.6, 'timid': 0.2, 'aggressive': 0.1, 'truck': 0.1,
    })
    same_direction_spacing: float = Field(80.0, gt=0)
    opposing_spacing: float = Field(180.0, gt=0)
    spawn_noise: float = Field(10.0, ge=0)
    # Opposing traffic is laid out up to road_length * opposing_extent
    opposing_extent: float = Field(2.0, ge=1.0)
    braking_floor: float = Field(-9.0, lt=0)
    mobil_interval: int = Field(100, gt=0)

    @field_validator('mixture')
    @classmethod
    def _mixture(cls, value: Dict[str, float]) -> Dict[str, float]:
        unknown = set(value) - set(DRIVER_PROFILES)
        if unknown:
            raise ValueError(f"unknown profiles in mixture: {sorted(unknown)}")
        if any(p < 0 for p in value.values()):
            raise ValueError("mixture probabilities must be non-negative")
        total = sum(value.values())
        if abs(total - 1.0) > 1e-6:
            raise ValueError(f"mixture probabilities must sum to 1, got {total}")
        return value


class RewardWeights(_Section):
    """Weights of the per-step reward terms"""
    c1: float = -10.0    # collision
    c2: float = 1.0      # velocity
    c3: float = 1.0      # steering
    c4: float = 1.0      # acceleration
    c5: float = 100.0    # destination prize
    v_min: float = 20.0
    v_max: float = 60.0

    @model_validator(mode='after')
    def _speed_band(self) -> 'RewardWeights':
        if self.v_max <= self.v_min:
            raise ValueError("v_max must exceed v_min")
        return self


class SimulationSpec(_Section):
    dt: float = Field(0.01, gt=0)
    max_steps: int = Field(5000, gt=0)
    observation_rows: int = Field(7, ge=1)
    ego_initial_speed: float = Field(45.0, ge=0, le=60.0)
    ego_start_x: float = 0.0


class ScenarioConfig(_Section):
    name: str = 'canonical'
    road: RoadSpec = Field(default_factory=RoadSpec)
    traffic: TrafficSpec = Field(default_factory=TrafficSpec)
    reward: RewardWeights = Field(default_factory=RewardWeights)
    simulation: SimulationSpec = Field(default_factory=SimulationSpec)

    def to_dict(self) -> Dict[str, Any]:
        return self.model_dump(mode='json')

    def config_hash(self) -> str:
        return stable_hash(self.to_dict())


def stable_hash(payload: Dict[str, Any]) -> str:
    """SHA-256 of the canonical JSON form of a config payload"""
    text = json.dumps(payload, sort_keys=True, separators=(',', ':'))
    return hashlib.sha256(text.encode('utf-8')).hexdigest()


def resolve_scenario_path(name_or_path: Union[str, Path]) -> Path:
    """Map a preset name or a file path to an existing scenario file"""
    text = str(name_or_path)
    if text in PRESET_NAMES:
        path = Path(Config.SCENARIO_DIR) / f"{text}.json"
    else:
        path = Path(text)

    if not path.exists():
        raise FileNotFoundError(f"Scenario config not found: {path}")
    return path


def load_scenario(name_or_path: Union[str, Path]) -> ScenarioConfig:
    """Load and validate a scenario JSON file"""
    path = resolve_scenario_path(name_or_path)

    with open(path, 'r') as f:
        try:
            payload = json.load(f)
        except json.JSONDecodeError as e:
            raise ValueError(f"Scenario config {path} is not valid JSON: {e}")

    try:
        scenario = ScenarioConfig.model_validate(payload)
    except ValidationError as e:
        raise ValueError(f"Scenario config {path} is invalid: {e}")

    logger.debug(f"Loaded scenario '{scenario.name}' from {path}")
    return scenario
