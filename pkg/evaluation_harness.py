"""
Evaluation Harness - episode metrics, multi-seed evaluation, trace/summary files and trace replay
"""

import json
import time
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np
import pandas as pd

from expert_system import ExpertConfig, ExpertDriver
from guided_td3 import load_checkpoint
from highway_env import (
    ConstantPolicy, EpisodeTrace, HighwayEnv, TerminationReason, TRACE_COLUMNS, run_episode,
)
from scenario_config import ScenarioConfig
from scripted_scenarios import SCRIPTED_SCENARIOS, make_env
from vehicle_dynamics import Action

logger = logging.getLogger(__name__)

METRIC_KEYS = [
    'episode_reward',
    'mean_speed',
    'displacement',
    'mean_computation_time',
    'energy',
    'vehicle_collision_rate',
    'boundary_collision_rate',
]
REWARD_COMPONENT_KEYS = ['r_collision', 'r_velocity', 'r_steering', 'r_acceleration', 'r_prize']
TIMING_FIELDS = ['metrics.mean_computation_time', 'timing']


@dataclass
class EpisodeMetrics:
    scenario: str
    seed: int
    episode: int
    steps: int
    termination: str
    episode_reward: float
    mean_speed: float           # m/s
    displacement: float         # m
    mean_computation_time: float  # ms per action query
    energy: float               # mean |accel| per step
    vehicle_collision: int
    boundary_collision: int
    reward_components: Dict[str, float] = field(default_factory=dict)

    def validate(self) -> List[str]:
        errors = []

        if self.energy < 0:
            errors.append("energy must be non-negative")
        if self.vehicle_collision != int(self.termination == TerminationReason.VEHICLE_COLLISION.value):
            errors.append("vehicle_collision disagrees with the termination reason")
        if self.boundary_collision != int(self.termination == TerminationReason.BOUNDARY_COLLISION.value):
            errors.append("boundary_collision disagrees with the termination reason")

        return errors


def compute_metrics(trace: EpisodeTrace, episode: int = 0) -> EpisodeMetrics:
    """Per-episode metrics of a complete trace"""
    if not trace.complete:
        raise ValueError(f"Trace for {trace.scenario_name}/seed {trace.seed} is truncated "
                         f"({len(trace.records)} steps, no termination)")

    frame = trace.to_dataframe()
    reason = trace.reason
    displacement = min(float(frame['x'].iloc[-1]) - trace.initial_x, trace.road_length)

    return EpisodeMetrics(
        scenario=trace.scenario_name,
        seed=trace.seed,
        episode=episode,
        steps=len(frame),
        termination=reason.value,
        episode_reward=float(frame['reward'].sum()),
        mean_speed=float(frame['speed'].mean()),
        displacement=displacement,
        mean_computation_time=float(frame['compute_ms'].mean()),
        energy=float(frame['accel'].abs().mean()),
        vehicle_collision=int(reason == TerminationReason.VEHICLE_COLLISION),
        boundary_collision=int(reason == TerminationReason.BOUNDARY_COLLISION),
        reward_components={key: float(frame[key].sum()) for key in REWARD_COMPONENT_KEYS},
    )


@dataclass(frozen=True)
class PolicySpec:
    """Picklable description of a policy, built inside each worker"""
    kind: str = 'expert'                # expert | checkpoint | constant
    checkpoint: Optional[str] = None
    accel: float = 0.0
    steer: float = 0.0

    def __post_init__(self):
        if self.kind not in ('expert', 'checkpoint', 'constant'):
            raise ValueError(f"Unknown policy kind '{self.kind}'")
        if self.kind == 'checkpoint' and not self.checkpoint:
            raise ValueError("checkpoint policy needs a checkpoint path")

    @property
    def label(self) -> str:
        if self.kind == 'checkpoint':
            return f"checkpoint:{Path(self.checkpoint).name}"
        if self.kind == 'constant':
            return f"constant({self.accel:g},{self.steer:g})"
        return 'expert'

    def build(self, scenario: ScenarioConfig = None):
        if self.kind == 'expert':
            return ExpertDriver(ExpertConfig(dt=scenario.simulation.dt) if scenario else None)
        if self.kind == 'checkpoint':
            return load_checkpoint(self.checkpoint, scenario)
        return ConstantPolicy(self.accel, self.steer)


def episode_seed(seed: int, episode: int) -> int:
    """World seed of the episode-th episode under a run seed; episode 0 uses the seed itself"""
    return seed + episode * 1_000_003


def _run_job(job: Tuple[str, PolicySpec, int, int]) -> Tuple[Tuple[int, int], EpisodeMetrics]:
    scenario_name, policy_spec, seed, episode = job
    env = make_env(scenario_name)
    policy = policy_spec.build(env.scenario)
    trace = run_episode(policy, env, episode_seed(seed, episode))
    metrics = compute_metrics(trace, episode)
    metrics.seed = seed
    return (seed, episode), metrics


@dataclass
class EvaluationResult:
    scenario: str
    policy: str
    seeds: List[int]
    episodes_per_seed: int
    episodes: List[EpisodeMetrics]
    wall_time_s: float = 0.0
    scenario_hash: str = ''

    def to_dataframe(self) -> pd.DataFrame:
        rows = []
        for metrics in self.episodes:
            row = asdict(metrics)
            row.update(row.pop('reward_components'))
            rows.append(row)
        return pd.DataFrame(rows)

    def aggregate(self) -> Dict[str, float]:
        """Mean of every metric across all episodes"""
        frame = self.to_dataframe()
        return {
            'episode_reward': float(frame['episode_reward'].mean()),
            'mean_speed': float(frame['mean_speed'].mean()),
            'displacement': float(frame['displacement'].mean()),
            'mean_computation_time': float(frame['mean_computation_time'].mean()),
            'energy': float(frame['energy'].mean()),
            'vehicle_collision_rate': float(frame['vehicle_collision'].mean()),
            'boundary_collision_rate': float(frame['boundary_collision'].mean()),
        }

    def summary(self) -> Dict[str, Any]:
        frame = self.to_dataframe()
        metrics = self.aggregate()
        return {
            'metadata': {
                'scenario': self.scenario,
                'scenario_hash': self.scenario_hash,
                'policy': self.policy,
                'seeds': list(self.seeds),
                'episodes_per_seed': self.episodes_per_seed,
                'episodes': len(self.episodes),
                'terminations': {k: int(v) for k, v in sorted(frame['termination'].value_counts().items())},
                'timing_fields': TIMING_FIELDS,
            },
            'metrics': metrics,
            'reward_components': {key: float(frame[key].mean()) for key in REWARD_COMPONENT_KEYS},
            'timing': {
                'mean_computation_time': metrics['mean_computation_time'],
                'wall_time_s': self.wall_time_s,
            },
        }


def evaluate(policy: PolicySpec, scenario: str, seeds: Sequence[int], episodes_per_seed: int = 1,
             workers: int = 1) -> EvaluationResult:
    """Noise-free episodes for every (seed, episode) pair, merged in sorted key order"""
    if not seeds:
        raise ValueError("seed list must not be empty")
    if episodes_per_seed < 1:
        raise ValueError("episodes_per_seed must be at least 1")

    env = make_env(scenario)
    if policy.kind == 'checkpoint':
        # fail before spawning workers if the checkpoint belongs to another scenario
        load_checkpoint(policy.checkpoint, env.scenario)

    jobs = [(scenario, policy, seed, episode)
            for seed in sorted(seeds) for episode in range(episodes_per_seed)]
    started = time.perf_counter()

    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_job, jobs))
    else:
        results = [_run_job(job) for job in jobs]

    results.sort(key=lambda item: item[0])
    wall_time = time.perf_counter() - started
    logger.info(f"Evaluated {policy.label} on {scenario}: {len(results)} episodes in {wall_time:.1f}s")

    return EvaluationResult(
        scenario=env.label,
        policy=policy.label,
        seeds=sorted(seeds),
        episodes_per_seed=episodes_per_seed,
        episodes=[metrics for _, metrics in results],
        wall_time_s=wall_time,
        scenario_hash=env.scenario.config_hash(),
    )


def write_summary(result: EvaluationResult, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, 'w') as f:
        json.dump(result.summary(), f, indent=2, sort_keys=True)
    logger.info(f"Summary written to {path}")
    return path


def strip_timing(summary: Dict[str, Any]) -> Dict[str, Any]:
    """Copy of a summary without the wall-clock fields listed in its metadata"""
    stripped = json.loads(json.dumps(summary))
    for name in stripped.get('metadata', {}).get('timing_fields', []):
        parts = name.split('.')
        node = stripped
        for part in parts[:-1]:
            node = node.get(part, {})
        node.pop(parts[-1], None)
    return stripped


def print_summary(result: EvaluationResult):
    """Console report of an evaluation"""
    frame = result.to_dataframe()
    metrics = result.aggregate()

    print("\n" + "=" * 60)
    print(f"EVALUATION RESULTS: {result.policy} on {result.scenario}")
    print("=" * 60)
    print(f"Episodes: {len(frame)} ({len(result.seeds)} seeds x {result.episodes_per_seed})")
    print(f"Episode Reward: {metrics['episode_reward']:.2f}")
    print(f"Speed: {metrics['mean_speed']:.2f} m/s")
    print(f"Displacement: {metrics['displacement']:.1f} m")
    print(f"Computation Time: {metrics['mean_computation_time']:.3f} ms")
    print(f"Energy Consumption: {metrics['energy']:.3f} m/s^2")
    print(f"Vehicles Collision Rate: {metrics['vehicle_collision_rate']:.2f}")
    print(f"Boundaries Collision Rate: {metrics['boundary_collision_rate']:.2f}")

    print(f"\nTerminations:")
    for reason, count in frame['termination'].value_counts().items():
        print(f"  {reason}: {count} ({count / len(frame) * 100:.1f}%)")


def write_trace(trace: EpisodeTrace, path: Union[str, Path], scenario: str, scenario_config: ScenarioConfig,
                policy: str = '') -> Path:
    """Trace CSV plus a <trace>.meta.json sidecar describing how to rebuild the world"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    trace.to_dataframe().to_csv(path, index=False, float_format='%.17g')

    meta = {
        'scenario': scenario,
        'scenario_config': scenario_config.to_dict(),
        'seed': trace.seed,
        'policy': policy,
        'steps': len(trace.records),
        'termination': trace.reason.value,
    }
    with open(meta_path(path), 'w') as f:
        json.dump(meta, f, indent=2, sort_keys=True)
    return path


def meta_path(trace_path: Union[str, Path]) -> Path:
    trace_path = Path(trace_path)
    return trace_path.with_name(trace_path.stem + '.meta.json')


def read_trace(path: Union[str, Path]) -> Tuple[pd.DataFrame, Dict[str, Any]]:
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Trace not found: {path}")
    sidecar = meta_path(path)
    if not sidecar.exists():
        raise FileNotFoundError(f"Trace metadata not found: {sidecar}")

    frame = pd.read_csv(path, float_precision='round_trip', keep_default_na=False)
    missing = set(TRACE_COLUMNS) - set(frame.columns)
    if missing:
        raise ValueError(f"Trace {path} is missing columns: {sorted(missing)}")
    with open(sidecar, 'r') as f:
        meta = json.load(f)
    return frame, meta


class ReplayPolicy:
    """Feeds back the actions of a recorded trace"""

    def __init__(self, accels: Sequence[float], steers: Sequence[float]):
        self.actions = [Action(float(a), float(s)) for a, s in zip(accels, steers)]
        self.index = 0

    def reset(self):
        self.index = 0

    def __call__(self, observation, world) -> Action:
        if self.index >= len(self.actions):
            raise ValueError("Replay ran past the end of the recorded trace")
        action = self.actions[self.index]
        self.index += 1
        return action


@dataclass
class ReplayResult:
    trace: EpisodeTrace
    recorded_rewards: np.ndarray
    recorded_termination: str

    @property
    def rewards_match(self) -> bool:
        replayed = np.array([record.reward for record in self.trace.records])
        return replayed.shape == self.recorded_rewards.shape and bool(np.all(replayed == self.recorded_rewards))

    @property
    def termination_matches(self) -> bool:
        return self.trace.reason.value == self.recorded_termination

    @property
    def matches(self) -> bool:
        return self.rewards_match and self.termination_matches


def _replay_env(meta: Dict[str, Any]) -> HighwayEnv:
    if meta.get('scenario') in SCRIPTED_SCENARIOS:
        return make_env(meta['scenario'])
    return HighwayEnv(ScenarioConfig.model_validate(meta['scenario_config']))


def replay_trace(path: Union[str, Path]) -> ReplayResult:
    """Re-simulate a recorded trace from its logged actions"""
    frame, meta = read_trace(path)
    env = _replay_env(meta)
    policy = ReplayPolicy(frame['accel'], frame['steer'])
    trace = run_episode(policy, env, int(meta['seed']), max_steps=len(frame))

    recorded = frame['termination'].iloc[-1] if len(frame) else ''
    result = ReplayResult(trace=trace, recorded_rewards=frame['reward'].to_numpy(dtype=float),
                          recorded_termination=str(recorded))
    if not result.matches:
        logger.warning(f"Replay of {path} diverged: rewards match={result.rewards_match}, "
                       f"termination {trace.reason.value} vs {recorded}")
    return result
