"""
Guided TD3 - twin-critic deterministic actor trained with a fading expert-guidance loss

Actor loss:  L_actor = L_policy + beta(t) * L_guidance
             L_policy   = -mean Q1(s, actor(s))
             L_guidance = mean squared error between actor(s) and the expert's action
             beta(t)    = q1 / exp(q2 * t / T), t counting optimizer updates

All actions inside the agent, the buffer and the losses are normalized to
[-1, 1] per dimension; Action.from_normalized maps them to actuator units.
"""

import json
import math
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Union

import numpy as np
import pandas as pd

from highway_env import HighwayEnv, TerminationReason, World, run_episode
from neural_networks import AdamOptimizer, Mlp, MlpSpec
from scenario_config import ScenarioConfig, stable_hash
from vehicle_dynamics import Action

logger = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1
ACTION_DIM = 2
OBSERVATION_COLUMNS = 6
TRAINING_LOG_COLUMNS = ['update', 'L_policy', 'L_guidance', 'beta', 'L_actor', 'eval_return']


class TrainingDivergedError(RuntimeError):
    """Raised when a training loss becomes non-finite"""


class CheckpointMismatchError(ValueError):
    """Raised when a checkpoint was trained on a different configuration"""


@dataclass(frozen=True)
class FadingSchedule:
    q1: Optional[float] = None      # None: calibrated at the first actor update
    q2: float = 4.0
    total: int = 1                  # T, planned optimizer updates

    def __post_init__(self):
        errors = []
        if self.q1 is not None and (not math.isfinite(self.q1) or self.q1 < 0):
            errors.append("q1 must be finite and non-negative")
        if not math.isfinite(self.q2) or self.q2 < 0:
            errors.append("q2 must be finite and non-negative")
        if self.total <= 0:
            errors.append("total must be positive")
        if errors:
            raise ValueError("Fading schedule errors: " + "; ".join(errors))

    def with_q1(self, q1: float) -> 'FadingSchedule':
        return FadingSchedule(q1=q1, q2=self.q2, total=self.total)


def fading_beta(schedule: FadingSchedule, t: float) -> float:
    """q1 / exp(q2 * t / T)"""
    if schedule.q1 is None:
        raise ValueError("q1 is not set; calibrate the schedule before evaluating beta")
    if t < 0:
        raise ValueError(f"t must be non-negative, got {t}")
    return schedule.q1 / math.exp(schedule.q2 * t / schedule.total)


def fading_curve(q1: float, q2_values: Sequence[float], total: int, points: int = 101) -> pd.DataFrame:
    """beta(t) over [0, T] for several decay rates, one column per q2"""
    steps = np.linspace(0.0, total, points)
    frame = pd.DataFrame({'t': steps})
    for q2 in q2_values:
        schedule = FadingSchedule(q1=q1, q2=q2, total=total)
        frame[f"beta_q2_{q2:g}"] = [fading_beta(schedule, t) for t in steps]
    return frame


def guidance_loss(actor_actions: np.ndarray, reference_actions: np.ndarray) -> float:
    """Mean over batch and action dimensions of the squared difference"""
    actor_actions = np.asarray(actor_actions, dtype=float)
    reference_actions = np.asarray(reference_actions, dtype=float)
    if actor_actions.shape != reference_actions.shape:
        raise ValueError(f"Shape mismatch: {actor_actions.shape} vs {reference_actions.shape}")
    return float(np.mean((actor_actions - reference_actions) ** 2))


def guidance_loss_gradient(actor_actions: np.ndarray, reference_actions: np.ndarray) -> np.ndarray:
    diff = np.asarray(actor_actions, dtype=float) - np.asarray(reference_actions, dtype=float)
    return 2.0 * diff / diff.size


def actor_loss(policy_loss: float, guidance: float, beta: float) -> float:
    return policy_loss + beta * guidance


@dataclass
class TrainerConfig:
    """TD3 hyperparameters"""
    gamma: float = 0.99
    batch_size: int = 256
    buffer_capacity: int = 100_000
    actor_lr: float = 1e-3
    critic_lr: float = 1e-3
    tau: float = 0.005                  # target smoothing
    policy_delay: int = 2
    exploration_noise: float = 0.1      # std in normalized action units
    target_noise: float = 0.2
    target_noise_clip: float = 0.5
    hidden_sizes: tuple = (64, 64)
    warmup_steps: int = 1000            # uniformly random actions before learning starts
    eval_interval: int = 5000
    eval_episodes: int = 1
    log_interval: int = 100             # actor updates between training-log rows
    normalize_observations: bool = True
    normalize_rewards: bool = False
    observation_clip: float = 5.0
    q1_floor: float = 1e-8              # guards the q1 calibration against a zero guidance loss
    seed: int = 0

    def __post_init__(self):
        errors = self.validate()
        if errors:
            raise ValueError("Trainer configuration errors: " + "; ".join(errors))

    def validate(self) -> List[str]:
        errors = []

        if not 0.0 < self.gamma < 1.0:
            errors.append("gamma must lie in (0, 1)")
        if self.batch_size <= 0 or self.buffer_capacity <= 0:
            errors.append("batch_size and buffer_capacity must be positive")
        if self.buffer_capacity < self.batch_size:
            errors.append("buffer_capacity must hold at least one batch")
        if self.actor_lr <= 0 or self.critic_lr <= 0:
            errors.append("learning rates must be positive")
        if not 0.0 < self.tau <= 1.0:
            errors.append("tau must lie in (0, 1]")
        if self.policy_delay < 1:
            errors.append("policy_delay must be at least 1")
        if self.exploration_noise < 0 or self.target_noise < 0 or self.target_noise_clip < 0:
            errors.append("noise scales must be non-negative")
        if self.warmup_steps < 0 or self.eval_interval < 0 or self.log_interval < 1:
            errors.append("warmup_steps and eval_interval must be non-negative, log_interval positive")

        return errors

    def to_dict(self) -> Dict[str, Any]:
        payload = asdict(self)
        payload['hidden_sizes'] = list(self.hidden_sizes)
        return payload


def planned_updates(total_steps: int, config: TrainerConfig) -> int:
    """Optimizer updates a run of total_steps environment steps will perform"""
    start = max(config.warmup_steps, config.batch_size)
    return max(total_steps - start, 1)


def training_config_hash(scenario: ScenarioConfig, config: TrainerConfig) -> str:
    return stable_hash({'scenario': scenario.to_dict(), 'trainer': config.to_dict()})


@dataclass
class Transition:
    observation: np.ndarray         # flattened raw observation
    action: np.ndarray              # normalized
    reward: float
    next_observation: np.ndarray
    done: bool                      # terminal, no bootstrap
    reference_action: np.ndarray    # normalized expert action at observation


class ReplayBuffer:
    """Fixed-capacity ring buffer sampled uniformly"""

    def __init__(self, obs_dim: int, capacity: int, action_dim: int = ACTION_DIM):
        self.capacity = capacity
        self.observations = np.zeros((capacity, obs_dim))
        self.actions = np.zeros((capacity, action_dim))
        self.rewards = np.zeros(capacity)
        self.next_observations = np.zeros((capacity, obs_dim))
        self.dones = np.zeros(capacity)
        self.reference_actions = np.zeros((capacity, action_dim))
        self.position = 0
        self.size = 0

    def __len__(self) -> int:
        return self.size

    def add(self, transition: Transition):
        if np.any(np.abs(transition.reference_action) > 1.0 + 1e-9):
            raise ValueError("reference_action must be normalized to [-1, 1]")
        i = self.position
        self.observations[i] = transition.observation
        self.actions[i] = transition.action
        self.rewards[i] = transition.reward
        self.next_observations[i] = transition.next_observation
        self.dones[i] = float(transition.done)
        self.reference_actions[i] = transition.reference_action
        self.position = (self.position + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch_size: int, rng: np.random.Generator) -> Dict[str, np.ndarray]:
        if self.size == 0:
            raise ValueError("cannot sample from an empty buffer")
        idx = rng.integers(0, self.size, size=batch_size)
        return {
            'observations': self.observations[idx],
            'actions': self.actions[idx],
            'rewards': self.rewards[idx],
            'next_observations': self.next_observations[idx],
            'dones': self.dones[idx],
            'reference_actions': self.reference_actions[idx],
        }


def presence_columns(rows: int) -> np.ndarray:
    """Indices of the presence flags in a flattened rows x 6 observation"""
    return np.arange(rows) * OBSERVATION_COLUMNS


class RunningNormalizer:
    """Online per-feature mean/variance (parallel Welford update) with clipping"""

    def __init__(self, size: int, clip: float = 5.0, skip: Sequence[int] = (), eps: float = 1e-8):
        self.size = size
        self.clip = clip
        self.eps = eps
        self.skip = np.zeros(size, dtype=bool)
        self.skip[list(skip)] = True
        self.count = 0
        self.mean = np.zeros(size)
        self.m2 = np.zeros(size)

    @property
    def var(self) -> np.ndarray:
        if self.count == 0:
            return np.ones(self.size)
        return self.m2 / self.count

    def update(self, values: np.ndarray):
        batch = np.atleast_2d(np.asarray(values, dtype=float))
        n = batch.shape[0]
        batch_mean = batch.mean(axis=0)
        batch_m2 = ((batch - batch_mean) ** 2).sum(axis=0)

        total = self.count + n
        delta = batch_mean - self.mean
        self.mean = self.mean + delta * n / total
        self.m2 = self.m2 + batch_m2 + delta ** 2 * self.count * n / total
        self.count = total

    def copy(self) -> 'RunningNormalizer':
        snapshot = RunningNormalizer(self.size, clip=self.clip, skip=np.flatnonzero(self.skip), eps=self.eps)
        snapshot.count = self.count
        snapshot.mean = self.mean.copy()
        snapshot.m2 = self.m2.copy()
        return snapshot

    def normalize(self, values: np.ndarray) -> np.ndarray:
        values = np.asarray(values, dtype=float)
        scaled = np.clip((values - self.mean) / np.sqrt(self.var + self.eps), -self.clip, self.clip)
        return np.where(self.skip, values, scaled)

    def state_dict(self, prefix: str = 'normalizer') -> Dict[str, np.ndarray]:
        return {
            f"{prefix}.count": np.array(self.count),
            f"{prefix}.mean": self.mean,
            f"{prefix}.m2": self.m2,
            f"{prefix}.skip": self.skip,
            f"{prefix}.clip": np.array(self.clip),
        }

    @classmethod
    def from_state_dict(cls, state: Dict[str, np.ndarray], prefix: str = 'normalizer') -> 'RunningNormalizer':
        mean = np.asarray(state[f"{prefix}.mean"], dtype=float)
        normalizer = cls(mean.size, clip=float(state[f"{prefix}.clip"]),
                         skip=np.flatnonzero(state[f"{prefix}.skip"]))
        normalizer.count = int(state[f"{prefix}.count"])
        normalizer.mean = mean.copy()
        normalizer.m2 = np.asarray(state[f"{prefix}.m2"], dtype=float).copy()
        return normalizer


def normalize_observation(observations: np.ndarray, normalizer: Optional[RunningNormalizer]) -> np.ndarray:
    """Standardize flattened observations, one per row; identity without a normalizer"""
    values = np.asarray(observations, dtype=float)
    if normalizer is None:
        return values
    return normalizer.normalize(values)


class RewardScaler:
    """Divides rewards by the running std of the discounted return"""

    def __init__(self, gamma: float, eps: float = 1e-8):
        self.gamma = gamma
        self.eps = eps
        self.returns = 0.0
        self.stats = RunningNormalizer(1)

    def __call__(self, reward: float, done: bool) -> float:
        self.returns = self.returns * self.gamma + reward
        self.stats.update(np.array([self.returns]))
        if done:
            self.returns = 0.0
        return float(reward / math.sqrt(float(self.stats.var[0]) + self.eps))


class GuidedTD3Agent:
    """Actor, twin critics, their targets and optimizers"""

    def __init__(self, obs_dim: int, config: TrainerConfig, schedule: FadingSchedule,
                 rng: np.random.Generator, guided: bool = True,
                 normalizer: Optional[RunningNormalizer] = None):
        self.obs_dim = obs_dim
        self.config = config
        self.schedule = schedule
        self.rng = rng
        self.guided = guided
        self.normalizer = normalizer

        hidden = tuple(config.hidden_sizes)
        actor_spec = MlpSpec((obs_dim,) + hidden + (ACTION_DIM,), 'tanh', 'tanh')
        critic_spec = MlpSpec((obs_dim + ACTION_DIM,) + hidden + (1,), 'tanh', 'linear')

        self.actor = Mlp(actor_spec, rng)
        self.critic1 = Mlp(critic_spec, rng)
        self.critic2 = Mlp(critic_spec, rng)
        self.actor_target = self.actor.copy()
        self.critic1_target = self.critic1.copy()
        self.critic2_target = self.critic2.copy()

        self.actor_optimizer = AdamOptimizer(self.actor.params, config.actor_lr)
        self.critic1_optimizer = AdamOptimizer(self.critic1.params, config.critic_lr)
        self.critic2_optimizer = AdamOptimizer(self.critic2.params, config.critic_lr)

        self.updates = 0
        self.actor_updates = 0

    def _normalize(self, observations: np.ndarray) -> np.ndarray:
        return normalize_observation(observations, self.normalizer)

    def act(self, observation: np.ndarray, explore: bool = False) -> np.ndarray:
        """Normalized action for one flattened observation"""
        action = self.actor(self._normalize(np.asarray(observation, dtype=float).reshape(-1)))
        if explore and self.config.exploration_noise > 0:
            action = action + self.rng.normal(0.0, self.config.exploration_noise, size=ACTION_DIM)
        return np.clip(action, -1.0, 1.0)

    def critic_targets(self, batch: Dict[str, np.ndarray]) -> np.ndarray:
        """r + gamma * (1 - done) * min(Q1', Q2') at the smoothed target action"""
        next_obs = self._normalize(batch['next_observations'])
        next_actions = self.actor_target(next_obs)
        if self.config.target_noise > 0:
            noise = np.clip(self.rng.normal(0.0, self.config.target_noise, size=next_actions.shape),
                            -self.config.target_noise_clip, self.config.target_noise_clip)
            next_actions = np.clip(next_actions + noise, -1.0, 1.0)

        critic_input = np.hstack([next_obs, next_actions])
        q_next = np.minimum(self.critic1_target(critic_input)[:, 0], self.critic2_target(critic_input)[:, 0])
        return batch['rewards'] + self.config.gamma * (1.0 - batch['dones']) * q_next

    def critic_update(self, batch: Dict[str, np.ndarray]) -> Dict[str, float]:
        targets = self.critic_targets(batch)
        critic_input = np.hstack([self._normalize(batch['observations']), batch['actions']])
        batch_size = targets.shape[0]

        losses = {}
        for name, critic, optimizer in (('critic1', self.critic1, self.critic1_optimizer),
                                        ('critic2', self.critic2, self.critic2_optimizer)):
            q = critic.forward(critic_input)[:, 0]
            error = q - targets
            losses[f"L_{name}"] = float(np.mean(error ** 2))
            grads, _ = critic.backward((2.0 * error / batch_size)[:, None])
            optimizer.step(critic.params, grads)

        self.updates += 1
        return losses

    def calibrate_q1(self, policy_loss: float, guidance: float) -> float:
        """q1 matching beta(0) * L_guidance to |L_policy| at the first actor update"""
        if guidance < self.config.q1_floor:
            logger.warning(f"Guidance loss {guidance:.2e} too small to calibrate q1; using q1 = 1")
            q1 = 1.0
        else:
            q1 = abs(policy_loss) / guidance
        self.schedule = self.schedule.with_q1(q1)
        logger.info(f"Calibrated fading guidance q1 = {q1:.4g}")
        return q1

    def actor_update(self, batch: Dict[str, np.ndarray]) -> Dict[str, float]:
        observations = self._normalize(batch['observations'])
        batch_size = observations.shape[0]

        actions = self.actor.forward(observations)
        q = self.critic1.forward(np.hstack([observations, actions]))[:, 0]
        policy_loss = -float(np.mean(q))
        _, critic_input_grad = self.critic1.backward(np.full((batch_size, 1), -1.0 / batch_size))
        action_grad = critic_input_grad[:, -ACTION_DIM:]

        if self.guided:
            guidance = guidance_loss(actions, batch['reference_actions'])
            if self.schedule.q1 is None:
                self.calibrate_q1(policy_loss, guidance)
            # t counts optimizer updates before this actor update, so the first beta is q1
            beta = fading_beta(self.schedule, self.actor_updates * self.config.policy_delay)
            action_grad = action_grad + beta * guidance_loss_gradient(actions, batch['reference_actions'])
        else:
            guidance, beta = 0.0, 0.0

        grads, _ = self.actor.backward(action_grad)
        self.actor_optimizer.step(self.actor.params, grads)

        self.actor_target.soft_update(self.actor, self.config.tau)
        self.critic1_target.soft_update(self.critic1, self.config.tau)
        self.critic2_target.soft_update(self.critic2, self.config.tau)
        self.actor_updates += 1

        return {
            'L_policy': policy_loss,
            'L_guidance': guidance,
            'beta': beta,
            'L_actor': actor_loss(policy_loss, guidance, beta),
        }

    def update(self, batch: Dict[str, np.ndarray]) -> Dict[str, float]:
        stats = self.critic_update(batch)
        if self.updates % self.config.policy_delay == 0:
            stats.update(self.actor_update(batch))
        return stats

    def policy(self) -> 'ActorPolicy':
        """Snapshot of the current actor and normalizer statistics"""
        normalizer = self.normalizer.copy() if self.normalizer is not None else None
        return ActorPolicy(self.actor.copy(), normalizer)


class ActorPolicy:
    """Frozen actor as an episode policy (noise-free)"""

    def __init__(self, actor: Mlp, normalizer: Optional[RunningNormalizer] = None):
        self.actor = actor
        self.normalizer = normalizer

    def __call__(self, observation: np.ndarray, world: World = None) -> Action:
        flat = normalize_observation(np.asarray(observation, dtype=float).reshape(-1), self.normalizer)
        return Action.from_normalized(np.clip(self.actor(flat), -1.0, 1.0))


def evaluate_actor(policy: ActorPolicy, env: HighwayEnv, seeds: Sequence[int]) -> float:
    """Mean unnormalized return of noise-free episodes"""
    returns = []
    for seed in seeds:
        trace = run_episode(policy, env, seed)
        returns.append(sum(record.reward for record in trace.records))
    return float(np.mean(returns))


@dataclass
class TrainingResult:
    agent: GuidedTD3Agent
    log: pd.DataFrame
    q1: Optional[float]
    eval_returns: List[float] = field(default_factory=list)

    def final_eval_return(self) -> float:
        return self.eval_returns[-1] if self.eval_returns else float('nan')


def _dump_divergence(dump_dir: Optional[Path], payload: Dict[str, Any]) -> Optional[Path]:
    if dump_dir is None:
        return None
    dump_dir = Path(dump_dir)
    dump_dir.mkdir(parents=True, exist_ok=True)
    path = dump_dir / 'divergence_dump.json'
    with open(path, 'w') as f:
        json.dump(payload, f, indent=2, default=float)
    return path


def train(env: HighwayEnv, expert_policy, trainer: TrainerConfig = None,
          schedule: FadingSchedule = None, total_steps: int = 50_000,
          guided: bool = True, eval_env: HighwayEnv = None,
          dump_dir: Union[str, Path] = None) -> TrainingResult:
    """Collect experience and update the agent; returns the agent and its training log.

    With guided=False the expert is never queried and beta is 0; a guided run
    with q1 = 0 performs the same parameter updates.
    """
    trainer = trainer or TrainerConfig()
    if total_steps <= 0:
        raise ValueError("total_steps must be positive")
    if guided and expert_policy is None:
        raise ValueError("guided training needs an expert policy")

    updates_planned = planned_updates(total_steps, trainer)
    if schedule is None:
        schedule = FadingSchedule(total=updates_planned)
    elif schedule.total != updates_planned:
        schedule = FadingSchedule(q1=schedule.q1, q2=schedule.q2, total=updates_planned)

    rng = np.random.Generator(np.random.PCG64(trainer.seed))
    rows = env.observation_rows
    obs_dim = rows * OBSERVATION_COLUMNS
    normalizer = None
    if trainer.normalize_observations:
        normalizer = RunningNormalizer(obs_dim, trainer.observation_clip, skip=presence_columns(rows))
    reward_scaler = RewardScaler(trainer.gamma) if trainer.normalize_rewards else None

    agent = GuidedTD3Agent(obs_dim, trainer, schedule, rng, guided=guided, normalizer=normalizer)
    buffer = ReplayBuffer(obs_dim, trainer.buffer_capacity)
    eval_env = eval_env or env
    eval_seeds = [trainer.seed + 10_000 + i for i in range(trainer.eval_episodes)]

    episode_seed = trainer.seed
    observation = env.reset(episode_seed)
    if guided and hasattr(expert_policy, 'reset'):
        expert_policy.reset()

    rows_out: List[Dict[str, float]] = []
    eval_returns: List[float] = []
    last_eval = float('nan')
    episodes = 0
    start_updates = max(trainer.warmup_steps, trainer.batch_size)

    logger.info(f"Training {'guided' if guided else 'unguided'} TD3 for {total_steps} steps "
                f"({updates_planned} planned updates)")

    for step in range(total_steps):
        flat = observation.reshape(-1)
        if guided:
            reference = expert_policy(observation, env.world).normalized()
        else:
            reference = np.zeros(ACTION_DIM)

        if normalizer is not None:
            normalizer.update(flat)

        if step < trainer.warmup_steps:
            action = rng.uniform(-1.0, 1.0, size=ACTION_DIM)
        else:
            action = agent.act(flat, explore=True)

        outcome = env.step(Action.from_normalized(action))
        reward = outcome.reward
        if reward_scaler is not None:
            reward = reward_scaler(reward, outcome.done)

        terminal = outcome.done and outcome.reason != TerminationReason.TIMEOUT
        buffer.add(Transition(flat, action, reward, outcome.observation.reshape(-1),
                              terminal, np.clip(reference, -1.0, 1.0)))
        observation = outcome.observation

        if outcome.done:
            episodes += 1
            episode_seed += 1
            observation = env.reset(episode_seed)
            if guided and hasattr(expert_policy, 'reset'):
                expert_policy.reset()

        if step >= start_updates and len(buffer) >= trainer.batch_size:
            stats = agent.update(buffer.sample(trainer.batch_size, rng))

            if not all(math.isfinite(value) for value in stats.values()):
                path = _dump_divergence(dump_dir, {
                    'step': step, 'update': agent.updates, 'stats': stats,
                    'trainer': trainer.to_dict(), 'q1': agent.schedule.q1, 'q2': agent.schedule.q2,
                })
                logger.error(f"Non-finite loss at step {step} (update {agent.updates}); dump: {path}")
                raise TrainingDivergedError(f"Non-finite loss at update {agent.updates}: {stats}")

            if 'L_actor' in stats and agent.actor_updates % trainer.log_interval == 0:
                rows_out.append({
                    'update': agent.updates,
                    'L_policy': stats['L_policy'],
                    'L_guidance': stats['L_guidance'],
                    'beta': stats['beta'],
                    'L_actor': stats['L_actor'],
                    'eval_return': last_eval,
                })

        if trainer.eval_interval and (step + 1) % trainer.eval_interval == 0:
            last_eval = evaluate_actor(agent.policy(), eval_env, eval_seeds)
            eval_returns.append(last_eval)
            if rows_out:
                rows_out[-1]['eval_return'] = last_eval
            logger.info(f"Step {step + 1}: eval return {last_eval:.2f} after {episodes} episodes")
            if eval_env is env:
                # evaluation reused the training env; start a fresh episode
                episode_seed += 1
                observation = env.reset(episode_seed)
                if guided and hasattr(expert_policy, 'reset'):
                    expert_policy.reset()

    log = pd.DataFrame(rows_out, columns=TRAINING_LOG_COLUMNS)
    return TrainingResult(agent=agent, log=log, q1=agent.schedule.q1, eval_returns=eval_returns)


def write_training_log(log: pd.DataFrame, path: Union[str, Path]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    log.to_csv(path, index=False, float_format='%.17g')
    return path


def save_checkpoint(path: Union[str, Path], agent: GuidedTD3Agent, scenario: ScenarioConfig) -> Path:
    """Versioned .npz archive of all networks, normalizer statistics and config hashes"""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)

    arrays: Dict[str, np.ndarray] = {
        'format_version': np.array(CHECKPOINT_VERSION),
        'config_hash': np.array(training_config_hash(scenario, agent.config)),
        'scenario_hash': np.array(scenario.config_hash()),
        'trainer_config': np.array(json.dumps(agent.config.to_dict(), sort_keys=True)),
        'layer_sizes': np.array(agent.actor.spec.layer_sizes),
    }
    for name in ('actor', 'critic1', 'critic2'):
        arrays.update(getattr(agent, name).state_dict(name))
    if agent.normalizer is not None:
        arrays.update(agent.normalizer.state_dict())

    with open(path, 'wb') as f:
        np.savez(f, **arrays)
    logger.info(f"Checkpoint written to {path}")
    return path


def load_checkpoint(path: Union[str, Path], scenario: ScenarioConfig = None) -> ActorPolicy:
    """Frozen actor policy from a checkpoint; refuses a checkpoint trained on another scenario"""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"Checkpoint not found: {path}")

    with np.load(path, allow_pickle=False) as archive:
        state = {key: archive[key] for key in archive.files}

    version = int(state['format_version'])
    if version != CHECKPOINT_VERSION:
        raise CheckpointMismatchError(f"Checkpoint {path} has format version {version}, "
                                      f"expected {CHECKPOINT_VERSION}")
    if scenario is not None and str(state['scenario_hash']) != scenario.config_hash():
        raise CheckpointMismatchError(
            f"Checkpoint {path} was trained on a different scenario configuration "
            f"({str(state['scenario_hash'])[:12]} != {scenario.config_hash()[:12]})"
        )

    spec = MlpSpec(tuple(int(size) for size in state['layer_sizes']), 'tanh', 'tanh')
    actor = Mlp(spec, params=[state[f"actor.{i}"] for i in range(2 * spec.n_layers)])
    normalizer = None
    if 'normalizer.mean' in state:
        normalizer = RunningNormalizer.from_state_dict(state)
    return ActorPolicy(actor, normalizer)
