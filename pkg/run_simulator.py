#!/usr/bin/env python3
"""
Run Simulator - command-line front end for expert runs, training, evaluation and trace replay

    python run_simulator.py expert-run --config slow-leader --seed 1..3
    python run_simulator.py train --config reduced --guided --steps 50000
    python run_simulator.py evaluate --config canonical --seed 1..5
    python run_simulator.py replay results/traces/canonical_seed1.csv
"""

import sys
import json
import logging
import argparse
from pathlib import Path
from typing import List, Optional, Sequence

from config import Config
from evaluation_harness import (
    PolicySpec, compute_metrics, evaluate, print_summary, replay_trace, write_summary, write_trace,
)
from expert_system import ExpertConfig, ExpertDriver
from guided_td3 import (
    CheckpointMismatchError, FadingSchedule, TrainerConfig, TrainingDivergedError,
    fading_curve, save_checkpoint, train, training_config_hash, write_training_log,
)
from highway_env import run_episode
from scripted_scenarios import make_env

logger = logging.getLogger(__name__)


def parse_seeds(text: str) -> List[int]:
    """'3', '1..5' (inclusive) or '1,4,9'"""
    text = text.strip()
    try:
        if '..' in text:
            start, end = (int(part) for part in text.split('..', 1))
            if end < start:
                raise ValueError
            return list(range(start, end + 1))
        return [int(part) for part in text.split(',') if part.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"invalid seed list '{text}'; use N, A..B or A,B,C")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog='run_simulator',
                                     description='Two-lane highway overtaking simulator')
    sub = parser.add_subparsers(dest='command', required=True)

    def common(p, default_config):
        p.add_argument('--config', default=default_config,
                       help='preset (canonical, reduced), scripted scenario or scenario JSON path')
        p.add_argument('--seed', type=parse_seeds, default=None, help='seed, A..B range or A,B,C list')
        p.add_argument('--out', default=None, help='output directory (default HIGHWAY_OUTPUT_DIR)')

    p = sub.add_parser('expert-run', help='run the expert policy and write traces')
    common(p, 'canonical')
    p.add_argument('--dump-solver', action='store_true', help='write per-solve CiLQR diagnostics')

    def training(p):
        guidance = p.add_mutually_exclusive_group()
        guidance.add_argument('--guided', dest='guided', action='store_true', default=True)
        guidance.add_argument('--unguided', dest='guided', action='store_false')
        p.add_argument('--steps', type=int, default=50_000)
        p.add_argument('--q1', type=float, default=None, help='initial guidance scale (default: calibrated)')
        p.add_argument('--normalize-rewards', action='store_true')

    p = sub.add_parser('train', help='train the guided TD3 agent')
    common(p, 'reduced')
    training(p)
    p.add_argument('--q2', type=float, default=4.0, help='guidance decay rate')

    p = sub.add_parser('sweep', help='train once per guidance decay rate')
    common(p, 'reduced')
    training(p)
    p.add_argument('--q2', type=float, nargs='+', default=[4.0, 5.0, 6.0, 7.0, 8.0])

    p = sub.add_parser('evaluate', help='evaluate a policy over seeds and episodes')
    common(p, 'canonical')
    p.add_argument('--policy', choices=['expert', 'checkpoint', 'constant'], default='expert')
    p.add_argument('--checkpoint', default=None)
    p.add_argument('--accel', type=float, default=0.0, help='constant policy acceleration')
    p.add_argument('--steer', type=float, default=0.0, help='constant policy steering')
    p.add_argument('--episodes', type=int, default=1, help='episodes per seed')
    p.add_argument('--workers', type=int, default=1)

    p = sub.add_parser('replay', help='re-simulate a recorded trace from its actions')
    p.add_argument('trace')

    p = sub.add_parser('fading-curve', help='write beta(t) for several decay rates')
    p.add_argument('--q1', type=float, default=1.0)
    p.add_argument('--q2', type=float, nargs='+', default=[4.0, 5.0, 6.0, 7.0, 8.0])
    p.add_argument('--steps', type=int, default=50_000)
    p.add_argument('--out', default=None)

    return parser


def _seeds(args) -> List[int]:
    return args.seed if args.seed else [Config.DEFAULT_SEED]


def cmd_expert_run(args) -> int:
    out_dir = Config.get_output_dir(args.out) / 'traces'
    solver_records = []

    for seed in _seeds(args):
        env = make_env(args.config)
        sink = [] if args.dump_solver else None
        driver = ExpertDriver(ExpertConfig(dt=env.dt), diagnostics_sink=sink)
        trace = run_episode(driver, env, seed)
        metrics = compute_metrics(trace)

        path = write_trace(trace, out_dir / f"{env.label}_seed{seed}.csv", args.config, env.scenario, 'expert')
        logger.info(f"{env.label} seed {seed}: {metrics.termination} after {metrics.steps} steps, "
                     f"reward {metrics.episode_reward:.2f}, trace {path}")
        if sink is not None:
            solver_records.append({'scenario': env.label, 'seed': seed, 'solves': sink})

    if args.dump_solver:
        dump = out_dir / 'solver_diagnostics.json'
        with open(dump, 'w') as f:
            json.dump(solver_records, f, indent=2)
        logger.info(f"Solver diagnostics written to {dump}")
    return 0


def _trainer_config(args, seed: int) -> TrainerConfig:
    return TrainerConfig(seed=seed, normalize_rewards=args.normalize_rewards)


def _train_once(args, seed: int, q2: float, run_dir: Path):
    env = make_env(args.config)
    trainer = _trainer_config(args, seed)
    q1 = args.q1 if args.guided else 0.0
    expert = ExpertDriver(ExpertConfig(dt=env.dt)) if args.guided else None

    result = train(env, expert, trainer, FadingSchedule(q1=q1, q2=q2), total_steps=args.steps,
                   guided=args.guided, eval_env=make_env(args.config), dump_dir=run_dir)

    write_training_log(result.log, run_dir / 'training_log.csv')
    save_checkpoint(run_dir / 'checkpoint.npz', result.agent, env.scenario)
    return {
        'seed': seed,
        'q1': result.q1,
        'q2': q2,
        'guided': args.guided,
        'steps': args.steps,
        'config_hash': training_config_hash(env.scenario, trainer),
        'final_eval_return': result.final_eval_return(),
        'eval_returns': result.eval_returns,
    }


def cmd_train(args) -> int:
    base = Config.get_output_dir(args.out)
    summaries = []
    for seed in _seeds(args):
        tag = 'guided' if args.guided else 'unguided'
        run_dir = base / 'training' / f"{tag}_seed{seed}"
        summaries.append(_train_once(args, seed, args.q2, run_dir))
        logger.info(f"Training run written to {run_dir}")

    with open(base / 'training' / 'training_summary.json', 'w') as f:
        json.dump(summaries, f, indent=2)
    return 0


def cmd_sweep(args) -> int:
    base = Config.get_output_dir(args.out) / 'sweep'
    summaries = []
    for q2 in args.q2:
        for seed in _seeds(args):
            run_dir = base / f"q2_{q2:g}_seed{seed}"
            summaries.append(_train_once(args, seed, q2, run_dir))

    base.mkdir(parents=True, exist_ok=True)
    with open(base / 'sweep_summary.json', 'w') as f:
        json.dump(summaries, f, indent=2)
    logger.info(f"Sweep over q2={args.q2} written to {base}")
    return 0


def cmd_evaluate(args) -> int:
    policy = PolicySpec(kind=args.policy, checkpoint=args.checkpoint, accel=args.accel, steer=args.steer)
    result = evaluate(policy, args.config, _seeds(args), episodes_per_seed=args.episodes,
                      workers=args.workers)
    path = write_summary(result, Config.get_output_dir(args.out) / f"summary_{result.scenario}.json")
    print_summary(result)
    print(f"\nSummary written to {path}")
    return 0


def cmd_replay(args) -> int:
    result = replay_trace(args.trace)
    print(f"Rewards match: {result.rewards_match}")
    print(f"Termination: {result.trace.reason.value} (recorded {result.recorded_termination})")
    return 0 if result.matches else 1


def cmd_fading_curve(args) -> int:
    frame = fading_curve(args.q1, args.q2, args.steps)
    path = Config.get_output_dir(args.out) / 'fading_curve.csv'
    path.parent.mkdir(parents=True, exist_ok=True)
    frame.to_csv(path, index=False, float_format='%.17g')
    print(f"Fading curve written to {path}")
    return 0


COMMANDS = {
    'expert-run': cmd_expert_run,
    'train': cmd_train,
    'sweep': cmd_sweep,
    'evaluate': cmd_evaluate,
    'replay': cmd_replay,
    'fading-curve': cmd_fading_curve,
}


def cli_dispatch(argv: Optional[Sequence[str]] = None) -> int:
    """Parse argv and run the subcommand; returns the process exit status"""
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)

    try:
        return COMMANDS[args.command](args)
    except (CheckpointMismatchError, TrainingDivergedError) as e:
        logger.error(str(e))
        return 1
    except (ValueError, FileNotFoundError) as e:
        logger.error(f"{args.command} failed: {e}")
        return 1


def main():
    Config.setup_logging()
    try:
        Config.validate_config()
    except ValueError as e:
        logger.error(str(e))
        sys.exit(1)
    sys.exit(cli_dispatch())


if __name__ == "__main__":
    main()
