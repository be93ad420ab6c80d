"""
Run orchestration behind the management commands: training with periodic
checkpoints and evaluations, standalone evaluation, Q-map dumps and sweeps.

A run directory holds ``config.yaml``, ``variant.txt``, ``metrics.csv``,
``eval.csv``, ``checkpoints/grasp_NNNNNN.ckpt``, ``state.yaml`` and
``replay.npz``; together they are enough to resume or reproduce the run.
"""
import csv
import dataclasses
import logging
import math
import re
import subprocess
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml
from django.conf import settings

from . import __version__, autodiff
from .asr import GraspAction, ModelConfig, QMap
from .bandit import ReplayBuffer, TrainerConfig, Transition, running_success, train_step
from .checkpoints import load_checkpoint, save_checkpoint, split_state
from .conf import PRECISION_CHOICES, grasp_settings, output_dir, section
from .exceptions import CheckpointError, ConfigurationError
from .exploration import BOLTZMANN
from .imaging import action_overlay, write_graymap, write_mask, write_pixmap
from .models import EvaluationRecord, TrainingRun
from .simulator import (
    COLOR, GraspEnvironment, SimulatorConfig, action_mask, normal_of_class, render, render_depth,
    scene_from_document, scene_to_document,
)
from .variants import build_variant, get_variant

logger = logging.getLogger(__name__)

METRICS_FIELDS = ['grasp', 'reward', 'success', 'collision', 'running_success', 'loss', 'tau', 'epsilon', 'seed']
EVAL_FIELDS = ['grasp', 'success_rate', 'standard_error', 'n_grasps', 'tau']
CHECKPOINT_PATTERN = re.compile(r'grasp_(\d{6})\.ckpt$')

TRAIN_STREAM = 1
EVAL_STREAM = 2
EVAL_SCENES = 3


def to_plain(value):
    """Numpy scalars, arrays and tuples to YAML-safe Python values."""
    if isinstance(value, dict):
        return {str(k): to_plain(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [to_plain(v) for v in value]
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    return value


@dataclass(frozen=True)
class RunConfig:
    variant: str = 'ours'
    seed: int = 0
    preset: str = 'default'
    grasp_budget: int = 1500
    eval_period: int = 150
    eval_grasps: int = 1000
    output_dir: str = None
    precision: str = 'float32'
    record: bool = True
    simulator: SimulatorConfig = field(default_factory=SimulatorConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    model: ModelConfig = field(default_factory=ModelConfig)

    def __post_init__(self):
        get_variant(self.variant)
        if self.eval_period <= 0:
            raise ConfigurationError(f"eval_period must be positive, got {self.eval_period}")
        if self.grasp_budget < self.eval_period:
            raise ConfigurationError(
                f"grasp_budget ({self.grasp_budget}) must be at least eval_period ({self.eval_period})"
            )
        if self.precision not in PRECISION_CHOICES:
            raise ConfigurationError(f"Invalid precision {self.precision!r}. Choose from: {PRECISION_CHOICES}")

    @classmethod
    def from_settings(cls, variant='ours', seed=0, preset='default', output_dir=None, simulator=None,
                      trainer=None, model=None, **overrides):
        values = section('EXPERIMENT', preset)
        values.pop('sweep_workers', None)
        values.update(overrides)
        values.setdefault('precision', grasp_settings()['PRECISION'])
        return cls(
            variant=variant, seed=seed, preset=preset, output_dir=output_dir,
            simulator=simulator or SimulatorConfig.from_settings(preset),
            trainer=trainer or TrainerConfig.from_settings(preset),
            model=model or ModelConfig.from_settings(preset),
            **values,
        )

    @property
    def run_dir(self):
        if self.output_dir:
            return Path(self.output_dir)
        return Path(output_dir()) / f"{self.variant}-seed{self.seed}"

    def to_document(self):
        document = to_plain(dataclasses.asdict(self))
        document['output_dir'] = str(self.run_dir)
        return document


@dataclass(frozen=True)
class EvalResult:
    success_rate: float
    standard_error: float
    n_grasps: int
    grasp_index: int = 0

    def __str__(self):
        return f"{100 * self.success_rate:.1f}% +/- {100 * self.standard_error:.2f} over {self.n_grasps} grasps"


def checkpoint_path(run_dir, grasp_index):
    return Path(run_dir) / 'checkpoints' / f"grasp_{grasp_index:06d}.ckpt"


def latest_checkpoint(run_dir):
    found = sorted((Path(run_dir) / 'checkpoints').glob('grasp_*.ckpt'))
    return found[-1] if found else None


def checkpoint_grasp(path):
    match = CHECKPOINT_PATTERN.search(Path(path).name)
    return int(match.group(1)) if match else 0


def load_run_config(path, **overrides):
    from .serializers import run_config_from_yaml
    return run_config_from_yaml(path, **overrides)


def _environment(config, agent, seed):
    simulator = dataclasses.replace(
        config.simulator, collision_penalty=get_variant(config.variant).collision_penalty_for(config.trainer),
    )
    return GraspEnvironment(simulator, seed, n_theta=agent.n_theta)


def _stream(seed, *keys):
    return np.random.default_rng(np.random.SeedSequence([seed, *keys]))


def standard_error(rate, n):
    return math.sqrt(rate * (1.0 - rate) / n) if n else 0.0


class OracleAgent:
    """Upper-bound agent that reads the simulator's ground truth instead of a network."""
    name = 'oracle'

    def __init__(self, environment):
        self.environment = environment
        self.n_theta = environment.n_theta

    def parameters(self):
        return []

    def act(self, obs, mask, rng, grasp_index=0, evaluation=False):
        candidates = self.environment.oracle_candidates()
        if candidates:
            return candidates[int(rng.integers(len(candidates)))]
        rows, cols = np.nonzero(mask)
        pick = int(rng.integers(len(rows)))
        return GraspAction(pixel=(rows[pick], cols[pick]), theta_class=int(rng.integers(self.n_theta)))


def evaluate_agent(agent, environment, n_grasps, rng, failure_steps=2):
    """
    Near-greedy evaluation. After a failure the agent takes ``failure_steps``
    optimizer steps on that transition; the weights it started with are put
    back after the next success and once more at the end.
    """
    learnable = bool(agent.parameters())
    reference = agent.state_dict() if learnable else None
    optimizer = agent.optimizer() if learnable else None
    adapted = False
    successes = 0
    for _ in range(n_grasps):
        mask = environment.ready_mask()
        obs = environment.observe()
        action = agent.act(obs, mask, rng, evaluation=True)
        result = environment.step(action)
        if result.success:
            successes += 1
            if adapted:
                agent.load_state_dict(reference)
                optimizer = agent.optimizer()
                adapted = False
        elif learnable and failure_steps:
            transition = Transition(obs=obs, action=action, reward=result.reward, mask=mask)
            for _ in range(failure_steps):
                train_step(None, agent, optimizer, agent.trainer, rng, batch=[transition])
            adapted = True
    if adapted:
        agent.load_state_dict(reference)
    rate = successes / n_grasps if n_grasps else 0.0
    return EvalResult(success_rate=rate, standard_error=standard_error(rate, n_grasps), n_grasps=n_grasps)


def _append_row(path, fields, row):
    path = Path(path)
    new = not path.exists()
    with path.open('a', newline='') as handle:
        writer = csv.DictWriter(handle, fieldnames=fields, extrasaction='ignore', lineterminator='\n')
        if new:
            writer.writeheader()
        writer.writerow(row)


def _read_rows(path):
    path = Path(path)
    if not path.exists():
        return []
    with path.open(newline='') as handle:
        return list(csv.DictReader(handle))


def _rewrite_rows(path, fields, rows):
    with Path(path).open('w', newline='') as handle:
        writer = csv.DictWriter(handle, fieldnames=fields, extrasaction='ignore', lineterminator='\n')
        writer.writeheader()
        writer.writerows(rows)


def _registry_run(config, **fields):
    if not config.record:
        return None
    run, _ = TrainingRun.objects.update_or_create(
        output_dir=str(config.run_dir.resolve()),
        defaults={'variant': config.variant, 'seed': config.seed, 'grasp_budget': config.grasp_budget, **fields},
    )
    return run


def _registry_evaluation(run, result):
    if run is None:
        return
    EvaluationRecord.objects.update_or_create(
        run=run, grasp_index=result.grasp_index,
        defaults={
            'success_rate': result.success_rate,
            'standard_error': result.standard_error,
            'n_grasps': result.n_grasps,
        },
    )


class TrainingSession:
    """One run of the bandit loop over its grasp budget."""

    def __init__(self, config):
        self.config = config
        self.run_dir = config.run_dir
        self.agent = build_variant(
            config.variant, model_config=config.model, trainer=config.trainer,
            modality=config.simulator.modality, rng=_stream(config.seed, 0),
        )
        self.optimizer = self.agent.optimizer()
        self.buffer = ReplayBuffer(config.trainer.buffer_capacity)
        self.environment = _environment(config, self.agent, config.seed)
        self.rng = _stream(config.seed, TRAIN_STREAM)
        self.rewards = []
        self.grasp = 0
        self.registry_run = None

    @property
    def metrics_path(self):
        return self.run_dir / 'metrics.csv'

    @property
    def eval_path(self):
        return self.run_dir / 'eval.csv'

    def start(self):
        if self.metrics_path.exists() or latest_checkpoint(self.run_dir):
            raise ConfigurationError(f"{self.run_dir} already holds a run; pass resume to continue it")
        (self.run_dir / 'checkpoints').mkdir(parents=True, exist_ok=True)
        with (self.run_dir / 'config.yaml').open('w') as handle:
            yaml.safe_dump(self.config.to_document(), handle, sort_keys=False)
        (self.run_dir / 'variant.txt').write_text(f"{self.config.variant}\n")

    def resume(self):
        path = latest_checkpoint(self.run_dir)
        if path is None:
            raise CheckpointError(f"No checkpoint to resume from in {self.run_dir}")
        weights, optimizer_state = split_state(load_checkpoint(path))
        self.agent.load_state_dict(weights)
        self.optimizer.load_state_arrays(optimizer_state)
        self.grasp = checkpoint_grasp(path)

        with (self.run_dir / 'state.yaml').open() as handle:
            state = yaml.safe_load(handle)
        if state['grasp'] != self.grasp:
            raise CheckpointError(f"state.yaml is at grasp {state['grasp']} but the checkpoint at {self.grasp}")
        self.environment.scene = scene_from_document(state['scene'])
        self.environment.episode = state['episode']
        self.rng.bit_generator.state = state['rng']
        with np.load(self.run_dir / 'replay.npz', allow_pickle=False) as arrays:
            self.buffer = ReplayBuffer.restore(dict(arrays))

        rows = [row for row in _read_rows(self.metrics_path) if int(row['grasp']) <= self.grasp]
        _rewrite_rows(self.metrics_path, METRICS_FIELDS, rows)
        self.rewards = [float(row['reward']) for row in rows]
        evals = [row for row in _read_rows(self.eval_path) if int(row['grasp']) <= self.grasp]
        if evals:
            _rewrite_rows(self.eval_path, EVAL_FIELDS, evals)
        logger.info("Resumed %s at grasp %d", self.run_dir, self.grasp)

    def run(self, resume=False):
        config = self.config
        if resume:
            self.resume()
        else:
            self.start()
        logger.info(
            "Training %s seed=%d precision=%s budget=%d preset=%s parameters=%d",
            config.variant, config.seed, config.precision, config.grasp_budget, config.preset,
            self.agent.parameter_count(),
        )
        self.registry_run = _registry_run(config, status='running', grasps_completed=self.grasp)
        try:
            while self.grasp < config.grasp_budget:
                self.grasp_once()
                if self.grasp % config.eval_period == 0:
                    self.checkpoint()
        except Exception:
            _registry_run(config, status='failed', grasps_completed=self.grasp)
            raise
        final = running_success(self.rewards, config.trainer.running_window)
        _registry_run(config, status='finished', grasps_completed=self.grasp, final_success=final)
        logger.info("Finished %s: running success %.3f", self.run_dir, final)
        return final

    def grasp_once(self):
        config, agent = self.config, self.agent
        index = self.grasp
        mask = self.environment.ready_mask()
        obs = self.environment.observe()
        action = agent.act(obs, mask, self.rng, grasp_index=index)
        result = self.environment.step(action)
        agent.store(self.buffer, Transition(obs=obs, action=action, reward=result.reward, mask=mask), self.rng)
        losses = agent.learn(self.buffer, self.optimizer, self.rng)
        self.rewards.append(result.reward)
        self.grasp += 1

        exploration = agent.exploration(index)
        row = {
            'grasp': self.grasp,
            'reward': result.reward,
            'success': int(result.success),
            'collision': int(result.collision),
            'running_success': running_success(self.rewards, config.trainer.running_window),
            'loss': float(np.mean(losses)) if losses else 0.0,
            'tau': exploration.tau if exploration.kind == BOLTZMANN else 0.0,
            'epsilon': exploration.epsilon,
            'seed': config.seed,
        }
        _append_row(self.metrics_path, METRICS_FIELDS, row)
        logger.debug("grasp %d action=%s reward=%.1f loss=%.5f", self.grasp, action, result.reward, row['loss'])

    def checkpoint(self):
        config = self.config
        path = checkpoint_path(self.run_dir, self.grasp)
        save_checkpoint(path, {**self.agent.state_dict(), **self.optimizer.state_arrays()})
        state = {
            'grasp': self.grasp,
            'episode': self.environment.episode,
            'scene': scene_to_document(self.environment.scene),
            'rng': self.rng.bit_generator.state,
            'variant': config.variant,
            'seed': config.seed,
            'code_version': __version__,
        }
        with (self.run_dir / 'state.yaml').open('w') as handle:
            yaml.safe_dump(to_plain(state), handle, sort_keys=False)
        np.savez_compressed(self.run_dir / 'replay.npz', **self.buffer.snapshot())

        result = self.evaluate()
        _append_row(self.eval_path, EVAL_FIELDS, {
            'grasp': self.grasp, 'success_rate': result.success_rate, 'standard_error': result.standard_error,
            'n_grasps': result.n_grasps, 'tau': config.trainer.tau_test,
        })
        _registry_run(config, status='running', grasps_completed=self.grasp,
                      final_success=running_success(self.rewards, config.trainer.running_window))
        _registry_evaluation(self.registry_run, result)
        logger.info(
            "%s seed %d grasp %d: running success %.3f, eval %s",
            config.variant, config.seed, self.grasp,
            running_success(self.rewards, config.trainer.running_window), result,
        )

    def evaluate(self):
        config = self.config
        scene_seed = int(np.random.SeedSequence([config.seed, EVAL_SCENES, self.grasp]).generate_state(1)[0])
        environment = _environment(config, self.agent, scene_seed)
        result = evaluate_agent(
            self.agent, environment, config.eval_grasps, _stream(config.seed, EVAL_STREAM, self.grasp),
            failure_steps=config.trainer.eval_failure_steps,
        )
        return dataclasses.replace(result, grasp_index=self.grasp)


def run_training(config, resume=False):
    """Train ``config.variant`` for the grasp budget; returns the final running success."""
    config.run_dir.mkdir(parents=True, exist_ok=True)
    with autodiff.precision(config.precision):
        return TrainingSession(config).run(resume=resume)


def load_checkpoint_agent(checkpoint, tau_test=None):
    checkpoint = Path(checkpoint)
    arrays = load_checkpoint(checkpoint)
    run_dir = checkpoint.parent.parent
    config_path = run_dir / 'config.yaml'
    if not config_path.exists():
        raise ConfigurationError(f"{config_path} is missing; the checkpoint is not inside a run directory")
    config = load_run_config(config_path)
    if tau_test is not None:
        trainer = dataclasses.replace(config.trainer, tau_test=tau_test)
        config = dataclasses.replace(config, trainer=trainer)
    with autodiff.precision(config.precision):
        agent = build_variant(config.variant, model_config=config.model, trainer=config.trainer,
                              modality=config.simulator.modality, rng=_stream(config.seed, 0))
    weights, _ = split_state(arrays)
    agent.load_state_dict(weights)
    return config, agent


def run_eval(checkpoint, n_grasps=None, tau_test=None, seed=None):
    """Evaluate a stored checkpoint; the file itself is never modified."""
    config, agent = load_checkpoint_agent(checkpoint, tau_test)
    grasp_index = checkpoint_grasp(checkpoint)
    n_grasps = n_grasps or config.eval_grasps
    seed = config.seed if seed is None else seed
    with autodiff.precision(config.precision):
        scene_seed = int(np.random.SeedSequence([seed, EVAL_SCENES, grasp_index]).generate_state(1)[0])
        environment = _environment(config, agent, scene_seed)
        result = evaluate_agent(agent, environment, n_grasps, _stream(seed, EVAL_STREAM, grasp_index),
                                failure_steps=config.trainer.eval_failure_steps)
    result = dataclasses.replace(result, grasp_index=grasp_index)
    _append_row(config.run_dir / 'eval.csv', EVAL_FIELDS, {
        'grasp': grasp_index, 'success_rate': result.success_rate, 'standard_error': result.standard_error,
        'n_grasps': result.n_grasps, 'tau': config.trainer.tau_test,
    })
    if config.record:
        run = TrainingRun.objects.filter(output_dir=str(config.run_dir.resolve())).first()
        _registry_evaluation(run, result)
    logger.info("Evaluated %s: %s", checkpoint, result)
    return result


def dump_agent_qmaps(agent, scene, simulator, directory):
    """Write observation, mask, Q-map and action overlay images for ``scene``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    obs = render(scene, simulator)
    mask = action_mask(render_depth(scene, simulator), simulator)
    values = agent.qmap(obs)
    pixel = QMap(values=values).argmax(mask if mask.any() else None)
    theta = agent.best_orientation(obs, pixel)
    if simulator.modality == COLOR:
        observation = write_pixmap(directory / 'observation', obs.data)
    else:
        observation = write_graymap(directory / 'observation', obs.data[0])
    overlay = action_overlay(values, pixel, normal_of_class(theta, agent.n_theta))
    paths = {
        'observation': observation,
        'mask': write_mask(directory / 'mask', mask),
        'qmap': write_graymap(directory / 'qmap', values),
        'overlay': write_pixmap(directory / 'overlay', overlay),
    }
    logger.info("Wrote Q-map dump to %s (action pixel %s, class %d)", directory, pixel, theta)
    return paths, pixel, theta


def dump_qmaps(checkpoint, scene, directory=None):
    config, agent = load_checkpoint_agent(checkpoint)
    directory = directory or Path(checkpoint).parent.parent / 'dumps' / Path(checkpoint).stem
    with autodiff.precision(config.precision):
        paths, _, _ = dump_agent_qmaps(agent, scene, config.simulator, directory)
    return paths


@dataclass(frozen=True)
class SweepJob:
    variant: str
    seed: int
    run_dir: Path
    command: tuple


def plan_sweep(variants, seeds, output_root=None, preset='default', config_path=None):
    """One training job (and run directory) per variant and seed."""
    root = Path(output_root or output_dir())
    manage = Path(settings.BASE_DIR) / 'manage.py'
    jobs = []
    for variant in variants:
        get_variant(variant)
        for seed in seeds:
            run_dir = root / f"{variant}-seed{seed}"
            command = [sys.executable, str(manage), 'train', '--variant', variant, '--seed', str(seed),
                       '--output', str(run_dir), '--preset', preset]
            if config_path:
                command += ['--config', str(config_path)]
            jobs.append(SweepJob(variant=variant, seed=int(seed), run_dir=run_dir, command=tuple(command)))
    return jobs


def _run_job(job):
    logger.info("Starting %s seed %d in %s", job.variant, job.seed, job.run_dir)
    result = subprocess.run(list(job.command), capture_output=True, text=True, check=False)
    if result.returncode != 0:
        tail = '\n'.join((result.stderr or '').splitlines()[-5:])
        logger.warning("%s seed %d exited with %d:\n%s", job.variant, job.seed, result.returncode, tail)
    return job, result.returncode


def run_sweep(jobs, workers=None):
    """Run the jobs as concurrent subprocesses; returns ``(job, exit code)`` pairs in plan order."""
    workers = workers or section('EXPERIMENT')['sweep_workers']
    with ThreadPoolExecutor(max_workers=max(1, workers)) as pool:
        return list(pool.map(_run_job, jobs))
