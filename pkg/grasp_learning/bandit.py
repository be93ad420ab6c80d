"""
Contextual-bandit training: replay with failure priority, SE(2) augmentation,
the corrected two-network loss and the per-grasp optimisation step.
"""
import dataclasses
import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff
from .asr import GraspAction, Observation, crop
from .conf import section
from .exceptions import ConfigurationError, InvalidArgumentError, NoDataError
from .exploration import boltzmann_probabilities, boltzmann_sample  # noqa: F401  (re-exported)
from .groups import CYCLIC, GroupElement, SymmetryGroup, quotient_action, transform_grid, transform_pixel, translate_grid

logger = logging.getLogger(__name__)

CORRECTED = 'corrected'
ORIGINAL_ASR = 'original-asr'
LOSS_KINDS = (CORRECTED, ORIGINAL_ASR)


@dataclass(frozen=True, eq=False)
class Transition:
    obs: Observation
    action: GraspAction
    reward: float
    mask: np.ndarray = None

    @property
    def failure(self):
        return self.reward < 1.0


@dataclass(frozen=True)
class TrainerConfig:
    tau_train: float = 0.01
    tau_test: float = 0.002
    augmentation_copies: int = 8
    off_policy_samples: int = 8
    batch_size: int = 16
    buffer_capacity: int = 12000
    learning_rate: float = 1e-4
    steps_per_grasp: int = 1
    collision_penalty: bool = False
    running_window: int = 150
    brightness_augmentation: bool = True
    eval_failure_steps: int = 2
    augmentation_rotations: int = 16
    max_shift_fraction: float = 0.25

    def __post_init__(self):
        if not self.tau_train > self.tau_test > 0:
            raise ConfigurationError(
                f"Temperatures must satisfy tau_train > tau_test > 0, got {self.tau_train} and {self.tau_test}"
            )
        if self.off_policy_samples < 1:
            raise ConfigurationError(f"off_policy_samples must be at least 1, got {self.off_policy_samples}")
        if self.batch_size < 2:
            raise ConfigurationError(f"batch_size must be at least 2, got {self.batch_size}")
        if self.buffer_capacity < self.augmentation_copies + 1:
            raise ConfigurationError("buffer_capacity must hold at least one augmented grasp")

    @classmethod
    def from_settings(cls, preset='default', **overrides):
        values = section('TRAINER', preset)
        values.update(overrides)
        return cls(**values)


class ReplayBuffer:
    """
    Ring buffer of transitions.

    Adding an original (non-augmented) failure remembers its slot; the next
    prioritised minibatch is guaranteed to contain it.
    """

    def __init__(self, capacity):
        if capacity < 1:
            raise InvalidArgumentError(f"Replay capacity must be positive, got {capacity}")
        self.capacity = capacity
        self._items = []
        self._next = 0
        self.recent_failure = None
        self.pending_failure = False

    def __len__(self):
        return len(self._items)

    def __getitem__(self, index):
        return self._items[index]

    def add(self, transition, original=True):
        if len(self._items) < self.capacity:
            self._items.append(transition)
            index = len(self._items) - 1
        else:
            index = self._next
            self._items[index] = transition
            if index == self.recent_failure:
                self.recent_failure, self.pending_failure = None, False
        self._next = (index + 1) % self.capacity
        if original:
            if transition.failure:
                self.recent_failure, self.pending_failure = index, True
            else:
                self.pending_failure = False
        return index

    def snapshot(self):
        """Arrays describing the buffer, suitable for ``numpy.savez_compressed``."""
        if not self._items:
            return {'capacity': np.array([self.capacity])}
        first = self._items[0]
        return {
            'capacity': np.array([self.capacity]),
            'next': np.array([self._next]),
            'recent_failure': np.array([-1 if self.recent_failure is None else self.recent_failure]),
            'pending_failure': np.array([int(self.pending_failure)]),
            'modality': np.array([first.obs.modality]),
            'background': np.array(first.obs.background),
            'observations': np.stack([t.obs.data for t in self._items]),
            'pixels': np.array([t.action.pixel for t in self._items]),
            'theta_classes': np.array([t.action.theta_class for t in self._items]),
            'rewards': np.array([t.reward for t in self._items]),
            'masks': np.stack([
                np.ones(t.obs.size, dtype=bool) if t.mask is None else t.mask for t in self._items
            ]),
        }

    @classmethod
    def restore(cls, arrays):
        buffer = cls(int(arrays['capacity'][0]))
        if 'observations' not in arrays:
            return buffer
        modality = str(arrays['modality'][0])
        background = tuple(arrays['background'])
        for data, pixel, theta, reward, mask in zip(
            arrays['observations'], arrays['pixels'], arrays['theta_classes'], arrays['rewards'], arrays['masks'],
        ):
            buffer._items.append(Transition(
                obs=Observation(data, modality=modality, background=background),
                action=GraspAction(pixel=tuple(pixel), theta_class=int(theta)),
                reward=float(reward),
                mask=np.asarray(mask, dtype=bool),
            ))
        buffer._next = int(arrays['next'][0])
        failure = int(arrays['recent_failure'][0])
        buffer.recent_failure = None if failure < 0 else failure
        buffer.pending_failure = bool(arrays['pending_failure'][0])
        return buffer


def random_transform(rng, rotations, size, max_shift_fraction):
    """A rotation from C_rotations and an integer shift within the given fraction of the image."""
    k = int(rng.integers(rotations))
    limit = int(max_shift_fraction * size)
    shift = tuple(int(v) for v in rng.integers(-limit, limit + 1, size=2))
    return GroupElement(k, 0), shift


def transform_transition(transition, g, group, shift, n_theta):
    """
    Apply ``g`` then ``shift`` to observation, mask and action together.

    Returns ``None`` when the moved action pixel leaves the image.
    """
    obs = transition.obs
    height, width = obs.size
    pixel = transform_pixel(g, group, transition.action.pixel, (height, width), shift)
    if not (0 <= pixel[0] < height and 0 <= pixel[1] < width):
        return None
    steps = g_for_classes(g, group, n_theta)
    theta = quotient_action(_class_group(group, n_theta), steps, transition.action.theta_class)
    mask = transition.mask
    if mask is not None:
        moved = transform_grid(mask.astype(np.float64), g, group, fill=0.0)
        mask = translate_grid(moved, shift, fill=0.0) >= 0.5
    return dataclasses.replace(
        transition,
        obs=obs.transformed(g, group, shift),
        action=dataclasses.replace(transition.action, pixel=pixel, theta_class=theta),
        mask=mask,
    )


def _class_group(group, n_theta):
    return SymmetryGroup(group.kind, 2 * n_theta, quotient=True)


def g_for_classes(g, group, n_theta):
    """Re-express a rotation of ``group`` as a step count of the 2 * n_theta orientation grid."""
    steps = g.k * 2 * n_theta
    if steps % group.n:
        raise InvalidArgumentError(f"Rotation {g} of {group} is not a multiple of the orientation step")
    return GroupElement(steps // group.n % (2 * n_theta), g.f)


def augmented_copy(transition, rng, n_theta, rotations=16, max_shift_fraction=0.25, max_draws=100):
    """A randomly rotated and shifted copy whose action stays in the image; identity after ``max_draws`` rejections."""
    group = SymmetryGroup(CYCLIC, rotations)
    size = transition.obs.size[0]
    for _ in range(max_draws):
        g, shift = random_transform(rng, rotations, size, max_shift_fraction)
        moved = transform_transition(transition, g, group, shift, n_theta)
        if moved is not None:
            return moved
    logger.warning("No in-bounds augmentation after %d draws; keeping the untransformed transition", max_draws)
    return transition


def augment_and_store(buffer, transition, rng, n_theta, copies=8, rotations=16, max_shift_fraction=0.25):
    """Store ``transition`` and ``copies`` randomly transformed versions (``copies + 1`` records)."""
    buffer.add(transition, original=True)
    for _ in range(copies):
        buffer.add(augmented_copy(transition, rng, n_theta, rotations, max_shift_fraction), original=False)


def sample_minibatch(buffer, batch_size, rng, prioritize=True):
    """
    Uniform sample of ``batch_size`` transitions (with replacement when the buffer is
    smaller); a pending failure replaces the first slot unless already drawn.
    """
    if not len(buffer):
        raise NoDataError("Cannot sample from an empty replay buffer")
    replace = batch_size > len(buffer)
    indices = rng.choice(len(buffer), size=batch_size, replace=replace)
    if prioritize and buffer.pending_failure and buffer.recent_failure is not None:
        if buffer.recent_failure not in indices:
            indices[0] = buffer.recent_failure
        buffer.pending_failure = False
    return [buffer[int(i)] for i in indices]


def brighten(batch, rng, low=0.9, high=1.1):
    """Scale each color observation by an independent brightness factor."""
    out = []
    for transition in batch:
        if transition.obs.modality != 'color':
            out.append(transition)
            continue
        factor = rng.uniform(low, high)
        out.append(dataclasses.replace(
            transition, obs=dataclasses.replace(transition.obs, data=transition.obs.data * factor),
        ))
    return out


@dataclass
class LossBreakdown:
    total: autodiff.Tensor
    l1_prime: float
    l1_double_prime: float
    l2: float

    @property
    def value(self):
        return float(self.total.item())


def _square_half_mean(prediction, target):
    diff = autodiff.sub(prediction, target)
    return autodiff.scale(autodiff.mean(autodiff.mul(diff, diff)), 0.5)


def compute_loss(batch, model, k, tau, rng, loss_kind=CORRECTED):
    """
    ``L = L1' + L1'' + L2`` for the two-network model.

    ``L2`` fits the taken orientation to the reward, ``L1'`` fits q1 at the taken
    pixel to the best entry of q2 with the taken orientation replaced by the reward,
    and ``L1''`` fits q1 at ``k`` Boltzmann-sampled pixels to the best entry of a
    detached q2. ``original-asr`` uses the uncorrected q2 maximum and no ``L1''``.
    """
    if not batch:
        raise NoDataError("compute_loss needs a non-empty batch")
    if loss_kind not in LOSS_KINDS:
        raise InvalidArgumentError(f"Unknown loss {loss_kind!r}. Choose from: {LOSS_KINDS}")
    size = len(batch)
    rows = np.array([t.action.pixel[0] for t in batch])
    cols = np.array([t.action.pixel[1] for t in batch])
    thetas = np.array([t.action.theta_class for t in batch])
    rewards = np.array([t.reward for t in batch], dtype=np.float64)
    index = np.arange(size)

    q1 = model.q1_batch([t.obs for t in batch])
    q2 = model.q2_batch([crop(t.obs, t.action.pixel, model.crop_size) for t in batch])
    q1_taken = autodiff.take_pixels(q1, index, 0, rows, cols)
    q2_taken = autodiff.take_columns(q2, index, thetas)

    l2 = _square_half_mean(q2_taken, rewards.astype(q2.dtype))

    targets = q2.data.astype(np.float64).copy()
    if loss_kind == CORRECTED:
        targets[index, thetas] = rewards
    l1_prime = _square_half_mean(q1_taken, targets.max(axis=1).astype(q1.dtype))

    total = autodiff.add(l1_prime, l2)
    l1_double_prime_value = 0.0
    if loss_kind == CORRECTED and k > 0:
        sample_b, sample_r, sample_c, patches = [], [], [], []
        for b, transition in enumerate(batch):
            values = q1.data[b, 0].astype(np.float64)
            mask = transition.mask if transition.mask is not None and transition.mask.any() else None
            probabilities = boltzmann_probabilities(values, tau, mask)
            flat = rng.choice(values.size, size=k, p=probabilities)
            for r, c in zip(*np.unravel_index(flat, values.shape)):
                sample_b.append(b)
                sample_r.append(r)
                sample_c.append(c)
                patches.append(crop(transition.obs, (r, c), model.crop_size))
        with autodiff.no_grad():
            sample_targets = model.q2_batch(patches).data.max(axis=1)
        q1_samples = autodiff.take_pixels(q1, sample_b, 0, sample_r, sample_c)
        l1_double_prime = _square_half_mean(q1_samples, sample_targets.astype(q1.dtype))
        l1_double_prime_value = l1_double_prime.item()
        total = autodiff.add(total, l1_double_prime)

    return LossBreakdown(
        total=total,
        l1_prime=l1_prime.item(),
        l1_double_prime=l1_double_prime_value,
        l2=l2.item(),
    )


def train_step(buffer, agent, optimizer, config, rng, batch=None, prioritize=True):
    """One minibatch, loss, backward pass and optimizer step; returns the loss value."""
    if batch is None:
        batch = sample_minibatch(buffer, config.batch_size, rng, prioritize=prioritize)
    if config.brightness_augmentation:
        batch = brighten(batch, rng)
    optimizer.zero_grad()
    breakdown = agent.loss(batch, rng)
    breakdown.total.backward()
    optimizer.step()
    return breakdown.value


def running_success(rewards, window=150):
    """Fraction of successes over the last ``window`` rewards; penalised successes (0.8) count."""
    recent = np.asarray(rewards[-window:], dtype=np.float64)
    if recent.size == 0:
        return 0.0
    return float((recent > 0.0).mean())
