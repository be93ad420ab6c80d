"""
Agent variants: the equivariant two-network agent, its ablations and the
pixel-wise baselines, all trained through the same bandit pipeline.
"""
import dataclasses
import logging
from dataclasses import dataclass
from functools import lru_cache

import numpy as np

from . import autodiff
from .asr import CHANNELS, DEPTH, GraspAction, ModelConfig, build_asr_model, crop, preprocess
from .autodiff import Adam, Module, Tensor
from .bandit import (
    CORRECTED, LOSS_KINDS, ORIGINAL_ASR, LossBreakdown, TrainerConfig, augment_and_store, augmented_copy,
    compute_loss, sample_minibatch, train_step,
)
from .exceptions import ConfigurationError, InvalidArgumentError, NoDataError
from .exploration import BOLTZMANN, EPSILON_GREEDY, GREEDY, Exploration, greedy_index
from .groups import (
    CYCLIC, QUOTIENT_REGULAR, REGULAR, TRIVIAL, GroupElement, SymmetryGroup, inverse, transform_grid, transform_pixel,
)
from .networks import PLAIN, FullyConvNet, ResNet, UNet, match_parameter_count

logger = logging.getLogger(__name__)

EQUIVARIANT_ASR = 'equivariant-asr'
NO_EQU = 'no-equ'
NO_ASR = 'no-asr'
ROT_EQU = 'rot-equ'
VPG = 'vpg'
FCGQCNN = 'fcgqcnn'
MODEL_KINDS = (EQUIVARIANT_ASR, NO_EQU, NO_ASR, ROT_EQU, VPG, FCGQCNN)
ASR_KINDS = (EQUIVARIANT_ASR, NO_EQU)

NO_AUGMENTATION = 'none'
RAD = 'rad'
SOFT_EQU = 'soft-equ'
AUGMENTATIONS = (NO_AUGMENTATION, RAD, SOFT_EQU)

EPSILON_START = 0.5
EPSILON_END = 0.1
EPSILON_SPAN = 500


@dataclass(frozen=True)
class AgentVariant:
    name: str
    model_kind: str = EQUIVARIANT_ASR
    augmentation: str = NO_AUGMENTATION
    augmentation_n: int = 1
    exploration: str = BOLTZMANN
    loss: str = CORRECTED
    prioritize: bool = True
    data_aug: bool = True
    softmax_head: bool = True
    cyclic_q2: bool = False
    collision_penalty: bool = None

    def __post_init__(self):
        if self.model_kind not in MODEL_KINDS:
            raise ConfigurationError(f"Unknown model kind {self.model_kind!r}. Choose from: {MODEL_KINDS}")
        if self.augmentation not in AUGMENTATIONS:
            raise ConfigurationError(f"Unknown augmentation {self.augmentation!r}. Choose from: {AUGMENTATIONS}")
        if self.exploration not in (BOLTZMANN, EPSILON_GREEDY):
            raise ConfigurationError(f"Unknown exploration {self.exploration!r}")
        if self.loss not in LOSS_KINDS:
            raise ConfigurationError(f"Unknown loss {self.loss!r}. Choose from: {LOSS_KINDS}")
        if self.model_kind not in ASR_KINDS and (self.loss != CORRECTED or self.cyclic_q2):
            raise ConfigurationError(f"{self.name}: q2 options need a two-network model")
        if self.augmentation != NO_AUGMENTATION:
            if self.data_aug:
                raise ConfigurationError(f"{self.name}: minibatch augmentation replaces replay augmentation")
            if self.augmentation_n not in (2, 4, 8):
                raise ConfigurationError(f"{self.name}: augmentation factor must be 2, 4 or 8")

    def collision_penalty_for(self, trainer):
        return trainer.collision_penalty if self.collision_penalty is None else self.collision_penalty


def _baseline(name, kind, augmentation=NO_AUGMENTATION, n=1):
    return AgentVariant(
        name=name, model_kind=kind, augmentation=augmentation, augmentation_n=n, exploration=EPSILON_GREEDY,
        prioritize=False, data_aug=False, softmax_head=False,
    )


VARIANTS = {variant.name: variant for variant in (
    AgentVariant('ours'),
    AgentVariant('no-equ', model_kind=NO_EQU),
    AgentVariant('no-asr', model_kind=NO_ASR),
    AgentVariant('rot-equ', model_kind=ROT_EQU, augmentation=RAD, augmentation_n=4, data_aug=False),
    AgentVariant('no-opt', loss=ORIGINAL_ASR, prioritize=False, exploration=EPSILON_GREEDY, data_aug=False,
                 softmax_head=False),
    AgentVariant('asr-loss', loss=ORIGINAL_ASR),
    AgentVariant('no-prioritize', prioritize=False),
    AgentVariant('e-greedy', exploration=EPSILON_GREEDY),
    AgentVariant('no-data-aug', data_aug=False),
    AgentVariant('no-softmax', softmax_head=False),
    AgentVariant('cyclic-q2', cyclic_q2=True),
    AgentVariant('no-collision-penalty', collision_penalty=False),
    _baseline('vpg', VPG),
    _baseline('fcgqcnn', FCGQCNN),
    _baseline('vpg-rad', VPG, RAD, 8),
    _baseline('fcgqcnn-rad', FCGQCNN, RAD, 8),
    _baseline('vpg-soft-equ', VPG, SOFT_EQU, 4),
    _baseline('fcgqcnn-soft-equ', FCGQCNN, SOFT_EQU, 4),
)}


def variant_names():
    return tuple(VARIANTS)


def get_variant(name):
    try:
        return VARIANTS[name]
    except KeyError:
        raise ConfigurationError(
            f"Unknown variant {name!r}. Choose from: {', '.join(VARIANTS)}"
        ) from None


def epsilon_schedule(grasp_index, start=EPSILON_START, end=EPSILON_END, span=EPSILON_SPAN):
    """Linear decay from ``start`` to ``end`` over ``span`` grasps, constant afterwards."""
    if grasp_index < 0:
        raise InvalidArgumentError(f"Grasp index must be non-negative, got {grasp_index}")
    if grasp_index >= span:
        return end
    return start + (end - start) * grasp_index / span


def rad_augment(batch, n, rng, n_theta, rotations=16, max_shift_fraction=0.25):
    """``n`` minibatches, each transition independently moved by a random rotation and shift."""
    if n < 1:
        raise InvalidArgumentError(f"RAD factor must be positive, got {n}")
    return [
        [augmented_copy(t, rng, n_theta, rotations, max_shift_fraction) for t in batch]
        for _ in range(n)
    ]


def soft_equ_augment(buffer, batch_size, n, rng, n_theta, rotations=16, max_shift_fraction=0.25):
    """
    ``batch_size // n`` source transitions, each replicated ``n`` times with
    independent random transforms. ``n == 1`` is a plain uniform batch.
    """
    if n < 1 or batch_size % n:
        raise InvalidArgumentError(f"Soft equivariance factor {n} must divide the batch size {batch_size}")
    if not len(buffer):
        raise NoDataError("Cannot sample from an empty replay buffer")
    count = batch_size // n
    sources = rng.choice(len(buffer), size=count, replace=count > len(buffer))
    if n == 1:
        return [buffer[int(i)] for i in sources]
    return [
        augmented_copy(buffer[int(i)], rng, n_theta, rotations, max_shift_fraction)
        for i in sources for _ in range(n)
    ]


class ChannelQModel(Module):
    """One fully convolutional network with an output channel per orientation class."""

    def __init__(self, network, config, modality=DEPTH):
        self.network = network
        self.config = config
        self.modality = modality

    @property
    def n_theta(self):
        return self.network.out_channels

    def q_batch(self, observations):
        data = np.stack([obs.data for obs in observations])
        return self.network(Tensor(preprocess(data, self.modality, self.config)))

    def taken_values(self, batch):
        out = self.q_batch([t.obs for t in batch])
        index = np.arange(len(batch))
        thetas = [t.action.theta_class for t in batch]
        rows = [t.action.pixel[0] for t in batch]
        cols = [t.action.pixel[1] for t in batch]
        return autodiff.take_pixels(out, index, thetas, rows, cols)

    def qmaps(self, obs):
        with autodiff.no_grad():
            return self.q_batch([obs]).data[0].astype(np.float64)


class RotatedInputQModel(Module):
    """
    Single-channel network scoring one canonical gripper orientation; other
    orientations are scored by rotating the observation under the network.
    """

    def __init__(self, network, config, modality=DEPTH, n_theta=8):
        self.network = network
        self.config = config
        self.modality = modality
        self.n_theta = n_theta
        self.rotations = SymmetryGroup(CYCLIC, 2 * n_theta)

    def _rotation(self, theta_class):
        return GroupElement(theta_class % self.rotations.n, 0)

    def _canonical(self, obs, theta_class):
        g = inverse(self._rotation(theta_class), self.rotations)
        return obs.transformed(g, self.rotations)

    def _forward(self, observations):
        data = np.stack([obs.data for obs in observations])
        return self.network(Tensor(preprocess(data, self.modality, self.config)))

    def taken_values(self, batch):
        rows, cols, canonical = [], [], []
        for t in batch:
            g = inverse(self._rotation(t.action.theta_class), self.rotations)
            canonical.append(self._canonical(t.obs, t.action.theta_class))
            height, width = t.obs.size
            row, col = transform_pixel(g, self.rotations, t.action.pixel, (height, width))
            rows.append(int(np.clip(row, 0, height - 1)))
            cols.append(int(np.clip(col, 0, width - 1)))
        out = self._forward(canonical)
        return autodiff.take_pixels(out, np.arange(len(batch)), 0, rows, cols)

    def qmaps(self, obs):
        with autodiff.no_grad():
            rotated = self._forward([self._canonical(obs, c) for c in range(self.n_theta)]).data[:, 0]
        maps = [
            transform_grid(rotated[c].astype(np.float64), self._rotation(c), self.rotations, fill=0.0)
            for c in range(self.n_theta)
        ]
        return np.stack(maps)


class Agent:
    """What the training loop needs from a variant: acting, storing, learning and weights."""

    def __init__(self, variant, model, trainer, n_theta):
        self.variant = variant
        self.model = model
        self.trainer = trainer
        self.n_theta = n_theta

    @property
    def name(self):
        return self.variant.name

    def parameters(self):
        return self.model.parameters()

    def parameter_count(self):
        return self.model.parameter_count()

    def state_dict(self):
        return self.model.state_dict()

    def load_state_dict(self, arrays):
        self.model.load_state_dict(arrays)

    def optimizer(self):
        return Adam(self.parameters(), lr=self.trainer.learning_rate)

    def exploration(self, grasp_index=0, evaluation=False):
        if self.variant.exploration == EPSILON_GREEDY:
            if evaluation:
                return Exploration(GREEDY)
            return Exploration(EPSILON_GREEDY, epsilon=epsilon_schedule(grasp_index))
        tau = self.trainer.tau_test if evaluation else self.trainer.tau_train
        return Exploration(BOLTZMANN, tau=tau)

    def act(self, obs, mask, rng, grasp_index=0, evaluation=False):
        raise NotImplementedError

    def qmap(self, obs):
        """Per-pixel value map ``[h, w]`` used by dumps."""
        raise NotImplementedError

    def best_orientation(self, obs, pixel):
        raise NotImplementedError

    def loss(self, batch, rng):
        raise NotImplementedError

    def store(self, buffer, transition, rng):
        if self.variant.data_aug:
            augment_and_store(
                buffer, transition, rng, self.n_theta, copies=self.trainer.augmentation_copies,
                rotations=self.trainer.augmentation_rotations, max_shift_fraction=self.trainer.max_shift_fraction,
            )
        else:
            buffer.add(transition)

    def learn(self, buffer, optimizer, rng):
        """All optimizer steps that follow one grasp; returns their loss values."""
        variant, trainer = self.variant, self.trainer
        augment = dict(rotations=trainer.augmentation_rotations, max_shift_fraction=trainer.max_shift_fraction)
        if variant.augmentation == RAD:
            batch = sample_minibatch(buffer, trainer.batch_size, rng, prioritize=variant.prioritize)
            batches = rad_augment(batch, variant.augmentation_n, rng, self.n_theta, **augment)
        elif variant.augmentation == SOFT_EQU:
            batches = [
                soft_equ_augment(buffer, trainer.batch_size, variant.augmentation_n, rng, self.n_theta, **augment)
                for _ in range(variant.augmentation_n)
            ]
        else:
            batches = [None] * trainer.steps_per_grasp
        return [
            train_step(buffer, self, optimizer, trainer, rng, batch=batch, prioritize=variant.prioritize)
            for batch in batches
        ]


class ASRAgent(Agent):
    def act(self, obs, mask, rng, grasp_index=0, evaluation=False):
        exploration = self.exploration(grasp_index, evaluation)
        return self.model.select_action(obs, mask, exploration.tau, rng, exploration=exploration)

    def qmap(self, obs):
        return self.model.q1_forward(obs).values

    def best_orientation(self, obs, pixel):
        return greedy_index(self.model.q2_forward(crop(obs, pixel, self.model.crop_size)).values)

    def loss(self, batch, rng):
        return compute_loss(batch, self.model, self.trainer.off_policy_samples, self.trainer.tau_train, rng,
                            loss_kind=self.variant.loss)


class PixelQAgent(Agent):
    """Agents whose single network scores every (orientation, pixel) pair directly."""

    def act(self, obs, mask, rng, grasp_index=0, evaluation=False):
        values = self.model.qmaps(obs)
        full_mask = None if mask is None else np.broadcast_to(mask, values.shape)
        flat = self.exploration(grasp_index, evaluation).choose(values, rng, mask=full_mask)
        theta, row, col = np.unravel_index(flat, values.shape)
        return GraspAction(pixel=(row, col), theta_class=theta)

    def qmap(self, obs):
        return self.model.qmaps(obs).max(axis=0)

    def best_orientation(self, obs, pixel):
        return greedy_index(self.model.qmaps(obs)[:, pixel[0], pixel[1]])

    def loss(self, batch, rng):
        rewards = np.array([t.reward for t in batch])
        predicted = self.model.taken_values(batch)
        diff = autodiff.sub(predicted, rewards.astype(predicted.dtype))
        total = autodiff.scale(autodiff.mean(autodiff.mul(diff, diff)), 0.5)
        return LossBreakdown(total=total, l1_prime=0.0, l1_double_prime=0.0, l2=total.item())


def _probe_rng():
    return np.random.default_rng(0)


@lru_cache(maxsize=8)
def reference_counts(config, modality):
    """Parameter counts of the equivariant q1 and q2 for ``config``."""
    model = build_asr_model(config, modality, _probe_rng())
    return model.q1.parameter_count(), model.q2.parameter_count()


def _matched_widths(build, widths, target):
    return match_parameter_count(lambda w: build(w, _probe_rng()), widths, target).widths


def _pixel_network(variant, config, modality, n_theta, target):
    """Build the single network of a non-ASR variant, sized to ``target`` free weights."""
    channels = CHANNELS[modality]
    squash = variant.softmax_head
    kernel = config.kernel_size
    kind = variant.model_kind
    if kind == NO_ASR:
        group = SymmetryGroup(CYCLIC, 2 * n_theta, quotient=True)

        def build(w, rng):
            return UNet(group, channels, w, QUOTIENT_REGULAR, 1, rng, kernel, squash)
    elif kind == ROT_EQU:
        def build(w, rng):
            return UNet(PLAIN, channels, w, REGULAR, n_theta, rng, kernel, squash)
    elif kind == FCGQCNN:
        def build(w, rng):
            return FullyConvNet(channels, w, n_theta, rng, kernel, squash)
    else:
        def build(w, rng):
            return FullyConvNet(channels, w, 1, rng, kernel, squash)
    return build, _matched_widths(build, config.q1_widths, target)


def build_variant(name, model_config=None, trainer=None, modality=DEPTH, rng=None, preset='default'):
    """A fully wired agent for the registered variant ``name``."""
    variant = get_variant(name)
    config = model_config or ModelConfig.from_settings(preset)
    trainer = trainer or TrainerConfig.from_settings(preset)
    rng = rng if rng is not None else np.random.default_rng()
    if variant.cyclic_q2:
        config = dataclasses.replace(config, q2_group_color=config.q2_group_depth)
    n_theta = config.q2_group(modality).class_count
    q1_count, q2_count = reference_counts(config, modality)

    if variant.model_kind == EQUIVARIANT_ASR:
        model = build_asr_model(config, modality, rng, squash_output=variant.softmax_head)
        agent = ASRAgent(variant, model, trainer, n_theta)
    elif variant.model_kind == NO_EQU:
        channels = CHANNELS[modality]
        q1_widths = _matched_widths(
            lambda w, r: UNet(PLAIN, channels, w, TRIVIAL, 1, r, config.kernel_size), config.q1_widths, q1_count,
        )
        q2_widths = _matched_widths(
            lambda w, r: ResNet(PLAIN, channels, w, REGULAR, n_theta, r, config.kernel_size,
                                input_size=config.crop_size),
            config.q2_widths, q2_count,
        )
        model = build_asr_model(config, modality, rng, q1_group=PLAIN, q2_group=PLAIN, q1_widths=q1_widths,
                                q2_widths=q2_widths, squash_output=variant.softmax_head)
        agent = ASRAgent(variant, model, trainer, n_theta)
    else:
        target = q1_count + q2_count
        if variant.model_kind == ROT_EQU:
            no_asr_build, no_asr_widths = _pixel_network(get_variant('no-asr'), config, modality, n_theta, target)
            target = no_asr_build(no_asr_widths, _probe_rng()).parameter_count()
        build, widths = _pixel_network(variant, config, modality, n_theta, target)
        network = build(widths, rng)
        if variant.model_kind == VPG:
            model = RotatedInputQModel(network, config, modality, n_theta)
        else:
            model = ChannelQModel(network, config, modality)
        agent = PixelQAgent(variant, model, trainer, n_theta)

    logger.info("Built variant %s (%s) with %d parameters", name, variant.model_kind, agent.parameter_count())
    return agent
