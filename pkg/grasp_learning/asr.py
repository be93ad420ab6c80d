"""
The augmented-state Q model.

``q1`` scores every pixel of the observation (where to grasp); ``q2`` scores the
orientation classes of a crop centred on the chosen pixel (how to turn the
gripper). Both heads are squashed into (0, 1).
"""
import dataclasses
import logging
from dataclasses import dataclass, field

import numpy as np

from . import autodiff
from .autodiff import Module, Tensor
from .conf import section
from .exceptions import InvalidArgumentError, ShapeError
from .exploration import Exploration, GREEDY
from .groups import QUOTIENT_REGULAR, REGULAR, TRIVIAL, SymmetryGroup, transform_grid, translate_grid
from .networks import ResNet, UNet

logger = logging.getLogger(__name__)

DEPTH = 'depth'
COLOR = 'color'
MODALITIES = (DEPTH, COLOR)
CHANNELS = {DEPTH: 1, COLOR: 3}


@dataclass(frozen=True, eq=False)
class Observation:
    """Top-down image ``[m, h, w]``; ``background`` is the per-channel value of the empty tray."""
    data: np.ndarray
    modality: str = DEPTH
    background: tuple = (0.0,)

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise InvalidArgumentError(f"Invalid modality {self.modality!r}. Choose from: {MODALITIES}")
        data = np.asarray(self.data, dtype=np.float64)
        if data.ndim != 3 or data.shape[0] != CHANNELS[self.modality]:
            raise ShapeError(f"{self.modality} observation must be [{CHANNELS[self.modality]}, h, w], got {data.shape}")
        if self.modality == DEPTH and (data < 0).any():
            raise InvalidArgumentError("Depth values must be non-negative")
        background = tuple(float(v) for v in np.broadcast_to(self.background, (data.shape[0],)))
        object.__setattr__(self, 'data', data)
        object.__setattr__(self, 'background', background)

    @property
    def channels(self):
        return self.data.shape[0]

    @property
    def size(self):
        return self.data.shape[1:]

    def transformed(self, g, group, shift=(0, 0)):
        """Rotate/reflect about the image centre, then translate; uncovered pixels read as background."""
        planes = []
        for plane, fill in zip(self.data, self.background):
            moved = transform_grid(plane, g, group, fill=fill)
            planes.append(translate_grid(moved, shift, fill=fill))
        data = np.stack(planes)
        if self.modality == DEPTH:
            data = np.maximum(data, 0.0)
        return dataclasses.replace(self, data=data)


@dataclass(frozen=True)
class GraspAction:
    pixel: tuple
    theta_class: int
    z: float = None

    def __post_init__(self):
        object.__setattr__(self, 'pixel', (int(self.pixel[0]), int(self.pixel[1])))
        object.__setattr__(self, 'theta_class', int(self.theta_class))


@dataclass(frozen=True, eq=False)
class QMap:
    values: np.ndarray

    def argmax(self, mask=None):
        values = np.where(mask, self.values, -np.inf) if mask is not None else self.values
        return tuple(int(v) for v in np.unravel_index(np.argmax(values), self.values.shape))


@dataclass(frozen=True, eq=False)
class QVector:
    values: np.ndarray

    def __len__(self):
        return self.values.shape[0]


@dataclass(frozen=True, eq=False)
class CropPatch:
    data: np.ndarray
    center: tuple


def crop(obs, pixel, size):
    """
    Window of ``size`` (int or ``(h', w')``) around ``pixel``.

    Rows ``r - h'//2 .. r - h'//2 + h' - 1`` (same for columns); parts outside
    the image read as the observation background.
    """
    height, width = obs.size
    crop_h, crop_w = (size, size) if np.isscalar(size) else size
    row, col = int(pixel[0]), int(pixel[1])
    if not (0 <= row < height and 0 <= col < width):
        raise InvalidArgumentError(f"Crop centre {pixel} is outside the {height}x{width} image")
    if crop_h > height or crop_w > width:
        raise InvalidArgumentError(f"Crop {crop_h}x{crop_w} is larger than the {height}x{width} image")
    top, left = row - crop_h // 2, col - crop_w // 2
    out = np.empty((obs.channels, crop_h, crop_w), dtype=obs.data.dtype)
    out[:] = np.asarray(obs.background)[:, None, None]
    src_rows = slice(max(top, 0), min(top + crop_h, height))
    src_cols = slice(max(left, 0), min(left + crop_w, width))
    dst_rows = slice(src_rows.start - top, src_rows.stop - top)
    dst_cols = slice(src_cols.start - left, src_cols.stop - left)
    out[:, dst_rows, dst_cols] = obs.data[:, src_rows, src_cols]
    return CropPatch(data=out, center=(row, col))


@dataclass(frozen=True)
class ModelConfig:
    q1_group: str = 'D4'
    q1_widths: tuple = (8, 16, 16, 16)
    q2_group_depth: str = 'C16/C2'
    q2_group_color: str = 'D16/D2'
    q2_widths: tuple = (4, 8, 8, 8)
    crop_size: int = 32
    kernel_size: int = 3
    depth_scale: float = 10.0
    color_mean: float = 0.5
    color_std: float = 0.5

    @classmethod
    def from_settings(cls, preset='default', **overrides):
        values = section('MODEL', preset)
        values.update(overrides)
        values['q1_widths'] = tuple(values['q1_widths'])
        values['q2_widths'] = tuple(values['q2_widths'])
        return cls(**values)

    def q2_group(self, modality):
        return SymmetryGroup.parse(self.q2_group_color if modality == COLOR else self.q2_group_depth)


def preprocess(data, modality, config):
    """Raw rendered values to network inputs: scaled depth or normalised color."""
    data = np.asarray(data, dtype=np.float64)
    if modality == DEPTH:
        return data * config.depth_scale
    return (data - config.color_mean) / config.color_std


@dataclass(frozen=True)
class SelectionTrace:
    """Q values consulted by one action selection (kept for dumps and logging)."""
    qmap: QMap
    qvector: QVector
    action: GraspAction
    mask: np.ndarray = field(default=None, repr=False)


class ASRModel(Module):
    def __init__(self, q1, q2, config, modality=DEPTH):
        self.q1 = q1
        self.q2 = q2
        self.config = config
        self.modality = modality

    @property
    def n_theta(self):
        return self.q2.out_channels

    @property
    def crop_size(self):
        return self.config.crop_size

    def _stack(self, observations):
        if isinstance(observations, Observation):
            observations = [observations]
        data = np.stack([obs.data if isinstance(obs, Observation) else obs for obs in observations])
        if data.shape[1] != CHANNELS[self.modality]:
            raise ShapeError(f"Expected {CHANNELS[self.modality]}-channel {self.modality} input, got {data.shape}")
        return Tensor(preprocess(data, self.modality, self.config))

    def q1_batch(self, observations):
        """``[b, 1, h, w]`` Q-maps, recorded for differentiation."""
        return self.q1(self._stack(observations))

    def q2_batch(self, patches):
        """``[b, n_theta]`` orientation values for raw crops ``[b, m, h', w']``."""
        data = np.stack([p.data if isinstance(p, CropPatch) else p for p in patches])
        return self.q2(Tensor(preprocess(data, self.modality, self.config)))

    def q1_forward(self, obs):
        with autodiff.no_grad():
            return QMap(values=self.q1_batch([obs]).data[0, 0].astype(np.float64))

    def q2_forward(self, patch):
        if patch.data.shape[1:] != (self.crop_size, self.crop_size):
            raise ShapeError(f"Crop {patch.data.shape[1:]} does not match the configured {self.crop_size}")
        with autodiff.no_grad():
            return QVector(values=self.q2_batch([patch]).data[0].astype(np.float64))

    def select_action(self, obs, mask, tau, rng, exploration=None, trace=False):
        """
        Two-stage selection: a pixel from the masked Q-map, then an orientation class
        from the Q-vector of the crop at that pixel. ``tau == 0`` is greedy.
        """
        exploration = exploration or (Exploration(GREEDY) if tau == 0 else Exploration(tau=tau))
        qmap = self.q1_forward(obs)
        flat = exploration.choose(qmap.values, rng, mask=mask)
        pixel = np.unravel_index(flat, qmap.values.shape)
        qvector = self.q2_forward(crop(obs, pixel, self.crop_size))
        theta = exploration.choose(qvector.values, rng)
        action = GraspAction(pixel=pixel, theta_class=theta)
        if trace:
            return SelectionTrace(qmap=qmap, qvector=qvector, action=action, mask=mask)
        return action


def build_asr_model(config, modality, rng, q1_group=None, q2_group=None, q1_widths=None, q2_widths=None,
                    squash_output=True):
    """q1: UNet trivial -> trivial; q2: residual trunk trivial -> one output per orientation class."""
    q1_group = q1_group or SymmetryGroup.parse(config.q1_group)
    q2_group = q2_group or config.q2_group(modality)
    channels = CHANNELS[modality]
    q1 = UNet(q1_group, channels, q1_widths or config.q1_widths, TRIVIAL, 1, rng,
              kernel_size=config.kernel_size, squash_output=squash_output)
    if q2_group.quotient:
        head_kind, head_copies = QUOTIENT_REGULAR, 1
    else:
        head_kind, head_copies = REGULAR, config.q2_group(modality).class_count
    q2 = ResNet(q2_group, channels, q2_widths or config.q2_widths, head_kind, head_copies, rng,
                kernel_size=config.kernel_size, squash_output=squash_output, input_size=config.crop_size)
    model = ASRModel(q1, q2, config, modality)
    logger.debug("ASR model over %s / %s with %d parameters", q1_group, q2_group, model.parameter_count())
    return model
