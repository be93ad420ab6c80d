"""
Network architectures assembled from equivariant convolutions.

Every network is written once against a symmetry group. Passing the trivial
group ``C1`` turns each layer into an ordinary convolution (the regular
representation of ``C1`` is one-dimensional), which is how the non-equivariant
baselines are built.
"""
import logging

import numpy as np

from . import autodiff
from .autodiff import Module
from .equivariant import EquiConv2d, EquiLayerSpec
from .exceptions import InvalidArgumentError, ShapeError
from .groups import CYCLIC, QUOTIENT_REGULAR, REGULAR, TRIVIAL, Representation, SymmetryGroup

logger = logging.getLogger(__name__)

PLAIN = SymmetryGroup(CYCLIC, 1)


def field_conv(group, rep_in, m_in, rep_out, m_out, rng, kernel_size=3, bias=True):
    spec = EquiLayerSpec(
        group=group,
        rep_in=Representation(rep_in, group),
        rep_out=Representation(rep_out, group),
        multiplicity_in=m_in,
        multiplicity_out=m_out,
        kernel_size=kernel_size,
    )
    return EquiConv2d(spec, rng, bias=bias)


class ConvBlock(Module):
    """Two 3x3 convolutions with ReLU, ending in regular fields."""

    def __init__(self, group, rep_in, m_in, m_out, rng, kernel_size=3):
        self.first = field_conv(group, rep_in, m_in, REGULAR, m_out, rng, kernel_size)
        self.second = field_conv(group, REGULAR, m_out, REGULAR, m_out, rng, kernel_size)

    def forward(self, x):
        return autodiff.relu(self.second(autodiff.relu(self.first(x))))


class FieldNetwork(Module):
    """Shared bookkeeping: declared field types and the output squash."""

    def __init__(self, group, in_channels, out_kind, out_multiplicity, squash_output, input_size):
        self.group = group
        self.in_rep = Representation(TRIVIAL, group)
        self.in_multiplicity = in_channels
        self.out_rep = Representation(out_kind, group)
        self.out_multiplicity = out_multiplicity
        self.squash_output = squash_output
        self.input_size = input_size

    @property
    def out_channels(self):
        return self.out_rep.dim * self.out_multiplicity

    def _check_input(self, x):
        if x.ndim != 4 or x.shape[1] != self.in_multiplicity:
            raise ShapeError(f"{type(self).__name__} expects [n, {self.in_multiplicity}, h, w] input, got {x.shape}")

    def _finish(self, x):
        return autodiff.squash(x) if self.squash_output else x


class UNet(FieldNetwork):
    """
    Fully convolutional encoder/decoder with skip connections.

    ``widths`` gives the regular-field multiplicity per resolution level; the
    spatial size must be divisible by ``2 ** (len(widths) - 1)``.
    """

    def __init__(self, group, in_channels, widths, out_kind, out_multiplicity, rng,
                 kernel_size=3, squash_output=True):
        super().__init__(group, in_channels, out_kind, out_multiplicity, squash_output,
                         input_size=2 ** (len(widths) - 1) * 2)
        if len(widths) < 2:
            raise InvalidArgumentError("A UNet needs at least two resolution levels")
        self.widths = tuple(widths)
        self.down = [ConvBlock(group, TRIVIAL, in_channels, widths[0], rng, kernel_size)]
        for previous, width in zip(widths[:-1], widths[1:]):
            self.down.append(ConvBlock(group, REGULAR, previous, width, rng, kernel_size))
        self.up = [
            ConvBlock(group, REGULAR, widths[level + 1] + widths[level], widths[level], rng, kernel_size)
            for level in reversed(range(len(widths) - 1))
        ]
        self.head = field_conv(group, REGULAR, widths[0], out_kind, out_multiplicity, rng, kernel_size=1)

    def forward(self, x):
        x = autodiff.as_tensor(x)
        self._check_input(x)
        factor = 2 ** (len(self.widths) - 1)
        if x.shape[-1] % factor or x.shape[-2] % factor:
            raise ShapeError(f"UNet input {x.shape[-2:]} is not divisible by {factor}")
        skips = []
        for level, block in enumerate(self.down):
            if level:
                x = autodiff.max_pool2x2(x)
            x = block(x)
            skips.append(x)
        skips.pop()
        for block in self.up:
            x = block(autodiff.concat([autodiff.upsample2x(x), skips.pop()], axis=1))
        return self._finish(self.head(x))


class ResidualBlock(Module):
    def __init__(self, group, m_in, m_out, rng, kernel_size=3):
        self.first = field_conv(group, REGULAR, m_in, REGULAR, m_out, rng, kernel_size)
        self.second = field_conv(group, REGULAR, m_out, REGULAR, m_out, rng, kernel_size)
        self.shortcut = None
        if m_in != m_out:
            self.shortcut = field_conv(group, REGULAR, m_in, REGULAR, m_out, rng, kernel_size=1, bias=False)

    def forward(self, x):
        skip = x if self.shortcut is None else self.shortcut(x)
        out = self.second(autodiff.relu(self.first(x)))
        return autodiff.relu(autodiff.add(out, skip))


class ResNet(FieldNetwork):
    """
    Residual trunk for crops: stem, residual blocks separated by 2x2 max-pools,
    global average over space and a 1x1 head. Returns ``[n, out_channels]``.
    """

    def __init__(self, group, in_channels, widths, out_kind, out_multiplicity, rng,
                 kernel_size=3, squash_output=True, input_size=32):
        super().__init__(group, in_channels, out_kind, out_multiplicity, squash_output, input_size)
        self.widths = tuple(widths)
        self.stem = field_conv(group, TRIVIAL, in_channels, REGULAR, widths[0], rng, kernel_size)
        self.blocks = [ResidualBlock(group, widths[0], widths[0], rng, kernel_size)]
        for previous, width in zip(widths[:-1], widths[1:]):
            self.blocks.append(ResidualBlock(group, previous, width, rng, kernel_size))
        self.head = field_conv(group, REGULAR, widths[-1], out_kind, out_multiplicity, rng, kernel_size=1)

    def forward(self, x):
        x = autodiff.as_tensor(x)
        self._check_input(x)
        factor = 2 ** len(self.widths)
        if x.shape[-1] % factor or x.shape[-2] % factor:
            raise ShapeError(f"ResNet input {x.shape[-2:]} is not divisible by {factor}")
        x = autodiff.max_pool2x2(autodiff.relu(self.stem(x)))
        for index, block in enumerate(self.blocks):
            x = block(x)
            if index < len(self.blocks) - 1:
                x = autodiff.max_pool2x2(x)
        pooled = autodiff.mean(x, axis=(2, 3))
        n, channels = pooled.shape
        out = self.head(autodiff.reshape(pooled, (n, channels, 1, 1)))
        return self._finish(autodiff.reshape(out, (n, self.out_channels)))


class FullyConvNet(FieldNetwork):
    """Plain encoder/decoder without skip connections (pixel-wise Q baselines)."""

    def __init__(self, in_channels, widths, out_channels, rng, kernel_size=3, squash_output=True, group=PLAIN):
        super().__init__(group, in_channels, REGULAR, out_channels, squash_output, input_size=16)
        self.widths = tuple(widths)
        self.encoder = [field_conv(group, TRIVIAL, in_channels, REGULAR, widths[0], rng, kernel_size)]
        for previous, width in zip(widths[:-1], widths[1:]):
            self.encoder.append(field_conv(group, REGULAR, previous, REGULAR, width, rng, kernel_size))
        self.decoder = [
            field_conv(group, REGULAR, widths[level + 1], REGULAR, widths[level], rng, kernel_size)
            for level in reversed(range(len(widths) - 1))
        ]
        self.head = field_conv(group, REGULAR, widths[0], REGULAR, out_channels, rng, kernel_size=1)

    def forward(self, x):
        x = autodiff.as_tensor(x)
        self._check_input(x)
        for level, conv in enumerate(self.encoder):
            if level:
                x = autodiff.max_pool2x2(x)
            x = autodiff.relu(conv(x))
        for conv in self.decoder:
            x = autodiff.relu(conv(autodiff.upsample2x(x)))
        return self._finish(self.head(x))


def scaled_widths(widths, factor):
    return tuple(max(1, int(round(w * factor))) for w in widths)


def match_parameter_count(build, widths, target, tolerance=0.1):
    """
    Find a width scaling whose network has about ``target`` free parameters.

    ``build(widths)`` constructs a candidate. The closest candidate over a
    geometric grid of scale factors is returned; a warning is logged when it
    misses ``tolerance``.
    """
    best, best_gap = None, None
    for factor in np.geomspace(0.25, 8.0, 41):
        candidate = build(scaled_widths(widths, factor))
        gap = abs(candidate.parameter_count() - target) / target
        if best_gap is None or gap < best_gap:
            best, best_gap = candidate, gap
    if best_gap > tolerance:
        logger.warning("Closest parameter match is %.1f%% away from %d", 100 * best_gap, target)
    return best


def quotient_head_kind(group):
    return QUOTIENT_REGULAR if group.quotient else REGULAR
