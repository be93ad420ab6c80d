"""
Group-equivariant convolutions built by kernel expansion.

A layer owns a free *base* kernel. ``expand_kernel`` maps it linearly onto a
weight-tied full kernel that satisfies ``K(g y) = rho_out(g) K(y) rho_in(g)^-1``
for every group element, and the layer then runs an ordinary ``conv2d``.

The expansion is the orbit construction: output slot ``o`` is reached from slot
0 by a representative ``g_o`` and holds ``R(g_o)`` applied to a slot-0 filter
bank ``B``. ``B`` is tied over the stabiliser ``S`` of slot 0, so the base only
stores one filter per ``S``-orbit of input slots. The whole map is a sparse
matrix, so linearity of the expansion and the transposed backward pass come
for free.
"""
import dataclasses
import functools
import logging
from dataclasses import dataclass

import numpy as np
from scipy import ndimage, sparse

from . import autodiff
from .autodiff import Module, Parameter, Tensor
from .exceptions import InvalidArgumentError, ShapeError, UnsupportedLayerError
from .groups import (
    QUOTIENT_REGULAR, REGULAR, TRIVIAL, Representation, SymmetryGroup, compose, inverse,
    is_exact_element, rep_matrix, transform_fibers, transform_grid,
)

logger = logging.getLogger(__name__)

SUPPORTED_KINDS = (TRIVIAL, REGULAR, QUOTIENT_REGULAR)
INTERPOLATED_TOLERANCE = 5e-2


@dataclass(frozen=True, eq=False)
class FeatureField:
    """A grid of fiber vectors, channels laid out as ``[multiplicity, rep.dim]``."""
    rep: Representation
    multiplicity: int
    grid: Tensor
    fill_value: float = 0.0

    def __post_init__(self):
        channels = self.grid.shape[-3] if self.grid.ndim >= 3 else None
        if channels != self.rep.dim * self.multiplicity:
            raise ShapeError(
                f"Field grid {self.grid.shape} does not carry {self.multiplicity} copies of {self.rep} "
                f"({self.rep.dim * self.multiplicity} channels)"
            )

    def __eq__(self, other):
        if not isinstance(other, FeatureField):
            return NotImplemented
        return (
            self.rep == other.rep
            and self.multiplicity == other.multiplicity
            and self.grid.shape == other.grid.shape
            and bool(np.array_equal(self.grid.data, other.grid.data))
        )

    __hash__ = None


@dataclass(frozen=True)
class EquiLayerSpec:
    group: SymmetryGroup
    rep_in: Representation
    rep_out: Representation
    multiplicity_in: int
    multiplicity_out: int
    kernel_size: int = 3
    stride: int = 1
    padding: int = None

    def __post_init__(self):
        if self.rep_in.group != self.group or self.rep_out.group != self.group:
            raise InvalidArgumentError(
                f"Representations {self.rep_in} and {self.rep_out} must both belong to {self.group}"
            )
        if self.kernel_size < 1 or self.kernel_size % 2 == 0:
            raise InvalidArgumentError(f"Kernel size must be odd, got {self.kernel_size}")
        if self.multiplicity_in < 1 or self.multiplicity_out < 1:
            raise InvalidArgumentError("Multiplicities must be positive")
        if self.padding is None:
            object.__setattr__(self, 'padding', self.kernel_size // 2)

    @property
    def in_channels(self):
        return self.rep_in.dim * self.multiplicity_in

    @property
    def out_channels(self):
        return self.rep_out.dim * self.multiplicity_out

    @property
    def full_shape(self):
        return (self.out_channels, self.in_channels, self.kernel_size, self.kernel_size)

    @property
    def base_shape(self):
        orbits = len(_input_orbits(self.rep_in, self.rep_out))
        return (self.multiplicity_out, self.multiplicity_in * orbits, self.kernel_size, self.kernel_size)


@dataclass(frozen=True)
class ExpandedKernel:
    base: Tensor
    full: Tensor


@functools.lru_cache(maxsize=None)
def spatial_matrix(g, group, size):
    """``size^2 x size^2`` matrix of the spatial part of ``g`` acting on a filter."""
    basis = np.eye(size * size).reshape(size * size, size, size)
    return transform_grid(basis, g, group, fill=0.0).reshape(size * size, size * size).T


@functools.lru_cache(maxsize=None)
def _input_orbits(rep_in, rep_out):
    """Orbits of the out-slot-0 stabiliser on the input slots, as sorted tuples."""
    stabilizer = rep_out.base_point_stabilizer()
    orbits, seen = [], set()
    for slot in range(rep_in.dim):
        if slot in seen:
            continue
        orbit = sorted({int(rep_in.slot_permutation(s)[slot]) for s in stabilizer})
        seen.update(orbit)
        orbits.append(tuple(orbit))
    return tuple(orbits)


def _check_supported(spec):
    for rep in (spec.rep_in, spec.rep_out):
        if rep.kind not in SUPPORTED_KINDS:
            raise UnsupportedLayerError(f"No equivariant convolution for {rep.kind} fields")
    if spec.rep_out.kind == TRIVIAL and spec.kernel_size > 1 and not spec.group.is_exact:
        raise UnsupportedLayerError(
            f"Layers into trivial fields over the interpolated group {spec.group} must use 1x1 kernels"
        )
    for g in spec.rep_out.base_point_stabilizer():
        if spec.kernel_size > 1 and not is_exact_element(g, spec.group):
            raise UnsupportedLayerError(f"Stabiliser element {g} of {spec.rep_out} does not act exactly")


def _slot_blocks(spec):
    """
    Non-zero entries of the single-multiplicity expansion.

    Returns ``(out_slot, in_slot, out_pixel, orbit, base_pixel, value)`` arrays:
    ``K[out_slot, in_slot, out_pixel] += value * base[orbit, base_pixel]``.
    """
    group, size = spec.group, spec.kernel_size
    rep_in, rep_out = spec.rep_in, spec.rep_out
    stabilizer = rep_out.base_point_stabilizer()
    orbits = _input_orbits(rep_in, rep_out)
    orbit_of = {slot: index for index, orbit in enumerate(orbits) for slot in orbit}

    entries = []
    for out_slot in range(rep_out.dim):
        g_o = rep_out.slot_representative(out_slot)
        move_o = spatial_matrix(g_o, group, size)
        back = rep_in.slot_permutation(inverse(g_o, group))
        for in_slot in range(rep_in.dim):
            slot = int(back[in_slot])
            orbit = orbit_of[slot]
            representative = orbits[orbit][0]
            tying = [s for s in stabilizer
                     if rep_in.slot_permutation(inverse(s, group))[slot] == representative]
            for s in tying:
                block = move_o @ spatial_matrix(s, group, size) / len(tying)
                rows, cols = np.nonzero(block)
                count = rows.size
                entries.append((
                    np.full(count, out_slot), np.full(count, in_slot), rows,
                    np.full(count, orbit), cols, block[rows, cols],
                ))
    return tuple(np.concatenate(parts) for parts in zip(*entries))


@functools.lru_cache(maxsize=None)
def expansion_matrix(spec):
    """Sparse map from the flattened base kernel to the flattened full kernel."""
    _check_supported(spec)
    out_slot, in_slot, out_pixel, orbit, base_pixel, value = _slot_blocks(spec)
    d_out, d_in = spec.rep_out.dim, spec.rep_in.dim
    n_orbits = len(_input_orbits(spec.rep_in, spec.rep_out))
    m_out, m_in = spec.multiplicity_out, spec.multiplicity_in
    pixels = spec.kernel_size ** 2

    mo = np.arange(m_out)[:, None, None]
    mi = np.arange(m_in)[None, :, None]
    rows = (((mo * d_out + out_slot) * spec.in_channels) + mi * d_in + in_slot) * pixels + out_pixel
    cols = ((mo * m_in + mi) * n_orbits + orbit) * pixels + base_pixel
    values = np.broadcast_to(value, rows.shape)
    shape = (int(np.prod(spec.full_shape)), int(np.prod(spec.base_shape)))
    matrix = sparse.coo_matrix((values.ravel(), (rows.ravel(), cols.ravel())), shape=shape).tocsr()
    logger.debug("Expansion %s -> %s over %s: %d x %d, %d non-zeros",
                 spec.rep_in, spec.rep_out, spec.group, shape[0], shape[1], matrix.nnz)
    return matrix


def expand_kernel(spec, base):
    """Tie a free base kernel into the full equivariant kernel of ``spec``."""
    base = autodiff.as_tensor(base)
    if tuple(base.shape) != spec.base_shape:
        raise InvalidArgumentError(f"Base kernel shape {base.shape} does not match {spec.base_shape}")
    matrix = expansion_matrix(spec)
    return ExpandedKernel(base=base, full=autodiff.expand_linear(base, matrix, spec.full_shape))


def equi_forward(spec, kernel, F_in):
    if F_in.rep != spec.rep_in or F_in.multiplicity != spec.multiplicity_in:
        raise InvalidArgumentError(
            f"Layer expects {spec.multiplicity_in} x {spec.rep_in}, got {F_in.multiplicity} x {F_in.rep}"
        )
    out = autodiff.conv2d(F_in.grid, kernel.full, stride=spec.stride, padding=spec.padding)
    return FeatureField(spec.rep_out, spec.multiplicity_out, out)


class EquiConv2d(Module):
    """Equivariant convolution with a per-field bias shared across each fiber."""

    def __init__(self, spec, rng, bias=True):
        self.spec = spec
        fan_in = spec.in_channels * spec.kernel_size ** 2
        std = np.sqrt(2.0 / fan_in)
        self.base = Parameter(rng.normal(0.0, std, size=spec.base_shape))
        self.bias = Parameter(np.zeros(spec.multiplicity_out)) if bias else None

    @property
    def in_rep(self):
        return self.spec.rep_in

    @property
    def out_rep(self):
        return self.spec.rep_out

    @property
    def in_multiplicity(self):
        return self.spec.multiplicity_in

    @property
    def out_multiplicity(self):
        return self.spec.multiplicity_out

    def kernel(self):
        return expand_kernel(self.spec, self.base)

    def forward(self, x):
        out = autodiff.conv2d(x, self.kernel().full, stride=self.spec.stride, padding=self.spec.padding)
        if self.bias is not None:
            out = autodiff.add_bias(out, self.bias, repeat=self.spec.rep_out.dim)
        return out

    def forward_field(self, F_in):
        F_out = equi_forward(self.spec, self.kernel(), F_in)
        if self.bias is None:
            return F_out
        grid = autodiff.add_bias(F_out.grid, self.bias, repeat=self.spec.rep_out.dim)
        return dataclasses.replace(F_out, grid=grid)


def check_kernel_constraint(spec, full):
    """
    Largest relative deviation of ``full`` from ``rho_out(g) K(g^-1 y) rho_in(g)^-1 = K(y)``
    over all group elements, evaluated directly on the kernel array.
    """
    full = np.asarray(getattr(full, 'data', full), dtype=np.float64)
    if full.shape != spec.full_shape:
        raise ShapeError(f"Kernel shape {full.shape} does not match {spec.full_shape}")
    m_out, d_out = spec.multiplicity_out, spec.rep_out.dim
    m_in, d_in = spec.multiplicity_in, spec.rep_in.dim
    size = spec.kernel_size
    blocks = full.reshape(m_out, d_out, m_in, d_in, size, size)
    worst = {}
    for g in spec.group.elements:
        rotated = transform_grid(blocks, g, spec.group, fill=0.0)
        expected = np.einsum(
            'ab,MbNcxy,dc->MaNdxy', rep_matrix(spec.rep_out, g), rotated, rep_matrix(spec.rep_in, g),
        )
        worst[g] = autodiff.relative_error(blocks, expected)
    return worst


@dataclass
class EquivarianceReport:
    group: SymmetryGroup
    errors: dict
    tolerances: dict

    @property
    def worst(self):
        return max(self.errors.values()) if self.errors else 0.0

    @property
    def failures(self):
        return [g for g, error in self.errors.items() if error > self.tolerances[g]]

    @property
    def passed(self):
        return not self.failures

    def __str__(self):
        state = 'pass' if self.passed else f"FAIL at {', '.join(str(g) for g in self.failures)}"
        return f"{self.group}: max relative error {self.worst:.3e} ({state})"


def element_tolerance(g, group, dtype=None):
    if not is_exact_element(g, group):
        return INTERPOLATED_TOLERANCE
    dtype = dtype or autodiff.default_dtype()
    return 1e-5 if np.dtype(dtype) == np.float64 else 1e-4


def random_input(rng, channels, size, smooth=False, batch=1):
    """Random test input; smooth inputs are blurred and windowed to the inscribed disk."""
    data = rng.normal(size=(batch, channels, size, size))
    if smooth:
        data = ndimage.gaussian_filter(data, sigma=(0, 0, 1.5, 1.5))
        centre = (size - 1) / 2.0
        rows, cols = np.mgrid[:size, :size]
        radius = np.hypot(rows - centre, cols - centre) / (size / 2.0)
        data = data * np.clip(1.5 - 2.0 * radius, 0.0, 1.0)
    return data


def _interior(shape):
    size = shape[-1]
    centre = (size - 1) / 2.0
    rows, cols = np.mgrid[:shape[-2], :shape[-1]]
    return np.hypot(rows - centre, cols - centre) <= 0.3 * size


def check_equivariance(network, group, trials=3, tolerance=None, rng=None, input_size=None):
    """
    Compare ``network(g x)`` with ``g network(x)`` for every element of ``group``.

    ``network`` declares ``in_rep``, ``out_rep``, ``in_multiplicity`` and
    ``out_multiplicity`` and maps ``[n, c, h, w]`` tensors to either spatial
    fields or ``[n, c]`` fiber vectors. Interpolated elements use smooth inputs
    and compare interior pixels only.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    size = input_size or getattr(network, 'input_size', 16)
    channels = network.in_rep.dim * network.in_multiplicity
    errors, tolerances = {}, {}
    with autodiff.no_grad():
        for g in group.elements:
            exact = is_exact_element(g, group)
            worst = 0.0
            for _ in range(trials):
                x = random_input(rng, channels, size, smooth=not group.is_exact)
                gx = transform_fibers(transform_grid(x, g, group), g, network.in_rep, network.in_multiplicity)
                out = network(Tensor(x)).data
                out_gx = network(Tensor(gx)).data
                if out.ndim == 2:
                    expected = transform_fibers(
                        out[:, :, None, None], g, network.out_rep, network.out_multiplicity,
                    )[:, :, 0, 0]
                    actual = out_gx
                else:
                    expected = transform_fibers(
                        transform_grid(out, g, group), g, network.out_rep, network.out_multiplicity,
                    )
                    actual = out_gx
                    if not exact:
                        mask = _interior(out.shape)
                        expected, actual = expected[..., mask], actual[..., mask]
                worst = max(worst, autodiff.relative_error(actual, expected))
            errors[g] = worst
            tolerances[g] = tolerance if tolerance is not None else element_tolerance(g, group)
    report = EquivarianceReport(group=group, errors=errors, tolerances=tolerances)
    logger.debug("Equivariance check %s", report)
    return report
