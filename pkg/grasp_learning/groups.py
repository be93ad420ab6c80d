"""
Finite planar symmetry groups and their representations.

Elements are encoded as ``(k, f)`` meaning ``F^f R^k``: rotate by ``2*pi*k/n``
counter-clockwise, then reflect across the image vertical axis when ``f == 1``.
With that encoding the composition law is

    (k1, f1) . (k2, f2) = ((-1)**f2 * k1 + k2 mod n, f1 xor f2)

Spatial conventions: arrays are indexed ``[..., row, col]``; the plane has its
origin at the grid centre, x to the right and y up, so a positive rotation is
counter-clockwise on screen (``np.rot90`` with default axes).
"""
import dataclasses
import logging
import math
from dataclasses import dataclass
from functools import cached_property

import numpy as np
from scipy import ndimage

from .exceptions import InvalidArgumentError

logger = logging.getLogger(__name__)

CYCLIC = 'cyclic'
DIHEDRAL = 'dihedral'
GROUP_KINDS = (CYCLIC, DIHEDRAL)

TRIVIAL = 'trivial'
STANDARD = 'standard'
REGULAR = 'regular'
QUOTIENT_REGULAR = 'quotient-regular'
REPRESENTATION_KINDS = (TRIVIAL, STANDARD, REGULAR, QUOTIENT_REGULAR)


@dataclass(frozen=True)
class GroupElement:
    k: int = 0
    f: int = 0

    def __str__(self):
        return f"(k={self.k}, f={self.f})"


@dataclass(frozen=True)
class SymmetryGroup:
    """C_n or D_n, optionally paired with the mod-pi quotient of the action space."""
    kind: str
    n: int
    quotient: bool = False

    def __post_init__(self):
        if self.kind not in GROUP_KINDS:
            raise InvalidArgumentError(f"Unknown group kind {self.kind!r}. Choose from: {GROUP_KINDS}")
        if int(self.n) != self.n or self.n < 1:
            raise InvalidArgumentError(f"Rotation count must be a positive integer, got {self.n}")
        if self.quotient and self.n % 2:
            raise InvalidArgumentError(f"The mod-pi quotient needs an even rotation count, got n={self.n}")

    @classmethod
    def parse(cls, name):
        """Build a group from names such as ``C4``, ``D4``, ``C16/C2`` or ``D16/D2``."""
        text = name.strip().upper()
        base, _, quotient = text.partition('/')
        if not base or base[0] not in 'CD' or not base[1:].isdigit():
            raise InvalidArgumentError(f"Cannot parse group name {name!r}")
        kind = CYCLIC if base[0] == 'C' else DIHEDRAL
        if quotient and quotient != f"{base[0]}2":
            raise InvalidArgumentError(f"Only the {base[0]}2 quotient is supported, got {name!r}")
        return cls(kind=kind, n=int(base[1:]), quotient=bool(quotient))

    @property
    def name(self):
        letter = 'C' if self.kind == CYCLIC else 'D'
        return f"{letter}{self.n}/{letter}2" if self.quotient else f"{letter}{self.n}"

    @property
    def order(self):
        return self.n if self.kind == CYCLIC else 2 * self.n

    @property
    def class_count(self):
        """Number of orientation classes of the quotient action space."""
        if not self.quotient:
            raise InvalidArgumentError(f"{self.name} has no mod-pi quotient")
        return self.n // 2

    @property
    def is_exact(self):
        """True when every rotation of the group maps the pixel lattice onto itself."""
        return 4 % self.n == 0

    @property
    def identity(self):
        return GroupElement(0, 0)

    @cached_property
    def elements(self):
        """All elements in regular-representation slot order (index = f * n + k)."""
        flips = (0,) if self.kind == CYCLIC else (0, 1)
        return tuple(GroupElement(k, f) for f in flips for k in range(self.n))

    def index(self, g):
        self.validate(g)
        return g.f * self.n + g.k

    def validate(self, g):
        if not isinstance(g, GroupElement):
            raise InvalidArgumentError(f"Expected a GroupElement, got {type(g).__name__}")
        if not 0 <= g.k < self.n or g.f not in (0, 1) or (self.kind == CYCLIC and g.f):
            raise InvalidArgumentError(f"Element {g} does not belong to {self.name}")

    def without_quotient(self):
        return dataclasses.replace(self, quotient=False)

    def __str__(self):
        return self.name


def compose(g, h, G):
    """Group product ``g . h`` (apply ``h`` first, then ``g``)."""
    G.validate(g)
    G.validate(h)
    sign = -1 if h.f else 1
    return GroupElement((sign * g.k + h.k) % G.n, g.f ^ h.f)


def inverse(g, G):
    G.validate(g)
    if g.f:
        # F R^k is an involution
        return g
    return GroupElement((-g.k) % G.n, 0)


def rotation_angle(g, G):
    return 2.0 * math.pi * g.k / G.n


def is_exact_element(g, G):
    """True when ``g`` permutes pixels exactly (rotation by a multiple of 90 degrees)."""
    return (4 * g.k) % G.n == 0


def plane_matrix(g, G):
    """The standard representation: ``F^f R(theta)`` acting on (x, y) plane coordinates."""
    G.validate(g)
    if is_exact_element(g, G):
        quarter = (4 * g.k) // G.n
        c, s = ((1, 0), (0, 1), (-1, 0), (0, -1))[quarter]
    else:
        angle = rotation_angle(g, G)
        c, s = math.cos(angle), math.sin(angle)
    rotation = np.array([[c, -s], [s, c]], dtype=float)
    if g.f:
        return np.diag([-1.0, 1.0]) @ rotation
    return rotation


def quotient_class(G, g):
    """Orientation class of ``g`` in the mod-pi action space (coset of C2 / D2)."""
    if not G.quotient:
        raise InvalidArgumentError(f"{G.name} carries no mod-pi quotient flag")
    G.validate(g)
    return g.k % G.class_count


def quotient_action(G, g, class_index):
    """Action on orientation classes (grasp axes modulo pi): rotate adds k, reflect negates."""
    G.validate(g)
    count = G.class_count
    sign = -1 if g.f else 1
    return (sign * (class_index + g.k)) % count


@dataclass(frozen=True)
class Representation:
    kind: str
    group: SymmetryGroup

    def __post_init__(self):
        if self.kind not in REPRESENTATION_KINDS:
            raise InvalidArgumentError(f"Unknown representation {self.kind!r}. Choose from: {REPRESENTATION_KINDS}")
        if self.kind == QUOTIENT_REGULAR and not self.group.quotient:
            raise InvalidArgumentError(f"quotient-regular representation needs a quotient group, got {self.group}")

    @property
    def dim(self):
        return {
            TRIVIAL: 1,
            STANDARD: 2,
            REGULAR: self.group.order,
            QUOTIENT_REGULAR: self.group.n // 2 if self.group.quotient else 0,
        }[self.kind]

    @property
    def is_permutation(self):
        return self.kind != STANDARD

    def slot_permutation(self, g):
        """``perm[i] = g . i`` for the permutation representations."""
        G = self.group
        G.validate(g)
        if self.kind == TRIVIAL:
            return np.zeros(1, dtype=int)
        if self.kind == REGULAR:
            return np.array([G.index(compose(g, h, G)) for h in G.elements], dtype=int)
        if self.kind == QUOTIENT_REGULAR:
            return np.array([quotient_action(G, g, c) for c in range(self.dim)], dtype=int)
        raise InvalidArgumentError("The standard representation is not a permutation representation")

    def base_point_stabilizer(self):
        """Elements fixing slot 0 (all of G for trivial, identity for regular, C2/D2 for quotient)."""
        if not self.is_permutation:
            raise InvalidArgumentError("Stabilizers are only defined for permutation representations")
        return tuple(g for g in self.group.elements if self.slot_permutation(g)[0] == 0)

    def slot_representative(self, slot):
        """An element carrying slot 0 onto ``slot``."""
        for g in self.group.elements:
            if self.slot_permutation(g)[0] == slot:
                return g
        raise InvalidArgumentError(f"Slot {slot} is not reachable in {self}")

    def __str__(self):
        return f"{self.kind}[{self.group}]"


def rep_matrix(rep, g):
    """Matrix of ``g`` in ``rep``; permutation representations satisfy ``(P x)_{g.i} = x_i``."""
    if rep.kind == STANDARD:
        return plane_matrix(g, rep.group)
    perm = rep.slot_permutation(g)
    matrix = np.zeros((rep.dim, rep.dim), dtype=float)
    matrix[perm, np.arange(rep.dim)] = 1.0
    return matrix


def _grid_center(shape):
    height, width = shape
    return (height - 1) / 2.0, (width - 1) / 2.0


def transform_grid(array, g, G, fill=0.0):
    """
    Spatial part of the field action: ``out(p) = in(g^-1 p)`` over the last two axes.

    Rotations by multiples of 90 degrees and reflections are exact pixel permutations;
    other angles are bilinearly resampled and pixels whose source falls outside the
    grid take ``fill``.
    """
    G.validate(g)
    array = np.asarray(array)
    height, width = array.shape[-2:]
    exact = is_exact_element(g, G)
    quarter = (4 * g.k) // G.n if exact else None
    if height != width and not (exact and quarter % 2 == 0):
        raise InvalidArgumentError(
            f"Rotating a non-square {height}x{width} grid by {math.degrees(rotation_angle(g, G)):.1f} degrees"
        )
    if exact:
        out = np.rot90(array, quarter, axes=(-2, -1))
        if g.f:
            out = np.flip(out, axis=-1)
        return np.ascontiguousarray(out)

    coords = source_coordinates(g, G, (height, width))
    flat = array.reshape((-1, height, width))
    out = np.empty_like(flat)
    for index, plane in enumerate(flat):
        out[index] = ndimage.map_coordinates(plane, coords, order=1, mode='constant', cval=fill)
    return out.reshape(array.shape)


def source_coordinates(g, G, shape):
    """Array coordinates ``g^-1 p`` sampled by every output pixel ``p`` (shape ``[2, h, w]``)."""
    cy, cx = _grid_center(shape)
    rows, cols = np.meshgrid(np.arange(shape[0]), np.arange(shape[1]), indexing='ij')
    x = cols - cx
    y = cy - rows
    inverse_matrix = plane_matrix(g, G).T
    qx = inverse_matrix[0, 0] * x + inverse_matrix[0, 1] * y
    qy = inverse_matrix[1, 0] * x + inverse_matrix[1, 1] * y
    return np.stack([cy - qy, qx + cx])


def translate_grid(array, shift, fill=0.0):
    """Integer translation ``out[r, c] = in[r - dr, c - dc]`` with ``fill`` entering at the border."""
    dr, dc = (int(v) for v in shift)
    array = np.asarray(array)
    out = np.full_like(array, fill)
    height, width = array.shape[-2:]
    if abs(dr) >= height or abs(dc) >= width:
        return out
    src_rows = slice(max(0, -dr), height - max(0, dr))
    dst_rows = slice(max(0, dr), height - max(0, -dr))
    src_cols = slice(max(0, -dc), width - max(0, dc))
    dst_cols = slice(max(0, dc), width - max(0, -dc))
    out[..., dst_rows, dst_cols] = array[..., src_rows, src_cols]
    return out


def transform_fibers(array, g, rep, multiplicity):
    """Fiber part of the field action on the channel axis (``-3``), laid out as ``[mult, dim]``."""
    array = np.asarray(array)
    *lead, channels, height, width = array.shape
    if channels != rep.dim * multiplicity:
        raise InvalidArgumentError(
            f"Field has {channels} channels, expected {rep.dim} x {multiplicity} for {rep}"
        )
    blocks = array.reshape(*lead, multiplicity, rep.dim, height, width)
    if rep.is_permutation:
        out = np.empty_like(blocks)
        out[..., rep.slot_permutation(g), :, :] = blocks
    else:
        out = np.einsum('ij,...jhw->...ihw', rep_matrix(rep, g), blocks)
    return out.reshape(array.shape)


def act_on_field(g, F, rep, fill=None):
    """
    ``(gF)(x) = rho(g) F(rho1(g)^-1 x)`` for a FeatureField (or anything exposing
    ``grid``, ``multiplicity`` and ``fill_value``); returns a field of the same type.
    """
    values = getattr(F.grid, 'data', F.grid)
    fill_value = F.fill_value if fill is None else fill
    moved = transform_fibers(transform_grid(values, g, rep.group, fill=fill_value), g, rep, F.multiplicity)
    grid = type(F.grid)(moved) if hasattr(F.grid, 'data') else moved
    return dataclasses.replace(F, grid=grid)


def transform_pixel(g, G, pixel, shape, shift=(0, 0)):
    """
    Move a pixel index by ``g`` about the grid centre, then translate by ``shift``.

    Matches ``transform_grid`` followed by ``translate_grid``: a value sitting at
    ``pixel`` before the transform sits at the returned index afterwards.
    """
    cy, cx = _grid_center(shape)
    row, col = pixel
    point = np.array([col - cx, cy - row], dtype=float)
    moved = plane_matrix(g, G) @ point
    new_row = cy - moved[1] + shift[0]
    new_col = moved[0] + cx + shift[1]
    return int(np.floor(new_row + 0.5)), int(np.floor(new_col + 0.5))
