"""
Deterministic planar grasping world.

Objects are extruded primitives (disk, rectangle, capsule) lying in a square
tray seen from above. Rendering is an orthographic heightmap or a top-colour
image; grasp success is decided geometrically by the jaw footprints and the
width of the object crossed by the closing axis.

World frame: origin at the tray centre, x to the right, y up; pixel ``(r, c)``
has its centre at ``((c - (N-1)/2) * res, ((N-1)/2 - r) * res)``. Object
orientation is stored as a unit heading vector so quarter-turn world
transforms are exact.
"""
import dataclasses
import logging
import math
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from shapely.geometry import LineString, Point, Polygon, box

from .asr import COLOR, DEPTH, MODALITIES, GraspAction, Observation
from .conf import merge, section
from .exceptions import InvalidActionError, InvalidArgumentError, SceneTooCrowdedError

logger = logging.getLogger(__name__)

DISK = 'disk'
RECTANGLE = 'rectangle'
CAPSULE = 'capsule'
SHAPES = (DISK, RECTANGLE, CAPSULE)

OBJECT_MEAN_COLOR = 0.8
TRAY_PRESETS = {
    'black': (0.0, 0.0, 0.0),
    'white': (1.0, 1.0, 1.0),
    'mean-0.8': (0.0, 0.0, 0.0),
    'mean-0.4': (0.4, 0.4, 0.4),
    'mean': (0.8, 0.8, 0.8),
    'mean+0.2': (1.0, 1.0, 1.0),
}

DIMENSION_RANGES = {
    DISK: {'radius': (0.012, 0.035)},
    RECTANGLE: {'length': (0.04, 0.12), 'width': (0.015, 0.05)},
    CAPSULE: {'length': (0.03, 0.08), 'radius': (0.01, 0.025)},
}
HEIGHT_RANGE = (0.02, 0.08)
COLOR_RANGE = (0.6, 1.0)
SELECT_Z_WINDOW = 5
QUAD_SEGMENTS = 16


@dataclass(frozen=True)
class GripperSpec:
    aperture: float = 0.085
    jaw_length: float = 0.02
    jaw_width: float = 0.01
    min_width: float = 0.005

    def __post_init__(self):
        if not 0 < self.min_width < self.aperture:
            raise InvalidArgumentError(
                f"Minimum graspable width {self.min_width} must lie in (0, aperture={self.aperture})"
            )
        if self.jaw_length <= 0 or self.jaw_width <= 0:
            raise InvalidArgumentError("Jaw footprint must have positive size")

    def aperture_pixels(self, resolution):
        return self.aperture / resolution


@dataclass(frozen=True)
class SimulatorConfig:
    image_size: int = 96
    tray_size: float = 0.3
    wall_margin: float = 0.015
    n_objects: int = 15
    modality: str = DEPTH
    tray_color: tuple = (0.0, 0.0, 0.0)
    mask_threshold: float = 0.005
    dilation_radius: int = 4
    descent_offset: float = 0.01
    overlap_threshold: float = 0.1
    max_attempts: int = 30
    max_rejections: int = 1000
    collision_penalty: bool = False
    collision_margin: float = 0.004
    transparent_probability: float = 0.0
    success_degradation: float = 0.0
    gripper: GripperSpec = field(default_factory=GripperSpec)

    def __post_init__(self):
        if self.modality not in MODALITIES:
            raise InvalidArgumentError(f"Invalid modality {self.modality!r}. Choose from: {MODALITIES}")
        object.__setattr__(self, 'tray_color', resolve_tray_color(self.tray_color))
        if isinstance(self.gripper, dict):
            object.__setattr__(self, 'gripper', GripperSpec(**self.gripper))

    @classmethod
    def from_settings(cls, preset='default', **overrides):
        values = merge(section('SIMULATOR', preset), overrides)
        return cls(**values)

    @property
    def resolution(self):
        return self.tray_size / self.image_size

    @property
    def interior_half_width(self):
        return self.tray_size / 2 - self.wall_margin


def resolve_tray_color(value):
    if isinstance(value, str):
        if value not in TRAY_PRESETS:
            raise InvalidArgumentError(f"Unknown tray color {value!r}. Choose from: {', '.join(TRAY_PRESETS)}")
        return TRAY_PRESETS[value]
    color = tuple(float(v) for v in value)
    if len(color) != 3 or not all(0.0 <= v <= 1.0 for v in color):
        raise InvalidArgumentError(f"Tray color must be three values in [0, 1], got {value!r}")
    return color


@dataclass(frozen=True)
class SceneObject:
    shape: str
    dims: tuple
    position: tuple
    heading: tuple
    height: float
    color: tuple = (OBJECT_MEAN_COLOR,) * 3
    transparent: bool = False

    def __post_init__(self):
        if self.shape not in SHAPES:
            raise InvalidArgumentError(f"Unknown shape {self.shape!r}. Choose from: {SHAPES}")
        expected = len(DIMENSION_RANGES[self.shape])
        if len(self.dims) != expected or any(d <= 0 for d in self.dims):
            raise InvalidArgumentError(f"{self.shape} needs {expected} positive dimensions, got {self.dims}")
        if self.height <= 0:
            raise InvalidArgumentError(f"Object height must be positive, got {self.height}")
        norm = math.hypot(*self.heading)
        if abs(norm - 1.0) > 1e-9:
            raise InvalidArgumentError(f"Heading {self.heading} is not a unit vector")

    def local_coordinates(self, xs, ys):
        """Coordinates of world points along (u) and across (v) the object heading."""
        dx = xs - self.position[0]
        dy = ys - self.position[1]
        hc, hs = self.heading
        return dx * hc + dy * hs, -dx * hs + dy * hc

    def covers(self, xs, ys):
        """Vectorised point membership of the footprint."""
        u, v = self.local_coordinates(xs, ys)
        if self.shape == DISK:
            (radius,) = self.dims
            return u * u + v * v <= radius * radius
        if self.shape == RECTANGLE:
            length, width = self.dims
            return (np.abs(u) <= length / 2) & (np.abs(v) <= width / 2)
        length, radius = self.dims
        along = u - np.clip(u, -length / 2, length / 2)
        return along * along + v * v <= radius * radius

    def footprint(self, origin=(0.0, 0.0), axis=(1.0, 0.0)):
        """
        Shapely footprint expressed in the frame whose x axis is ``axis`` and whose
        origin is ``origin`` (the world frame by default).
        """
        ax, ay = axis
        dx = self.position[0] - origin[0]
        dy = self.position[1] - origin[1]
        cx, cy = dx * ax + dy * ay, -dx * ay + dy * ax
        hx, hy = self.heading[0] * ax + self.heading[1] * ay, -self.heading[0] * ay + self.heading[1] * ax
        if self.shape == DISK:
            return Point(cx, cy).buffer(self.dims[0], quad_segs=QUAD_SEGMENTS)
        if self.shape == RECTANGLE:
            half_l, half_w = self.dims[0] / 2, self.dims[1] / 2
            corners = [
                (cx + su * half_l * hx - sv * half_w * hy, cy + su * half_l * hy + sv * half_w * hx)
                for su, sv in ((1, 1), (-1, 1), (-1, -1), (1, -1))
            ]
            return Polygon(corners)
        half_l, radius = self.dims[0] / 2, self.dims[1]
        spine = LineString([(cx - half_l * hx, cy - half_l * hy), (cx + half_l * hx, cy + half_l * hy)])
        return spine.buffer(radius, quad_segs=QUAD_SEGMENTS)

    @property
    def area(self):
        if self.shape == DISK:
            return math.pi * self.dims[0] ** 2
        if self.shape == RECTANGLE:
            return self.dims[0] * self.dims[1]
        return self.dims[0] * 2 * self.dims[1] + math.pi * self.dims[1] ** 2


def _quarter_turn(x, y, quarters):
    return ((x, y), (-y, x), (-x, -y), (y, -x))[quarters % 4]


@dataclass(frozen=True)
class Scene:
    objects: tuple = ()
    tray_size: float = 0.3
    wall_margin: float = 0.015
    tray_color: tuple = (0.0, 0.0, 0.0)
    attempts_made: int = 0
    seed: int = 0

    def transformed(self, quarters, shift=(0.0, 0.0)):
        """Rotate every object by ``quarters`` counter-clockwise quarter turns about the tray centre, then shift."""
        moved = []
        for obj in self.objects:
            x, y = _quarter_turn(*obj.position, quarters)
            moved.append(dataclasses.replace(
                obj,
                position=(x + shift[0], y + shift[1]),
                heading=_quarter_turn(*obj.heading, quarters),
            ))
        return dataclasses.replace(self, objects=tuple(moved))

    def without(self, index):
        return dataclasses.replace(self, objects=self.objects[:index] + self.objects[index + 1:])


@dataclass(frozen=True)
class OracleResult:
    success: bool
    collision: bool
    target: int = None
    width: float = None


@dataclass(frozen=True)
class StepResult:
    reward: float
    scene: Scene
    done: bool
    success: bool
    collision: bool
    z: float


def pixel_coordinates(size, resolution):
    centres = (np.arange(size) - (size - 1) / 2.0) * resolution
    return centres[None, :], -centres[:, None]


def pixel_to_world(pixel, config):
    size = config.image_size
    row, col = pixel
    if not (0 <= row < size and 0 <= col < size):
        raise InvalidActionError(f"Pixel {pixel} is outside the {size}x{size} image")
    res = config.resolution
    return (col - (size - 1) / 2.0) * res, ((size - 1) / 2.0 - row) * res


def world_to_pixel(point, config):
    size, res = config.image_size, config.resolution
    col = point[0] / res + (size - 1) / 2.0
    row = (size - 1) / 2.0 - point[1] / res
    return int(np.floor(row + 0.5)), int(np.floor(col + 0.5))


def theta_of_class(theta_class, n_theta):
    """Angle between the gripper closing normal and the x axis."""
    return math.pi * theta_class / n_theta


def normal_of_class(theta_class, n_theta):
    theta = theta_of_class(theta_class, n_theta)
    return math.cos(theta), math.sin(theta)


def _placement_ok(candidate, placed, config):
    limit = config.interior_half_width
    shape = candidate.footprint()
    min_x, min_y, max_x, max_y = shape.bounds
    if min_x < -limit or min_y < -limit or max_x > limit or max_y > limit:
        return False
    for other in placed:
        other_shape = other.footprint()
        if not shape.intersects(other_shape):
            continue
        overlap = shape.intersection(other_shape).area
        if overlap >= config.overlap_threshold * min(shape.area, other_shape.area):
            return False
    return True


def _random_object(rng, config):
    shape = SHAPES[int(rng.integers(len(SHAPES)))]
    dims = tuple(float(rng.uniform(*bounds)) for bounds in DIMENSION_RANGES[shape].values())
    angle = rng.uniform(0.0, 2 * math.pi)
    limit = config.interior_half_width
    return SceneObject(
        shape=shape,
        dims=dims,
        position=(float(rng.uniform(-limit, limit)), float(rng.uniform(-limit, limit))),
        heading=(math.cos(angle), math.sin(angle)),
        height=float(rng.uniform(*HEIGHT_RANGE)),
        color=tuple(float(v) for v in rng.uniform(*COLOR_RANGE, size=3)),
        transparent=bool(rng.random() < config.transparent_probability),
    )


def reset_scene(seed, n_objects=None, config=None):
    """Place ``n_objects`` random primitives by rejection sampling; deterministic per seed."""
    config = config or SimulatorConfig()
    n_objects = config.n_objects if n_objects is None else n_objects
    rng = np.random.default_rng(seed)
    placed = []
    for index in range(n_objects):
        for _ in range(config.max_rejections):
            candidate = _random_object(rng, config)
            if _placement_ok(candidate, placed, config):
                placed.append(candidate)
                break
        else:
            raise SceneTooCrowdedError(
                f"Could not place object {index + 1} of {n_objects} after {config.max_rejections} attempts"
            )
    logger.debug("Scene %s: %d objects", seed, len(placed))
    return Scene(
        objects=tuple(placed),
        tray_size=config.tray_size,
        wall_margin=config.wall_margin,
        tray_color=config.tray_color,
        seed=int(seed),
    )


def _heightmap(scene, config, skip_transparent):
    xs, ys = pixel_coordinates(config.image_size, config.resolution)
    heights = np.zeros((config.image_size, config.image_size))
    top = np.full(heights.shape, -1, dtype=int)
    for index, obj in enumerate(scene.objects):
        if skip_transparent and obj.transparent:
            continue
        covered = obj.covers(xs, ys) & (obj.height >= heights)
        heights = np.where(covered, obj.height, heights)
        top = np.where(covered, index, top)
    return heights, top


def render_depth(scene, config=None):
    """Orthographic heightmap; objects flagged transparent leave no depth reading."""
    config = config or SimulatorConfig()
    heights, _ = _heightmap(scene, config, skip_transparent=True)
    return Observation(heights[None], modality=DEPTH, background=(0.0,))


def render_rgb(scene, config=None, tray_color=None):
    config = config or SimulatorConfig()
    tray = resolve_tray_color(tray_color if tray_color is not None else scene.tray_color)
    _, top = _heightmap(scene, config, skip_transparent=False)
    palette = np.array([tray] + [obj.color for obj in scene.objects], dtype=np.float64)
    image = palette[top + 1].transpose(2, 0, 1)
    return Observation(image, modality=COLOR, background=tray)


def render(scene, config):
    if config.modality == COLOR:
        return render_rgb(scene, config)
    return render_depth(scene, config)


def _disk_structure(radius):
    offsets = np.arange(-radius, radius + 1)
    return offsets[:, None] ** 2 + offsets[None, :] ** 2 <= radius * radius


def tray_interior(config):
    xs, ys = pixel_coordinates(config.image_size, config.resolution)
    limit = config.interior_half_width
    return (np.abs(xs) <= limit) & (np.abs(ys) <= limit)


def action_mask(obs, config=None):
    """Pixels near something taller than the threshold, inside the tray walls."""
    config = config or SimulatorConfig()
    if obs.modality != DEPTH:
        raise InvalidArgumentError("The action mask is computed from a depth observation")
    positive = obs.data[0] > config.mask_threshold
    if config.dilation_radius > 0:
        positive = ndimage.binary_dilation(positive, structure=_disk_structure(config.dilation_radius))
    return positive & tray_interior(config)


def select_z(obs, pixel, window=SELECT_Z_WINDOW):
    """Mean depth over the window centred at ``pixel``, clipped to the image."""
    height, width = obs.size
    row, col = pixel
    if not (0 <= row < height and 0 <= col < width):
        raise InvalidArgumentError(f"Pixel {pixel} is outside the {height}x{width} image")
    half = window // 2
    patch = obs.data[0, max(row - half, 0):row + half + 1, max(col - half, 0):col + half + 1]
    return float(patch.mean())


def _jaws(gripper, margin=0.0):
    inner = gripper.aperture / 2 - margin
    outer = gripper.aperture / 2 + gripper.jaw_width + margin
    half_length = gripper.jaw_length / 2 + margin
    return (box(inner, -half_length, outer, half_length), box(-outer, -half_length, -inner, half_length))


def grasp_oracle(scene, position, normal, z, gripper, collision_margin=0.0):
    """
    Decide a top-down grasp at world ``position`` closing along the unit ``normal``.

    The jaws descend to ``z``. Objects taller than ``z`` block the jaws; the grasp
    succeeds when no jaw is blocked and an object taller than ``z`` has its
    centroid between the jaws and a chord along the closing axis within
    ``[min_width, aperture]``. ``collision`` reports contact of the jaws
    enlarged by ``collision_margin``.
    """
    half = scene.tray_size / 2
    if abs(position[0]) > half or abs(position[1]) > half:
        raise InvalidActionError(f"Grasp position {position} is outside the tray")
    jaws = _jaws(gripper)
    padded_jaws = _jaws(gripper, collision_margin)
    axis = LineString([(-scene.tray_size * 2, 0.0), (scene.tray_size * 2, 0.0)])

    blocked, collision, candidates = False, False, []
    for index, obj in enumerate(scene.objects):
        if obj.height <= z:
            continue
        shape = obj.footprint(origin=position, axis=normal)
        if any(jaw.intersects(shape) for jaw in jaws):
            blocked = True
        if any(jaw.intersects(shape) for jaw in padded_jaws):
            collision = True
        centre = shape.centroid
        if abs(centre.x) >= gripper.aperture / 2 or abs(centre.y) > gripper.jaw_length / 2:
            continue
        width = shape.intersection(axis).length
        if gripper.min_width <= width <= gripper.aperture:
            candidates.append((centre.x * centre.x + centre.y * centre.y, index, width))

    if blocked or not candidates:
        return OracleResult(success=False, collision=collision or blocked)
    _, target, width = min(candidates)
    return OracleResult(success=True, collision=collision, target=target, width=width)


def step(scene, action, config=None, n_theta=8):
    """
    Execute ``action`` on ``scene``: resolve z from the depth render, ask the
    oracle, and return the reward and the next scene. Pure in its inputs.
    """
    config = config or SimulatorConfig()
    depth = render_depth(scene, config)
    z = 0.0
    try:
        position = pixel_to_world(action.pixel, config)
        z = select_z(depth, action.pixel) - config.descent_offset
        result = grasp_oracle(
            scene, position, normal_of_class(action.theta_class, n_theta), z,
            config.gripper, config.collision_margin,
        )
    except InvalidActionError as exc:
        logger.warning("Invalid grasp %s: %s", action, exc)
        result = OracleResult(success=False, collision=False)

    success = result.success
    if success and config.success_degradation > 0:
        draw = np.random.default_rng(np.random.SeedSequence([scene.seed, scene.attempts_made])).random()
        success = draw >= config.success_degradation

    if success:
        reward = 0.8 if (config.collision_penalty and result.collision) else 1.0
        next_scene = scene.without(result.target)
    else:
        reward = 0.0
        next_scene = scene
    next_scene = dataclasses.replace(next_scene, attempts_made=scene.attempts_made + 1)
    done = not next_scene.objects or next_scene.attempts_made >= config.max_attempts
    return StepResult(reward=reward, scene=next_scene, done=done, success=success,
                      collision=result.collision, z=z)


def scene_to_document(scene):
    return {
        'seed': scene.seed,
        'attempts_made': scene.attempts_made,
        'tray': {
            'size': scene.tray_size,
            'wall_margin': scene.wall_margin,
            'color': list(scene.tray_color),
        },
        'objects': [
            {
                'shape': obj.shape,
                'dims': list(obj.dims),
                'position': list(obj.position),
                'heading': list(obj.heading),
                'height': obj.height,
                'color': list(obj.color),
                'transparent': obj.transparent,
            }
            for obj in scene.objects
        ],
    }


def scene_from_document(document):
    """Inverse of ``scene_to_document`` for an already validated mapping."""
    tray = document.get('tray', {})
    objects = tuple(
        SceneObject(
            shape=item['shape'],
            dims=tuple(item['dims']),
            position=tuple(item['position']),
            heading=tuple(item['heading']),
            height=item['height'],
            color=tuple(item.get('color', (OBJECT_MEAN_COLOR,) * 3)),
            transparent=bool(item.get('transparent', False)),
        )
        for item in document.get('objects', [])
    )
    return Scene(
        objects=objects,
        tray_size=tray.get('size', 0.3),
        wall_margin=tray.get('wall_margin', 0.015),
        tray_color=resolve_tray_color(tray.get('color', 'black')),
        attempts_made=document.get('attempts_made', 0),
        seed=document.get('seed', 0),
    )


class GraspEnvironment:
    """
    Episode bookkeeping around the pure ``step``: renders observations, builds
    masks, and starts a fresh scene (seeded from the run seed and episode count)
    whenever an episode ends or the mask comes up empty.
    """

    def __init__(self, config, seed, n_theta=8):
        self.config = config
        self.seed = seed
        self.n_theta = n_theta
        self.episode = 0
        self.scene = None
        self.reset()

    def scene_seed(self, episode):
        return int(np.random.SeedSequence([self.seed, episode]).generate_state(1)[0])

    def reset(self):
        self.scene = reset_scene(self.scene_seed(self.episode), config=self.config)
        self.episode += 1
        return self.observe()

    def observe(self):
        return render(self.scene, self.config)

    def mask(self):
        return action_mask(render_depth(self.scene, self.config), self.config)

    def ready_mask(self):
        """Current action mask; resets the scene while it is empty."""
        for _ in range(self.config.max_rejections):
            mask = self.mask()
            if mask.any():
                return mask
            logger.warning("Empty action mask in scene %s; starting a new scene", self.scene.seed)
            self.reset()
        raise SceneTooCrowdedError("No scene with graspable content could be generated")

    def step(self, action):
        result = step(self.scene, action, self.config, self.n_theta)
        self.scene = result.scene
        if result.done:
            self.reset()
        return result

    def oracle_candidates(self):
        """Every (pixel, class) the oracle accepts in the current scene, for upper-bound agents."""
        depth = render_depth(self.scene, self.config)
        mask = action_mask(depth, self.config)
        found = []
        for index, obj in enumerate(self.scene.objects):
            pixel = world_to_pixel(obj.position, self.config)
            if not (0 <= pixel[0] < self.config.image_size and 0 <= pixel[1] < self.config.image_size):
                continue
            if not mask[pixel]:
                continue
            for theta_class in range(self.n_theta):
                action = GraspAction(pixel=pixel, theta_class=theta_class)
                z = select_z(depth, pixel) - self.config.descent_offset
                result = grasp_oracle(self.scene, pixel_to_world(pixel, self.config),
                                      normal_of_class(theta_class, self.n_theta), z, self.config.gripper)
                if result.success:
                    found.append(action)
        return found
