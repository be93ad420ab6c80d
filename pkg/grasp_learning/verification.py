"""
Property checks bundled by the ``verify`` command.

Each check is a function registered with ``@register``; it returns a
``CheckResult`` and must not depend on any other check having run.
"""
import logging
from dataclasses import dataclass

import numpy as np

from . import autodiff
from .asr import GraspAction, ModelConfig, Observation, build_asr_model
from .autodiff import Tensor, numerical_gradient, relative_error
from .bandit import ReplayBuffer, Transition, augment_and_store, compute_loss
from .equivariant import EquiConv2d, EquiLayerSpec, check_equivariance, check_kernel_constraint
from .exploration import boltzmann_probabilities
from .groups import (
    QUOTIENT_REGULAR, REGULAR, TRIVIAL, GroupElement, Representation, SymmetryGroup, is_exact_element, rep_matrix,
)
from .simulator import SimulatorConfig, grasp_oracle, normal_of_class, reset_scene

logger = logging.getLogger(__name__)

KERNEL_TOLERANCE = 1e-6
GRADIENT_TOLERANCE = 1e-5
LOSS_TOLERANCE = 1e-12
ORACLE_PAIRS = 1000

CHECKS = {}


@dataclass(frozen=True)
class CheckResult:
    name: str
    passed: bool
    detail: str = ''

    def __str__(self):
        return f"[{'PASS' if self.passed else 'FAIL'}] {self.name}: {self.detail}"


@dataclass(frozen=True)
class VerificationReport:
    results: tuple

    @property
    def passed(self):
        return all(result.passed for result in self.results)

    @property
    def failures(self):
        return [result for result in self.results if not result.passed]

    def __str__(self):
        lines = [str(result) for result in self.results]
        lines.append(f"{len(self.results) - len(self.failures)}/{len(self.results)} checks passed")
        return '\n'.join(lines)


def register(name):
    def decorator(function):
        CHECKS[name] = function
        return function
    return decorator


def verification_model_config():
    """A small model that keeps the suite quick while exercising every layer type."""
    return ModelConfig(q1_widths=(2, 2, 2), q2_widths=(1, 2), crop_size=16)


LAYER_CASES = (
    ('D4', TRIVIAL, REGULAR, 3),
    ('D4', REGULAR, REGULAR, 3),
    ('D4', REGULAR, TRIVIAL, 1),
    ('C4', REGULAR, REGULAR, 3),
    ('C8', TRIVIAL, REGULAR, 3),
    ('C16/C2', REGULAR, REGULAR, 3),
    ('C16/C2', REGULAR, QUOTIENT_REGULAR, 1),
    ('D16/D2', REGULAR, QUOTIENT_REGULAR, 1),
)


def layer_specs():
    for group_name, rep_in, rep_out, size in LAYER_CASES:
        group = SymmetryGroup.parse(group_name)
        yield EquiLayerSpec(group, Representation(rep_in, group), Representation(rep_out, group), 2, 2, size)


def exact_constraint_error(spec, full):
    errors = check_kernel_constraint(spec, full)
    return max(error for g, error in errors.items() if is_exact_element(g, spec.group))


def model_kernels(model):
    """Expanded kernels of every equivariant layer, keyed by the layer's base parameter name."""
    kernels = {}
    names = {id(param): name for name, param in model.named_parameters()}
    stack = [model]
    while stack:
        module = stack.pop()
        if isinstance(module, EquiConv2d):
            kernels[names[id(module.base)]] = (module.spec, module.kernel().full.data.copy())
            continue
        for value in vars(module).values():
            if isinstance(value, autodiff.Module):
                stack.append(value)
            elif isinstance(value, (list, tuple)):
                stack.extend(item for item in value if isinstance(item, autodiff.Module))
    return kernels


def verify_kernels(kernels, tolerance=KERNEL_TOLERANCE):
    """Names of the kernels violating the constraint at exact group elements."""
    return sorted(name for name, (spec, full) in kernels.items()
                  if exact_constraint_error(spec, full) > tolerance)


@register('regular-representation')
def check_regular_representation():
    group = SymmetryGroup.parse('C4')
    shifted = rep_matrix(Representation(REGULAR, group), GroupElement(1, 0)) @ np.array([1.0, 2.0, 3.0, 4.0])
    return CheckResult('regular-representation', bool(np.array_equal(shifted, [4.0, 1.0, 2.0, 3.0])),
                       f"C4 generator maps (1, 2, 3, 4) to {tuple(shifted)}")


@register('kernel-constraint')
def check_layer_kernels():
    rng = np.random.default_rng(1)
    worst = 0.0
    for spec in layer_specs():
        layer = EquiConv2d(spec, rng)
        worst = max(worst, exact_constraint_error(spec, layer.kernel().full))
    return CheckResult('kernel-constraint', worst < KERNEL_TOLERANCE,
                       f"max relative error {worst:.2e} over {len(LAYER_CASES)} layer types")


@register('corrupted-kernel')
def check_corruption_detected():
    rng = np.random.default_rng(2)
    group = SymmetryGroup.parse('D4')
    spec = EquiLayerSpec(group, Representation(REGULAR, group), Representation(REGULAR, group), 2, 2, 3)
    full = EquiConv2d(spec, rng).kernel().full.data.copy()
    full[1, 0, 0, 2] = -full[1, 0, 0, 2] + 1.0
    detected = verify_kernels({'corrupted': (spec, full)}) == ['corrupted']
    return CheckResult('corrupted-kernel', detected, "a flipped weight in one expanded slot is detected")


@register('q1-equivariance')
def check_q1_equivariance():
    model = build_asr_model(verification_model_config(), 'depth', np.random.default_rng(3))
    report = check_equivariance(model.q1, model.q1.group, trials=2, input_size=16)
    return CheckResult('q1-equivariance', report.passed, str(report))


@register('q2-equivariance')
def check_q2_equivariance():
    model = build_asr_model(verification_model_config(), 'depth', np.random.default_rng(4))
    report = check_equivariance(model.q2, model.q2.group, trials=2)
    return CheckResult('q2-equivariance', report.passed, str(report))


def _gradient_error(function, param):
    param.grad = None
    function().backward()
    analytic = param.grad.copy()
    numeric = numerical_gradient(lambda: function().item(), param.data)
    param.grad = None
    return relative_error(analytic, numeric)


@register('gradients')
def check_gradients():
    if autodiff.default_dtype() != np.float64:
        return CheckResult('gradients', False, "finite differences need float64 precision")
    rng = np.random.default_rng(5)
    worst = 0.0
    for spec in layer_specs():
        if not spec.group.is_exact:
            continue
        layer = EquiConv2d(spec, rng)
        layer.bias.data = rng.normal(size=layer.bias.shape)
        x = Tensor(rng.normal(size=(1, spec.in_channels, 6, 6)))
        weights = Tensor(rng.normal(size=(1, spec.out_channels, 6, 6)))

        def objective():
            return autodiff.sum(autodiff.mul(autodiff.squash(layer(x)), weights))
        worst = max(worst, _gradient_error(objective, layer.base), _gradient_error(objective, layer.bias))

    model = build_asr_model(verification_model_config(), 'depth', rng)
    obs = Observation(np.abs(rng.normal(scale=0.02, size=(1, 16, 16))))
    batch = [Transition(obs=obs, action=GraspAction((7, 8), 3), reward=1.0),
             Transition(obs=obs, action=GraspAction((4, 10), 5), reward=0.0)]

    def loss():
        return compute_loss(batch, model, k=2, tau=0.01, rng=np.random.default_rng(6)).total
    for param in (model.q1.head.base, model.q2.head.base, model.q2.stem.base):
        worst = max(worst, _gradient_error(loss, param))
    return CheckResult('gradients', worst < GRADIENT_TOLERANCE, f"max relative error {worst:.2e}")


class _FixedValues:
    """Stands in for the two networks with preset Q values (used for hand-computed losses)."""
    crop_size = 3

    def __init__(self, q1, q2):
        self.q1 = autodiff.Parameter(q1)
        self.q2 = autodiff.Parameter(q2)

    def q1_batch(self, observations):
        return self.q1

    def q2_batch(self, patches):
        return self.q2


def hand_loss_case():
    """``r = 1``, ``Q2(theta) = 0.2``, best other entry 0.6, ``Q1 = 0.5``."""
    q1 = np.zeros((1, 1, 3, 3))
    q1[0, 0, 1, 1] = 0.5
    q2 = np.array([[0.2, 0.6, 0.1, 0.3, 0.0, 0.5, 0.4, 0.1]])
    obs = Observation(np.zeros((1, 3, 3)))
    batch = [Transition(obs=obs, action=GraspAction((1, 1), 0), reward=1.0)]
    return _FixedValues(q1, q2), batch


@register('loss-hand-case')
def check_loss_hand_case():
    with autodiff.precision(np.float64):
        model, batch = hand_loss_case()
        breakdown = compute_loss(batch, model, k=0, tau=0.01, rng=np.random.default_rng(0))
    ok = abs(breakdown.l2 - 0.32) < LOSS_TOLERANCE and abs(breakdown.l1_prime - 0.125) < LOSS_TOLERANCE
    return CheckResult('loss-hand-case', ok, f"L2 = {breakdown.l2!r}, L1' = {breakdown.l1_prime!r}")


@register('boltzmann-sharpness')
def check_boltzmann():
    probability = boltzmann_probabilities(np.array([1.0, 0.0]), 0.002)[0]
    return CheckResult('boltzmann-sharpness', probability >= 1 - 1e-9,
                       f"P(mode) = {probability!r} at tau 0.002")


@register('augmentation-count')
def check_augmentation_count():
    rng = np.random.default_rng(7)
    obs = Observation(np.abs(rng.normal(scale=0.02, size=(1, 32, 32))))
    buffer = ReplayBuffer(100)
    augment_and_store(buffer, Transition(obs=obs, action=GraspAction((16, 16), 2), reward=1.0), rng, n_theta=8)
    rewards = {t.reward for t in buffer}
    return CheckResult('augmentation-count', len(buffer) == 9 and rewards == {1.0},
                       f"{len(buffer)} records stored for one grasp")


def oracle_invariance_pairs(count, seed=0, config=None):
    """Number of (scene, action) pairs whose oracle result changes under quarter turns of the world."""
    config = config or SimulatorConfig(image_size=64, n_objects=6)
    rng = np.random.default_rng(seed)
    mismatches = 0
    for index in range(count):
        scene = reset_scene(int(rng.integers(2 ** 31)), config=config)
        target = scene.objects[int(rng.integers(len(scene.objects)))] if scene.objects else None
        base = target.position if target is not None else (0.0, 0.0)
        position = (base[0] + rng.normal(scale=0.005), base[1] + rng.normal(scale=0.005))
        theta_class = int(rng.integers(8))
        z = float(rng.uniform(0.0, 0.05))
        normal = normal_of_class(theta_class, 8)
        reference = grasp_oracle(scene, position, normal, z, config.gripper, config.collision_margin)
        for quarters in (1, 2, 3):
            x, y = position
            nx, ny = normal
            turned = ((x, y), (-y, x), (-x, -y), (y, -x))[quarters]
            turned_normal = ((nx, ny), (-ny, nx), (-nx, -ny), (ny, -nx))[quarters]
            result = grasp_oracle(scene.transformed(quarters), turned, turned_normal, z, config.gripper,
                                  config.collision_margin)
            if (result.success, result.collision, result.target) != (
                    reference.success, reference.collision, reference.target):
                mismatches += 1
                logger.debug("Oracle mismatch in pair %d at %d quarter turns", index, quarters)
    return mismatches


@register('oracle-invariance')
def check_oracle_invariance():
    mismatches = oracle_invariance_pairs(ORACLE_PAIRS)
    return CheckResult('oracle-invariance', mismatches == 0,
                       f"{mismatches} mismatches over {ORACLE_PAIRS} pairs x 3 turns")


def verify_suite(names=None, precision='float64'):
    """Run the registered checks (all of them by default) and collect a report."""
    selected = names or list(CHECKS)
    results = []
    with autodiff.precision(precision):
        for name in selected:
            try:
                result = CHECKS[name]()
            except Exception as exc:  # a crashing check is a failing check
                logger.exception("Check %s raised", name)
                result = CheckResult(name, False, f"{type(exc).__name__}: {exc}")
            logger.info("%s", result)
            results.append(result)
    return VerificationReport(results=tuple(results))


def verify_checkpoint(path):
    """
    Rebuild the agent stored at ``path`` and check its kernels and its equivariance.

    Checkpoints hold base weights only and every full kernel is re-expanded on
    load, so ``checkpoint-kernels`` checks the expansion code, not the file bytes.
    """
    from .experiment import load_checkpoint_agent
    config, agent = load_checkpoint_agent(path)
    model = agent.model
    results = []
    bad = verify_kernels(model_kernels(model))
    results.append(CheckResult('checkpoint-kernels', not bad,
                               f"violations in {', '.join(bad)}" if bad else "all kernels satisfy the constraint"))
    for name in ('q1', 'q2'):
        network = getattr(model, name, None)
        if network is None or network.group.order == 1:
            continue
        with autodiff.precision(config.precision):
            report = check_equivariance(network, network.group, trials=1)
        results.append(CheckResult(f"checkpoint-{name}-equivariance", report.passed, str(report)))
    return VerificationReport(results=tuple(results))

