import numpy as np
from django.test import SimpleTestCase
from numpy.testing import assert_allclose, assert_array_equal

from grasp_learning import autodiff
from grasp_learning.autodiff import Module, Tensor
from grasp_learning.equivariant import (
    EquiConv2d, EquiLayerSpec, FeatureField, check_equivariance, check_kernel_constraint, equi_forward,
    expand_kernel,
)
from grasp_learning.exceptions import InvalidArgumentError, UnsupportedLayerError
from grasp_learning.groups import (
    QUOTIENT_REGULAR, REGULAR, STANDARD, TRIVIAL, Representation, SymmetryGroup, act_on_field,
)
from grasp_learning.networks import PLAIN, FullyConvNet, ResNet, UNet, match_parameter_count


def layer_spec(group_name, rep_in, rep_out, m_in=1, m_out=1, size=3):
    group = SymmetryGroup.parse(group_name)
    return EquiLayerSpec(group, Representation(rep_in, group), Representation(rep_out, group), m_in, m_out, size)


class Stack(Module):
    """Two equivariant layers with a ReLU in between."""

    def __init__(self, group, rng):
        self.first = EquiConv2d(layer_spec(group, TRIVIAL, REGULAR, 1, 2), rng)
        self.second = EquiConv2d(layer_spec(group, REGULAR, REGULAR, 2, 1), rng)
        self.in_rep = self.first.in_rep
        self.in_multiplicity = 1
        self.out_rep = self.second.out_rep
        self.out_multiplicity = 1
        self.input_size = 8

    def forward(self, x):
        return self.second(autodiff.relu(self.first(x)))


class Identity:
    def __init__(self, group):
        self.in_rep = self.out_rep = Representation(TRIVIAL, group)
        self.in_multiplicity = self.out_multiplicity = 1
        self.input_size = 8

    def __call__(self, x):
        return x


class KernelExpansionTests(SimpleTestCase):
    def setUp(self):
        context = autodiff.precision('float64')
        context.__enter__()
        self.addCleanup(context.__exit__, None, None, None)

    def test_lifting_rotates_base_filter(self):
        spec = layer_spec('C4', TRIVIAL, REGULAR)
        base = np.zeros(spec.base_shape)
        base[0, 0, 0, 1] = 1.0
        full = expand_kernel(spec, base).full.data
        assert_array_equal(full[0, 0], base[0, 0])
        expected = np.zeros((3, 3))
        expected[1, 0] = 1.0
        assert_array_equal(full[1, 0], expected)

    def test_constraint_holds_for_exact_groups(self):
        rng = np.random.default_rng(0)
        cases = [
            ('D4', TRIVIAL, REGULAR, 3), ('D4', REGULAR, REGULAR, 3), ('D4', REGULAR, TRIVIAL, 1),
            ('C4', REGULAR, REGULAR, 3), ('C4', TRIVIAL, TRIVIAL, 3),
        ]
        for group, rep_in, rep_out, size in cases:
            spec = layer_spec(group, rep_in, rep_out, 2, 3, size)
            errors = check_kernel_constraint(spec, EquiConv2d(spec, rng).kernel().full)
            self.assertLess(max(errors.values()), 1e-6, msg=f"{group} {rep_in}->{rep_out}")

    def test_quotient_head_constraint(self):
        rng = np.random.default_rng(1)
        spec = layer_spec('C16/C2', REGULAR, QUOTIENT_REGULAR, 2, 1, 1)
        errors = check_kernel_constraint(spec, EquiConv2d(spec, rng).kernel().full)
        self.assertLess(max(errors.values()), 1e-6)

    def test_regular_to_trivial_shares_orbit_weights(self):
        spec = layer_spec('C4', REGULAR, TRIVIAL, 1, 1, 1)
        full = EquiConv2d(spec, np.random.default_rng(2)).kernel().full.data
        assert_allclose(full[0, :, 0, 0], np.full(4, full[0, 0, 0, 0]))

    def test_corrupted_kernel_fails(self):
        spec = layer_spec('D4', REGULAR, REGULAR)
        full = EquiConv2d(spec, np.random.default_rng(3)).kernel().full.data.copy()
        full[2, 5, 1, 1] += 0.5
        self.assertGreater(max(check_kernel_constraint(spec, full).values()), 1e-6)

    def test_unsupported_representation(self):
        spec = layer_spec('C4', STANDARD, REGULAR)
        with self.assertRaises(UnsupportedLayerError):
            EquiConv2d(spec, np.random.default_rng(0))

    def test_interpolated_trivial_output_needs_one_by_one(self):
        with self.assertRaises(UnsupportedLayerError):
            EquiConv2d(layer_spec('C8', REGULAR, TRIVIAL, size=3), np.random.default_rng(0))

    def test_even_kernel_rejected(self):
        with self.assertRaises(InvalidArgumentError):
            layer_spec('C4', TRIVIAL, REGULAR, size=2)


class LayerEquivarianceTests(SimpleTestCase):
    def setUp(self):
        context = autodiff.precision('float64')
        context.__enter__()
        self.addCleanup(context.__exit__, None, None, None)

    def test_zero_input_gives_zero_output(self):
        spec = layer_spec('D4', TRIVIAL, REGULAR)
        layer = EquiConv2d(spec, np.random.default_rng(0), bias=False)
        field = FeatureField(spec.rep_in, 1, Tensor(np.zeros((1, 1, 8, 8))))
        out = equi_forward(spec, layer.kernel(), field)
        assert_array_equal(out.grid.data, 0.0)
        self.assertEqual(out.rep, spec.rep_out)

    def test_lifting_layer_commutes_with_d4(self):
        spec = layer_spec('D4', TRIVIAL, REGULAR)
        layer = EquiConv2d(spec, np.random.default_rng(1))
        group = spec.group
        field = FeatureField(spec.rep_in, 1, Tensor(np.random.default_rng(2).normal(size=(1, 1, 8, 8))))
        for g in group.elements:
            rotated_then = layer.forward_field(act_on_field(g, field, spec.rep_in))
            then_rotated = act_on_field(g, layer.forward_field(field), spec.rep_out)
            error = autodiff.relative_error(rotated_then.grid.data, then_rotated.grid.data)
            self.assertLess(error, 1e-5, msg=str(g))

    def test_representation_mismatch(self):
        spec = layer_spec('D4', REGULAR, REGULAR)
        layer = EquiConv2d(spec, np.random.default_rng(0))
        field = FeatureField(Representation(TRIVIAL, spec.group), 8, Tensor(np.zeros((1, 8, 4, 4))))
        with self.assertRaises(InvalidArgumentError):
            layer.forward_field(field)

    def test_two_layer_stack(self):
        report = check_equivariance(Stack('D4', np.random.default_rng(4)), SymmetryGroup.parse('D4'), trials=2)
        self.assertTrue(report.passed, str(report))

    def test_identity_network_is_exact(self):
        group = SymmetryGroup.parse('C4')
        report = check_equivariance(Identity(group), group, trials=1)
        self.assertEqual(report.worst, 0.0)

    def test_corrupted_layer_detected(self):
        network = Stack('C4', np.random.default_rng(5))
        original = network.first.kernel

        def broken():
            kernel = original()
            data = kernel.full.data.copy()
            data[1, 0, 0, 0] += 1.0
            return type(kernel)(base=kernel.base, full=Tensor(data))
        network.first.kernel = broken
        report = check_equivariance(network, SymmetryGroup.parse('C4'), trials=1)
        self.assertFalse(report.passed)


class NetworkEquivarianceTests(SimpleTestCase):
    def test_unet_d4_float32(self):
        with autodiff.precision('float32'):
            network = UNet(SymmetryGroup.parse('D4'), 1, (2, 2), TRIVIAL, 1, np.random.default_rng(0))
            report = check_equivariance(network, network.group, trials=2, input_size=16)
        self.assertTrue(report.passed, str(report))
        self.assertLess(report.worst, 1e-4)

    def test_unet_outputs_are_squashed(self):
        with autodiff.precision('float32'):
            network = UNet(SymmetryGroup.parse('D4'), 1, (2, 2), TRIVIAL, 1, np.random.default_rng(1))
            out = network(Tensor(np.random.default_rng(2).normal(size=(2, 1, 8, 8)))).data
        self.assertEqual(out.shape, (2, 1, 8, 8))
        self.assertTrue(np.all((out > 0) & (out < 1)))

    def test_unet_translation(self):
        with autodiff.precision('float64'):
            network = UNet(SymmetryGroup.parse('D4'), 1, (2, 2), TRIVIAL, 1, np.random.default_rng(3))
            x = np.zeros((1, 1, 32, 32))
            x[0, 0, 8:16, 8:16] = np.random.default_rng(4).normal(size=(8, 8))
            shifted = np.roll(x, 8, axis=-1)
            out = network(Tensor(x)).data
            out_shifted = network(Tensor(shifted)).data
        assert_allclose(out_shifted[..., 4:28, 12:28], out[..., 4:28, 4:20], atol=1e-10)

    def test_resnet_quotient_c16(self):
        with autodiff.precision('float64'):
            network = ResNet(SymmetryGroup.parse('C16/C2'), 1, (1, 1), QUOTIENT_REGULAR, 1,
                             np.random.default_rng(5), input_size=16)
            report = check_equivariance(network, network.group, trials=2)
        self.assertTrue(report.passed, str(report))
        exact = [g for g in network.group.elements if g.k % 4 == 0]
        self.assertLess(max(report.errors[g] for g in exact), 1e-4)

    def test_resnet_half_turn_leaves_output(self):
        with autodiff.precision('float64'):
            group = SymmetryGroup.parse('C16/C2')
            network = ResNet(group, 1, (1, 1), QUOTIENT_REGULAR, 1, np.random.default_rng(6), input_size=16)
            x = np.random.default_rng(7).normal(size=(1, 1, 16, 16))
            out = network(Tensor(x)).data
            turned = network(Tensor(np.rot90(x, 2, axes=(-2, -1)).copy())).data
        assert_allclose(turned, out, rtol=1e-8, atol=1e-10)
        self.assertEqual(out.shape, (1, 8))

    def test_resnet_quarter_turn_shifts_four_slots(self):
        with autodiff.precision('float64'):
            group = SymmetryGroup.parse('C16/C2')
            network = ResNet(group, 1, (1, 1), QUOTIENT_REGULAR, 1, np.random.default_rng(8), input_size=16)
            x = np.random.default_rng(9).normal(size=(1, 1, 16, 16))
            out = network(Tensor(x)).data
            turned = network(Tensor(np.rot90(x, 1, axes=(-2, -1)).copy())).data
        assert_allclose(turned, np.roll(out, 4, axis=1), rtol=1e-8, atol=1e-10)

    def test_plain_group_is_ordinary_convolution(self):
        network = FullyConvNet(1, (2, 3), 4, np.random.default_rng(0))
        self.assertIs(network.group, PLAIN)
        with autodiff.precision('float32'):
            out = network(Tensor(np.zeros((1, 1, 8, 8))))
        self.assertEqual(out.shape, (1, 4, 8, 8))

    def test_match_parameter_count(self):
        target = UNet(SymmetryGroup.parse('D4'), 1, (4, 8), TRIVIAL, 1, np.random.default_rng(0)).parameter_count()
        match = match_parameter_count(
            lambda w: UNet(PLAIN, 1, w, TRIVIAL, 1, np.random.default_rng(0)), (4, 8), target,
        )
        self.assertLess(abs(match.parameter_count() - target) / target, 0.15)
