import numpy as np
from django.test import SimpleTestCase
from numpy.testing import assert_array_equal, assert_allclose

from grasp_learning.exceptions import InvalidArgumentError
from grasp_learning.groups import (
    QUOTIENT_REGULAR, REGULAR, STANDARD, TRIVIAL, GroupElement, Representation, SymmetryGroup, compose, inverse,
    quotient_action, quotient_class, rep_matrix, transform_grid, transform_pixel, translate_grid,
)


class SymmetryGroupTests(SimpleTestCase):
    def test_parse_names(self):
        self.assertEqual(SymmetryGroup.parse('D4').order, 8)
        self.assertEqual(SymmetryGroup.parse('c16/c2').name, 'C16/C2')
        self.assertEqual(SymmetryGroup.parse('D16/D2').class_count, 8)

    def test_parse_rejects_other_quotients(self):
        with self.assertRaises(InvalidArgumentError):
            SymmetryGroup.parse('C16/C4')
        with self.assertRaises(InvalidArgumentError):
            SymmetryGroup.parse('Z4')

    def test_exactness(self):
        self.assertTrue(SymmetryGroup.parse('D4').is_exact)
        self.assertFalse(SymmetryGroup.parse('C16').is_exact)

    def test_compose(self):
        c4 = SymmetryGroup.parse('C4')
        d4 = SymmetryGroup.parse('D4')
        self.assertEqual(compose(GroupElement(1, 0), GroupElement(1, 0), c4), GroupElement(2, 0))
        self.assertEqual(compose(GroupElement(3, 0), GroupElement(1, 0), c4), GroupElement(0, 0))
        self.assertEqual(compose(GroupElement(1, 1), GroupElement(0, 1), d4), GroupElement(3, 0))

    def test_compose_rejects_foreign_element(self):
        with self.assertRaises(InvalidArgumentError):
            compose(GroupElement(5, 0), GroupElement(0, 0), SymmetryGroup.parse('C4'))
        with self.assertRaises(InvalidArgumentError):
            compose(GroupElement(1, 1), GroupElement(0, 0), SymmetryGroup.parse('C4'))

    def test_inverse(self):
        c8 = SymmetryGroup.parse('C8')
        d4 = SymmetryGroup.parse('D4')
        self.assertEqual(inverse(GroupElement(3, 0), c8), GroupElement(5, 0))
        self.assertEqual(inverse(c8.identity, c8), c8.identity)
        self.assertEqual(inverse(GroupElement(1, 1), d4), GroupElement(1, 1))
        for g in d4.elements:
            self.assertEqual(compose(g, inverse(g, d4), d4), d4.identity)


class RepresentationTests(SimpleTestCase):
    def test_trivial_matrix(self):
        group = SymmetryGroup.parse('D4')
        for g in group.elements:
            assert_array_equal(rep_matrix(Representation(TRIVIAL, group), g), [[1.0]])

    def test_standard_quarter_turn(self):
        group = SymmetryGroup.parse('C4')
        assert_array_equal(rep_matrix(Representation(STANDARD, group), GroupElement(1, 0)), [[0, -1], [1, 0]])

    def test_regular_shifts_slots(self):
        group = SymmetryGroup.parse('C4')
        matrix = rep_matrix(Representation(REGULAR, group), GroupElement(1, 0))
        assert_array_equal(matrix @ np.array([1.0, 2.0, 3.0, 4.0]), [4.0, 1.0, 2.0, 3.0])

    def test_regular_is_homomorphism(self):
        group = SymmetryGroup.parse('D4')
        rep = Representation(REGULAR, group)
        for g in group.elements:
            for h in group.elements:
                assert_array_equal(rep_matrix(rep, compose(g, h, group)), rep_matrix(rep, g) @ rep_matrix(rep, h))

    def test_quotient_regular_dimension(self):
        group = SymmetryGroup.parse('C16/C2')
        self.assertEqual(Representation(QUOTIENT_REGULAR, group).dim, 8)
        with self.assertRaises(InvalidArgumentError):
            Representation(QUOTIENT_REGULAR, SymmetryGroup.parse('C16'))


class QuotientTests(SimpleTestCase):
    def test_quotient_class(self):
        c16 = SymmetryGroup.parse('C16/C2')
        d16 = SymmetryGroup.parse('D16/D2')
        self.assertEqual(quotient_class(c16, GroupElement(9, 0)), 1)
        self.assertEqual(quotient_class(c16, GroupElement(3, 0)), 3)
        self.assertEqual(quotient_class(d16, GroupElement(10, 1)), 2)

    def test_quotient_class_needs_flag(self):
        with self.assertRaises(InvalidArgumentError):
            quotient_class(SymmetryGroup.parse('C16'), GroupElement(1, 0))

    def test_half_turn_fixes_every_class(self):
        group = SymmetryGroup.parse('C16/C2')
        for c in range(group.class_count):
            self.assertEqual(quotient_action(group, GroupElement(8, 0), c), c)

    def test_quarter_turn_shifts_by_four_classes(self):
        group = SymmetryGroup.parse('C16/C2')
        self.assertEqual(quotient_action(group, GroupElement(4, 0), 1), 5)


class GridActionTests(SimpleTestCase):
    def test_quarter_turn_is_counter_clockwise(self):
        group = SymmetryGroup.parse('C4')
        grid = np.zeros((3, 3))
        grid[0, 1] = 1.0
        moved = transform_grid(grid, GroupElement(1, 0), group)
        self.assertEqual(moved[1, 0], 1.0)

    def test_identity_leaves_grid_unchanged(self):
        group = SymmetryGroup.parse('C16')
        grid = np.random.default_rng(0).normal(size=(5, 5))
        assert_allclose(transform_grid(grid, group.identity, group), grid)

    def test_off_axis_rotation_needs_square_grid(self):
        with self.assertRaises(InvalidArgumentError):
            transform_grid(np.zeros((4, 6)), GroupElement(1, 0), SymmetryGroup.parse('C8'))

    def test_transform_pixel_matches_grid(self):
        group = SymmetryGroup.parse('D4')
        grid = np.zeros((7, 7))
        grid[1, 5] = 1.0
        for g in group.elements:
            moved = translate_grid(transform_grid(grid, g, group), (1, -2))
            self.assertEqual(tuple(np.argwhere(moved == 1.0)[0]),
                             transform_pixel(g, group, (1, 5), (7, 7), shift=(1, -2)))

    def test_translate_fills_border(self):
        out = translate_grid(np.ones((3, 3)), (1, 0), fill=-1.0)
        assert_array_equal(out[0], [-1.0, -1.0, -1.0])
        assert_array_equal(out[1:], np.ones((2, 3)))
