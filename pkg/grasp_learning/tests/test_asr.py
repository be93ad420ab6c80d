import numpy as np
from django.test import SimpleTestCase
from numpy.testing import assert_allclose, assert_array_equal
from scipy import stats

from grasp_learning import autodiff
from grasp_learning.asr import (
    COLOR, CropPatch, GraspAction, ModelConfig, Observation, QMap, build_asr_model, crop, preprocess,
)
from grasp_learning.exceptions import InvalidArgumentError, NoActionError, ShapeError
from grasp_learning.exploration import Exploration, boltzmann_probabilities, boltzmann_sample, greedy_index

SMALL = ModelConfig(q1_widths=(2, 2), q2_widths=(1, 1), crop_size=16)


def depth_image(seed, size=16):
    return Observation(np.abs(np.random.default_rng(seed).normal(scale=0.03, size=(1, size, size))))


class ObservationTests(SimpleTestCase):
    def test_negative_depth_rejected(self):
        with self.assertRaises(InvalidArgumentError):
            Observation(-np.ones((1, 4, 4)))

    def test_channel_count_checked(self):
        with self.assertRaises(ShapeError):
            Observation(np.zeros((1, 4, 4)), modality=COLOR)

    def test_background_per_channel(self):
        obs = Observation(np.zeros((3, 4, 4)), modality=COLOR, background=0.5)
        self.assertEqual(obs.background, (0.5, 0.5, 0.5))

    def test_preprocess(self):
        assert_allclose(preprocess(np.full((1, 2, 2), 0.03), 'depth', SMALL), 0.3)
        assert_allclose(preprocess(np.full((3, 2, 2), 1.0), COLOR, SMALL), 1.0)


class CropTests(SimpleTestCase):
    def test_constant_image(self):
        patch = crop(Observation(np.full((1, 12, 12), 0.02)), (6, 6), 4)
        assert_array_equal(patch.data, 0.02)
        self.assertEqual(patch.center, (6, 6))

    def test_corner_reads_background(self):
        obs = Observation(np.ones((3, 8, 8)), modality=COLOR, background=(0.2, 0.2, 0.2))
        patch = crop(obs, (0, 0), 4)
        assert_array_equal(patch.data[:, :2, :], 0.2)
        assert_array_equal(patch.data[:, :, :2], 0.2)
        assert_array_equal(patch.data[:, 2:, 2:], 1.0)

    def test_out_of_bounds(self):
        with self.assertRaises(InvalidArgumentError):
            crop(Observation(np.zeros((1, 8, 8))), (8, 0), 4)


class ModelTests(SimpleTestCase):
    def setUp(self):
        context = autodiff.precision('float32')
        context.__enter__()
        self.addCleanup(context.__exit__, None, None, None)
        self.model = build_asr_model(SMALL, 'depth', np.random.default_rng(0))

    def test_output_shapes_and_bounds(self):
        qmap = self.model.q1_forward(depth_image(1))
        self.assertEqual(qmap.values.shape, (16, 16))
        self.assertTrue(np.all((qmap.values > 0) & (qmap.values < 1)))
        qvector = self.model.q2_forward(crop(depth_image(2), (8, 8), 16))
        self.assertEqual(len(qvector), 8)
        self.assertEqual(self.model.n_theta, 8)

    def test_wrong_channel_count(self):
        with self.assertRaises(ShapeError):
            self.model.q1_forward(Observation(np.zeros((3, 16, 16)), modality=COLOR))

    def test_wrong_crop_size(self):
        with self.assertRaises(ShapeError):
            self.model.q2_forward(CropPatch(data=np.zeros((1, 8, 8)), center=(0, 0)))

    def test_q1_commutes_with_quarter_turn(self):
        for seed in range(3):
            obs = depth_image(seed)
            turned = Observation(np.rot90(obs.data, 1, axes=(1, 2)).copy())
            expected = np.rot90(self.model.q1_forward(obs).values)
            actual = self.model.q1_forward(turned).values
            self.assertLess(autodiff.relative_error(actual, expected), 1e-4)

    def test_q2_half_turn_is_invariant(self):
        patch = depth_image(4).data
        out = self.model.q2_forward(CropPatch(patch, (8, 8))).values
        turned = self.model.q2_forward(CropPatch(np.rot90(patch, 2, axes=(1, 2)).copy(), (8, 8))).values
        self.assertLess(autodiff.relative_error(turned, out), 1e-4)

    def test_q2_quarter_turn_shifts_classes(self):
        patch = depth_image(5).data
        out = self.model.q2_forward(CropPatch(patch, (8, 8))).values
        turned = self.model.q2_forward(CropPatch(np.rot90(patch, 1, axes=(1, 2)).copy(), (8, 8))).values
        self.assertLess(autodiff.relative_error(turned, np.roll(out, 4)), 1e-4)

    def test_empty_scene_gives_uniform_map(self):
        values = self.model.q1_forward(Observation(np.zeros((1, 16, 16)))).values
        assert_allclose(values, 0.5)


class SelectionTests(SimpleTestCase):
    def setUp(self):
        context = autodiff.precision('float64')
        context.__enter__()
        self.addCleanup(context.__exit__, None, None, None)
        self.model = build_asr_model(SMALL, 'depth', np.random.default_rng(1))
        self.obs = depth_image(6)

    def test_single_admissible_pixel(self):
        mask = np.zeros((16, 16), dtype=bool)
        mask[3, 11] = True
        rng = np.random.default_rng(0)
        for _ in range(20):
            self.assertEqual(self.model.select_action(self.obs, mask, 0.01, rng).pixel, (3, 11))

    def test_empty_mask(self):
        with self.assertRaises(NoActionError):
            self.model.select_action(self.obs, np.zeros((16, 16), dtype=bool), 0.01, np.random.default_rng(0))

    def test_zero_temperature_is_two_stage_argmax(self):
        mask = np.ones((16, 16), dtype=bool)
        action = self.model.select_action(self.obs, mask, 0, np.random.default_rng(0))
        pixel = QMap(self.model.q1_forward(self.obs).values).argmax(mask)
        self.assertEqual(action.pixel, pixel)
        self.assertEqual(action.theta_class, greedy_index(self.model.q2_forward(crop(self.obs, pixel, 16)).values))

    def test_trace(self):
        trace = self.model.select_action(self.obs, None, 0.01, np.random.default_rng(0), trace=True)
        self.assertIsInstance(trace.action, GraspAction)
        self.assertEqual(trace.qvector.values.shape, (8,))


class BoltzmannTests(SimpleTestCase):
    def test_sharp_temperature(self):
        self.assertGreaterEqual(boltzmann_probabilities(np.array([1.0, 0.0]), 0.002)[0], 1 - 1e-9)

    def test_equal_values_split_evenly(self):
        rng = np.random.default_rng(0)
        draws = np.array([boltzmann_sample(np.zeros(2), 0.01, rng) for _ in range(10000)])
        self.assertGreater(stats.binomtest(int(draws.sum()), 10000, 0.5).pvalue, 0.01)

    def test_uniform_over_mask(self):
        rng = np.random.default_rng(1)
        mask = np.zeros(16, dtype=bool)
        mask[[1, 5, 9, 14]] = True
        draws = np.array([boltzmann_sample(np.full(16, 0.3), 0.01, rng, mask) for _ in range(10000)])
        self.assertTrue(np.all(mask[draws]))
        counts = np.bincount(draws, minlength=16)[mask]
        self.assertGreater(stats.chisquare(counts).pvalue, 0.01)

    def test_mode_selected_at_test_temperature(self):
        rng = np.random.default_rng(2)
        values = np.array([0.5, 0.4, 0.1])
        hits = sum(boltzmann_sample(values, 0.002, rng) == 0 for _ in range(10000))
        self.assertGreaterEqual(hits, 9990)

    def test_non_positive_temperature(self):
        with self.assertRaises(InvalidArgumentError):
            boltzmann_probabilities(np.zeros(2), 0.0)

    def test_exploration_kinds(self):
        rng = np.random.default_rng(3)
        values = np.array([0.1, 0.9, 0.2])
        self.assertEqual(Exploration('greedy').choose(values, rng), 1)
        self.assertEqual(Exploration('epsilon-greedy', epsilon=0.0).choose(values, rng), 1)
        with self.assertRaises(InvalidArgumentError):
            Exploration('softmax')
