import dataclasses
import itertools

import numpy as np
from django.test import SimpleTestCase
from numpy.testing import assert_allclose, assert_array_equal

from grasp_learning.asr import GraspAction, Observation
from grasp_learning.exceptions import InvalidActionError, InvalidArgumentError, SceneTooCrowdedError
from grasp_learning.simulator import (
    DISK, RECTANGLE, GraspEnvironment, GripperSpec, Scene, SceneObject, SimulatorConfig, action_mask, grasp_oracle,
    pixel_to_world, render_depth, render_rgb, reset_scene, resolve_tray_color, scene_from_document,
    scene_to_document, select_z, step, world_to_pixel,
)
from grasp_learning.verification import oracle_invariance_pairs


def rectangle(length, width, height=0.05, position=(0.0, 0.0), heading=(1.0, 0.0)):
    return SceneObject(shape=RECTANGLE, dims=(length, width), position=position, heading=heading, height=height)


def disk(radius, height=0.05, position=(0.0, 0.0)):
    return SceneObject(shape=DISK, dims=(radius,), position=position, heading=(1.0, 0.0), height=height)


class SceneGenerationTests(SimpleTestCase):
    def test_same_seed_same_scene(self):
        self.assertEqual(reset_scene(7), reset_scene(7))
        self.assertNotEqual(reset_scene(7), reset_scene(8))

    def test_empty_scene(self):
        scene = reset_scene(3, n_objects=0)
        self.assertEqual(scene.objects, ())
        assert_array_equal(render_depth(scene).data, 0.0)

    def test_placement_respects_tray_and_overlap(self):
        config = SimulatorConfig()
        scene = reset_scene(11, config=config)
        self.assertEqual(len(scene.objects), 15)
        limit = config.interior_half_width + 1e-12
        shapes = [obj.footprint() for obj in scene.objects]
        for shape in shapes:
            min_x, min_y, max_x, max_y = shape.bounds
            self.assertTrue(-limit <= min_x and max_x <= limit and -limit <= min_y and max_y <= limit)
        for a, b in itertools.combinations(shapes, 2):
            self.assertLess(a.intersection(b).area, config.overlap_threshold * min(a.area, b.area))

    def test_crowded_scene_raises(self):
        config = SimulatorConfig(tray_size=0.08, wall_margin=0.0, max_rejections=20)
        with self.assertRaises(SceneTooCrowdedError):
            reset_scene(0, n_objects=40, config=config)

    def test_invalid_object(self):
        with self.assertRaises(InvalidArgumentError):
            SceneObject(shape='cone', dims=(0.1,), position=(0, 0), heading=(1, 0), height=0.05)
        with self.assertRaises(InvalidArgumentError):
            disk(0.02, height=0.0)

    def test_document_keeps_objects(self):
        scene = reset_scene(5, n_objects=4)
        self.assertEqual(scene_from_document(scene_to_document(scene)), scene)


class RenderingTests(SimpleTestCase):
    def test_disk_heights(self):
        config = SimulatorConfig()
        depth = render_depth(Scene(objects=(disk(0.03),)), config).data[0]
        self.assertEqual(depth[48, 48], 0.05)
        self.assertEqual(depth[0, 0], 0.0)
        self.assertEqual(set(np.unique(depth)), {0.0, 0.05})

    def test_overlap_reads_taller_object(self):
        config = SimulatorConfig()
        objects = (disk(0.03, height=0.04), rectangle(0.1, 0.02, height=0.07))
        depth = render_depth(Scene(objects=objects), config).data[0]
        self.assertEqual(depth[48, 48], 0.07)
        xs = (np.arange(96) - 47.5) * config.resolution
        xx, yy = np.meshgrid(xs, -xs)
        expected = np.maximum(np.where(objects[0].covers(xx, yy), 0.04, 0.0),
                              np.where(objects[1].covers(xx, yy), 0.07, 0.0))
        assert_array_equal(depth, expected)

    def test_transparent_objects_have_no_depth(self):
        glass = dataclasses.replace(disk(0.03), transparent=True)
        self.assertEqual(render_depth(Scene(objects=(glass,))).data.max(), 0.0)
        self.assertGreater(render_rgb(Scene(objects=(glass,))).data.max(), 0.0)

    def test_rgb_tray_colors(self):
        assert_array_equal(render_rgb(Scene()).data, 0.0)
        mean = render_rgb(Scene(), tray_color='mean')
        assert_allclose(mean.data, 0.8)
        self.assertEqual(mean.background, (0.8, 0.8, 0.8))

    def test_unknown_tray_color(self):
        with self.assertRaises(InvalidArgumentError):
            resolve_tray_color('purple')


class MaskAndHeightTests(SimpleTestCase):
    def test_single_pixel_dilates_to_disk(self):
        data = np.zeros((1, 96, 96))
        data[0, 48, 48] = 0.01
        mask = action_mask(Observation(data))
        self.assertEqual(int(mask.sum()), 49)
        self.assertTrue(mask[48, 44] and mask[44, 48] and not mask[45, 45])

    def test_threshold(self):
        data = np.zeros((1, 96, 96))
        data[0, 48, 48] = 0.004
        self.assertFalse(action_mask(Observation(data)).any())

    def test_mask_needs_depth(self):
        with self.assertRaises(InvalidArgumentError):
            action_mask(Observation(np.zeros((3, 8, 8)), modality='color'))

    def test_select_z_constant(self):
        self.assertAlmostEqual(select_z(Observation(np.full((1, 16, 16), 0.03)), (8, 8)), 0.03)

    def test_select_z_partial_window(self):
        data = np.zeros((1, 16, 16))
        window = np.zeros(25)
        window[:13] = 0.04
        data[0, 6:11, 6:11] = window.reshape(5, 5)
        self.assertAlmostEqual(select_z(Observation(data), (8, 8)), 0.0208)

    def test_select_z_corner(self):
        data = np.zeros((1, 16, 16))
        data[0, :3, :3] = np.arange(9).reshape(3, 3) / 100
        self.assertAlmostEqual(select_z(Observation(data), (0, 0)), 0.04)


class OracleTests(SimpleTestCase):
    gripper = GripperSpec()

    def test_short_axis_grasp_succeeds(self):
        scene = Scene(objects=(rectangle(0.12, 0.03),))
        result = grasp_oracle(scene, (0.0, 0.0), (0.0, 1.0), 0.02, self.gripper, 0.004)
        self.assertTrue(result.success)
        self.assertFalse(result.collision)
        self.assertAlmostEqual(result.width, 0.03)

    def test_long_axis_grasp_fails(self):
        scene = Scene(objects=(rectangle(0.12, 0.03),))
        self.assertFalse(grasp_oracle(scene, (0.0, 0.0), (1.0, 0.0), 0.02, self.gripper).success)

    def test_empty_space(self):
        result = grasp_oracle(Scene(), (0.05, 0.05), (1.0, 0.0), 0.0, self.gripper)
        self.assertFalse(result.success)
        self.assertFalse(result.collision)

    def test_outside_tray(self):
        with self.assertRaises(InvalidActionError):
            grasp_oracle(Scene(), (0.2, 0.0), (1.0, 0.0), 0.0, self.gripper)

    def test_too_thin_object(self):
        scene = Scene(objects=(rectangle(0.1, 0.004),))
        self.assertFalse(grasp_oracle(scene, (0.0, 0.0), (0.0, 1.0), 0.01, self.gripper).success)

    def test_invariant_under_quarter_turns(self):
        self.assertEqual(oracle_invariance_pairs(60, seed=4), 0)


class StepTests(SimpleTestCase):
    def test_clean_grasp(self):
        config = SimulatorConfig()
        scene = Scene(objects=(rectangle(0.12, 0.03), disk(0.02, position=(0.09, 0.09))), seed=1)
        result = step(scene, GraspAction((48, 48), 4), config)
        self.assertEqual(result.reward, 1.0)
        self.assertTrue(result.success)
        self.assertEqual(len(result.scene.objects), 1)
        self.assertEqual(result.scene.attempts_made, 1)
        self.assertAlmostEqual(result.z, 0.04)

    def test_collision_penalty(self):
        scene = Scene(objects=(rectangle(0.1, 0.08), disk(0.02, position=(0.09, 0.09))))
        action = GraspAction((48, 48), 4)
        penalised = step(scene, action, SimulatorConfig(collision_penalty=True))
        self.assertTrue(penalised.success and penalised.collision)
        self.assertEqual(penalised.reward, 0.8)
        self.assertEqual(step(scene, action, SimulatorConfig()).reward, 1.0)

    def test_attempt_cap(self):
        scene = Scene(objects=(disk(0.02),), attempts_made=29)
        result = step(scene, GraspAction((2, 2), 0), SimulatorConfig())
        self.assertEqual(result.reward, 0.0)
        self.assertTrue(result.done)

    def test_last_object_ends_episode(self):
        result = step(Scene(objects=(rectangle(0.12, 0.03),)), GraspAction((48, 48), 4), SimulatorConfig())
        self.assertTrue(result.done)

    def test_pixel_world_round_trip(self):
        config = SimulatorConfig()
        for pixel in [(0, 0), (10, 80), (95, 95)]:
            self.assertEqual(world_to_pixel(pixel_to_world(pixel, config), config), pixel)
        with self.assertRaises(InvalidActionError):
            pixel_to_world((96, 0), config)


class EnvironmentTests(SimpleTestCase):
    def test_reproducible_episodes(self):
        config = SimulatorConfig(image_size=64, n_objects=5)
        first, second = GraspEnvironment(config, seed=3), GraspEnvironment(config, seed=3)
        self.assertEqual(first.scene, second.scene)
        assert_array_equal(first.observe().data, second.observe().data)

    def test_empty_scene_is_replaced(self):
        config = SimulatorConfig(image_size=64, n_objects=5)
        environment = GraspEnvironment(config, seed=3)
        environment.scene = Scene()
        self.assertTrue(environment.ready_mask().any())
        self.assertEqual(len(environment.scene.objects), 5)

    def test_oracle_candidates_succeed(self):
        config = SimulatorConfig(image_size=64, n_objects=6)
        environment = GraspEnvironment(config, seed=0)
        for action in environment.oracle_candidates()[:5]:
            self.assertTrue(step(environment.scene, action, config).success)
