import numpy as np
from django.test import SimpleTestCase

from grasp_learning import autodiff
from grasp_learning.asr import GraspAction, ModelConfig, Observation
from grasp_learning.bandit import ReplayBuffer, TrainerConfig, Transition
from grasp_learning.exceptions import ConfigurationError, InvalidArgumentError
from grasp_learning.exploration import BOLTZMANN, EPSILON_GREEDY, GREEDY
from grasp_learning.networks import PLAIN
from grasp_learning.variants import (
    AgentVariant, ChannelQModel, RotatedInputQModel, build_variant, epsilon_schedule, get_variant,
    rad_augment, reference_counts, soft_equ_augment, variant_names,
)

SMALL = ModelConfig(q1_widths=(2, 2), q2_widths=(1, 1), crop_size=16)
TRAINER = TrainerConfig(batch_size=4, buffer_capacity=40, augmentation_copies=2, off_policy_samples=2)


def observation(seed=0, size=16):
    return Observation(np.abs(np.random.default_rng(seed).normal(scale=0.02, size=(1, size, size))))


def filled_buffer(count=6):
    buffer = ReplayBuffer(40)
    for seed in range(count):
        buffer.add(Transition(obs=observation(seed), action=GraspAction((8, 8), seed % 8), reward=float(seed % 2)))
    return buffer


class VariantFixture(SimpleTestCase):
    def setUp(self):
        context = autodiff.precision('float32')
        context.__enter__()
        self.addCleanup(context.__exit__, None, None, None)

    def build(self, name):
        return build_variant(name, model_config=SMALL, trainer=TRAINER, rng=np.random.default_rng(0))


class RegistryTests(SimpleTestCase):
    def test_all_named_variants_registered(self):
        expected = {
            'ours', 'no-equ', 'no-asr', 'rot-equ', 'no-opt', 'asr-loss', 'no-prioritize', 'e-greedy',
            'no-data-aug', 'no-softmax', 'cyclic-q2', 'no-collision-penalty', 'vpg', 'fcgqcnn', 'vpg-rad',
            'fcgqcnn-rad', 'vpg-soft-equ', 'fcgqcnn-soft-equ',
        }
        self.assertEqual(set(variant_names()), expected)

    def test_unknown_variant(self):
        with self.assertRaises(ConfigurationError):
            get_variant('shiny')

    def test_baselines_use_epsilon_greedy(self):
        for name in ('vpg', 'fcgqcnn-rad', 'vpg-soft-equ'):
            variant = get_variant(name)
            self.assertEqual(variant.exploration, EPSILON_GREEDY)
            self.assertFalse(variant.prioritize or variant.data_aug or variant.softmax_head)

    def test_invalid_combinations(self):
        with self.assertRaises(ConfigurationError):
            AgentVariant('broken', model_kind='vpg', loss='original-asr')
        with self.assertRaises(ConfigurationError):
            AgentVariant('broken', augmentation='rad', augmentation_n=4)
        with self.assertRaises(ConfigurationError):
            AgentVariant('broken', augmentation='rad', augmentation_n=3, data_aug=False)

    def test_collision_penalty_override(self):
        trainer = TrainerConfig(collision_penalty=True)
        self.assertTrue(get_variant('ours').collision_penalty_for(trainer))
        self.assertFalse(get_variant('no-collision-penalty').collision_penalty_for(trainer))


class EpsilonScheduleTests(SimpleTestCase):
    def test_linear_decay(self):
        self.assertAlmostEqual(epsilon_schedule(0), 0.5)
        self.assertAlmostEqual(epsilon_schedule(250), 0.3)
        self.assertAlmostEqual(epsilon_schedule(500), 0.1)
        self.assertAlmostEqual(epsilon_schedule(5000), 0.1)

    def test_negative_index(self):
        with self.assertRaises(InvalidArgumentError):
            epsilon_schedule(-1)


class BuildTests(VariantFixture):
    def test_ours_uses_boltzmann(self):
        agent = self.build('ours')
        self.assertEqual(agent.exploration().kind, BOLTZMANN)
        self.assertEqual(agent.exploration(evaluation=True).tau, TRAINER.tau_test)
        self.assertEqual(agent.n_theta, 8)

    def test_no_equ_matches_parameter_counts(self):
        config = ModelConfig(q1_widths=(4, 8), q2_widths=(2, 4), crop_size=16)
        q1_count, q2_count = reference_counts(config, 'depth')
        agent = build_variant('no-equ', model_config=config, trainer=TRAINER, rng=np.random.default_rng(0))
        self.assertIs(agent.model.q1.group, PLAIN)
        self.assertLess(abs(agent.model.q1.parameter_count() - q1_count) / q1_count, 0.15)
        self.assertLess(abs(agent.model.q2.parameter_count() - q2_count) / q2_count, 0.15)

    def test_no_asr_scores_every_orientation(self):
        agent = self.build('no-asr')
        self.assertIsInstance(agent.model, ChannelQModel)
        self.assertEqual(agent.model.qmaps(observation()).shape, (8, 16, 16))

    def test_vpg_rotates_its_input(self):
        agent = self.build('vpg')
        self.assertIsInstance(agent.model, RotatedInputQModel)
        self.assertEqual(agent.model.qmaps(observation()).shape, (8, 16, 16))

    def test_fcgqcnn_channels(self):
        agent = self.build('fcgqcnn')
        self.assertEqual(agent.model.network.out_channels, 8)

    def test_baseline_exploration(self):
        agent = self.build('vpg')
        self.assertEqual(agent.exploration(grasp_index=0).epsilon, 0.5)
        self.assertEqual(agent.exploration(evaluation=True).kind, GREEDY)

    def test_actions_stay_in_mask(self):
        mask = np.zeros((16, 16), dtype=bool)
        mask[5, 6] = True
        rng = np.random.default_rng(1)
        for name in ('ours', 'fcgqcnn'):
            action = self.build(name).act(observation(), mask, rng)
            self.assertEqual(action.pixel, (5, 6))
            self.assertTrue(0 <= action.theta_class < 8)

    def test_pixel_agent_loss_is_finite(self):
        agent = self.build('fcgqcnn')
        buffer = filled_buffer()
        breakdown = agent.loss([buffer[i] for i in range(4)], np.random.default_rng(0))
        self.assertTrue(np.isfinite(breakdown.value))
        self.assertEqual(breakdown.l1_prime, 0.0)


class MinibatchAugmentationTests(VariantFixture):
    def test_rad_returns_n_batches(self):
        buffer = filled_buffer()
        batch = [buffer[i] for i in range(4)]
        batches = rad_augment(batch, 4, np.random.default_rng(0), n_theta=8)
        self.assertEqual(len(batches), 4)
        self.assertTrue(all(len(b) == 4 for b in batches))
        for augmented in batches:
            self.assertEqual([t.reward for t in augmented], [t.reward for t in batch])

    def test_soft_equ_replicates_sources(self):
        batch = soft_equ_augment(filled_buffer(), 16, 4, np.random.default_rng(0), n_theta=8)
        self.assertEqual(len(batch), 16)
        for start in range(0, 16, 4):
            self.assertEqual(len({t.reward for t in batch[start:start + 4]}), 1)

    def test_soft_equ_factor_must_divide_batch(self):
        with self.assertRaises(InvalidArgumentError):
            soft_equ_augment(filled_buffer(), 16, 3, np.random.default_rng(0), n_theta=8)

    def test_soft_equ_factor_one_is_plain(self):
        buffer = filled_buffer()
        batch = soft_equ_augment(buffer, 4, 1, np.random.default_rng(0), n_theta=8)
        self.assertTrue(all(any(t is buffer[i] for i in range(len(buffer))) for t in batch))

    def test_rad_agent_takes_n_steps(self):
        agent = self.build('fcgqcnn-rad')
        losses = agent.learn(filled_buffer(), agent.optimizer(), np.random.default_rng(0))
        self.assertEqual(len(losses), 8)
