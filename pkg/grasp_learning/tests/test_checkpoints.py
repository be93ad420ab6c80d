import tempfile
from pathlib import Path

import imageio.v3 as iio
import numpy as np
from django.test import SimpleTestCase
from numpy.testing import assert_array_equal

from grasp_learning.checkpoints import MAGIC, load_checkpoint, save_checkpoint, split_state
from grasp_learning.exceptions import CheckpointError, ShapeError
from grasp_learning.imaging import action_overlay, to_graymap, to_pixmap, write_graymap, write_mask, write_pixmap


class TempDirTestCase(SimpleTestCase):
    def setUp(self):
        directory = tempfile.TemporaryDirectory()
        self.addCleanup(directory.cleanup)
        self.tmp = Path(directory.name)


class CheckpointTests(TempDirTestCase):
    def test_round_trip(self):
        arrays = {
            'q1.head.base': np.random.default_rng(0).normal(size=(2, 3, 1, 1)).astype(np.float32),
            'optim/step': np.array([12]),
            'scalar': np.float64(0.25) * np.ones(()),
        }
        loaded = load_checkpoint(save_checkpoint(self.tmp / 'runs' / 'a.ckpt', arrays))
        self.assertEqual(list(loaded), list(arrays))
        for name, value in arrays.items():
            assert_array_equal(loaded[name], value)
        self.assertEqual(loaded['q1.head.base'].dtype, np.float32)
        self.assertEqual(loaded['optim/step'].dtype, np.int64)

    def test_missing_file(self):
        with self.assertRaises(CheckpointError):
            load_checkpoint(self.tmp / 'nothing.ckpt')

    def test_bad_magic(self):
        path = self.tmp / 'bad.ckpt'
        path.write_bytes(b'NOTACKPT' + bytes(8))
        with self.assertRaises(CheckpointError):
            load_checkpoint(path)

    def test_truncated(self):
        path = save_checkpoint(self.tmp / 'a.ckpt', {'w': np.ones((4, 4))})
        path.write_bytes(path.read_bytes()[:-8])
        with self.assertRaises(CheckpointError):
            load_checkpoint(path)

    def test_trailing_bytes(self):
        path = save_checkpoint(self.tmp / 'a.ckpt', {'w': np.ones(2)})
        path.write_bytes(path.read_bytes() + b'x')
        with self.assertRaises(CheckpointError):
            load_checkpoint(path)

    def test_unsupported_dtype(self):
        with self.assertRaises(CheckpointError):
            save_checkpoint(self.tmp / 'a.ckpt', {'flags': np.ones(2, dtype=bool)})

    def test_header(self):
        path = save_checkpoint(self.tmp / 'a.ckpt', {})
        self.assertTrue(path.read_bytes().startswith(MAGIC))
        self.assertEqual(load_checkpoint(path), {})

    def test_split_state(self):
        weights, optimizer = split_state({'q1.w': np.ones(1), 'optim/m0': np.zeros(1)})
        self.assertEqual(list(weights), ['q1.w'])
        self.assertEqual(list(optimizer), ['optim/m0'])


class ImagingTests(TempDirTestCase):
    def test_graymap_scaling(self):
        assert_array_equal(to_graymap(np.array([[0.0, 0.5], [1.0, 2.0]]), 0.0, 1.0), [[0, 128], [255, 255]])

    def test_constant_map_is_mid_gray(self):
        assert_array_equal(to_graymap(np.full((3, 3), 0.5)), 128)

    def test_shapes_checked(self):
        with self.assertRaises(ShapeError):
            to_graymap(np.zeros(4))
        with self.assertRaises(ShapeError):
            to_pixmap(np.zeros((1, 4, 4)))

    def test_written_files(self):
        gray = write_graymap(self.tmp / 'qmap', np.arange(16.0).reshape(4, 4))
        self.assertEqual(gray.suffix, '.pgm')
        self.assertEqual(iio.imread(gray).shape, (4, 4))
        mask = write_mask(self.tmp / 'mask', np.eye(3, dtype=bool))
        assert_array_equal(iio.imread(mask), np.eye(3) * 255)
        color = write_pixmap(self.tmp / 'rgb', np.ones((3, 2, 5)))
        self.assertEqual(iio.imread(color).shape, (2, 5, 3))

    def test_overlay_marks_pixel(self):
        rgb = action_overlay(np.zeros((9, 9)), (4, 4), normal=(1.0, 0.0))
        self.assertEqual(tuple(rgb[4, 4]), (255, 0, 0))
        self.assertEqual(tuple(rgb[4, 7]), (255, 255, 0))
        self.assertEqual(tuple(rgb[1, 4]), (128, 128, 128))
