import os
import shutil
import tempfile
import unittest

import numpy as np

from portrait_rgbd import rasters
from portrait_rgbd.errors import DataError
from portrait_rgbd.motion import AudioTrack
from portrait_rgbd.synthdata import FAR, NEAR


class TestRasters(unittest.TestCase):
    def setUp(self):
        self.directory = tempfile.mkdtemp()
        self.rng = np.random.default_rng(0)

    def tearDown(self):
        shutil.rmtree(self.directory)

    def path(self, name):
        return os.path.join(self.directory, name)

    def test_depth_is_stored_with_sixteen_bits(self):
        depth = self.rng.uniform(NEAR, FAR, (8, 6))
        rasters.write_depth(self.path('d.png'), depth, NEAR, FAR)
        restored = rasters.read_depth(self.path('d.png'), NEAR, FAR)
        self.assertEqual(restored.shape, (8, 6))
        step = (FAR - NEAR) / rasters.DEPTH_LEVELS
        self.assertLessEqual(np.abs(restored - depth).max(), 0.5 * step + 1e-12)

    def test_depth_outside_the_range_is_clamped(self):
        np.testing.assert_array_equal(rasters.quantize_depth([NEAR - 1.0, FAR + 1.0], NEAR, FAR),
                                      [0, rasters.DEPTH_LEVELS])

    def test_rgb_keeps_eight_bit_levels(self):
        levels = self.rng.integers(0, 256, (3, 4, 5))
        rgb = levels / 255.0 * 2.0 - 1.0
        rasters.write_rgb(self.path('c.png'), rgb)
        np.testing.assert_allclose(rasters.read_rgb(self.path('c.png')), rgb, atol=1e-6)

    def test_masks_and_labels(self):
        mask = self.rng.random((5, 7)) > 0.5
        rasters.write_mask(self.path('m.png'), mask)
        np.testing.assert_array_equal(rasters.read_mask(self.path('m.png')), mask)
        labels = self.rng.integers(0, 5, (5, 7))
        rasters.write_labels(self.path('l.png'), labels)
        np.testing.assert_array_equal(rasters.read_labels(self.path('l.png')), labels)

    def test_audio_features(self):
        track = AudioTrack(self.rng.standard_normal((6, 3)).astype(np.float32), frame_rate=30.0)
        rasters.write_audio(self.path('a.afeat'), track)
        restored = rasters.read_audio(self.path('a.afeat'))
        np.testing.assert_array_equal(restored.features, track.features)
        self.assertEqual(restored.frame_rate, 30.0)

    def test_foreign_audio_file_raises(self):
        with open(self.path('a.afeat'), 'wb') as handle:
            handle.write(b'RIFF0000WAVE')
        with self.assertRaises(DataError):
            rasters.read_audio(self.path('a.afeat'))

    def test_missing_image_raises(self):
        with self.assertRaises(DataError):
            rasters.read_rgb(self.path('absent.png'))
