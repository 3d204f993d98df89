import unittest

import ddt
import numpy as np

from portrait_rgbd.errors import CheckpointError, MaskError, ShapeError
from portrait_rgbd.inpaint import (
    DEPTH_TO_IMAGE, IMAGE_TO_DEPTH, JOINT, RANDOM_TRAINING, MaskPair, generate_from_depth, inpaint,
    inpaint_condition, make_mask_pair, make_region_mask, predict_depth, reimpose
)
from portrait_rgbd.schedule import JointLatent, NoisePair, make_schedule
from portrait_rgbd.synthdata import FAR, NEAR

from .base_test import IMAGE_SIZE, LATENT_SIZE, tiny_bundle


@ddt.ddt
class TestMasks(unittest.TestCase):
    @ddt.data((JOINT, 1.0, 1.0), (IMAGE_TO_DEPTH, 0.0, 1.0), (DEPTH_TO_IMAGE, 1.0, 0.0))
    @ddt.unpack
    def test_fixed_modes(self, mode, mx, md):
        masks = make_mask_pair(mode, size=(4, 5))
        self.assertEqual(masks.mx.shape, (1, 4, 5))
        np.testing.assert_array_equal(masks.mx, mx)
        np.testing.assert_array_equal(masks.md, md)

    def test_random_masks_never_condition_everything(self):
        rng = np.random.default_rng(0)
        kinds = set()
        for _ in range(300):
            masks = make_mask_pair(RANDOM_TRAINING, rng, size=(4, 4))
            masks.validate()
            self.assertTrue(masks.mx.any() or masks.md.any())
            for mask in masks:
                total = mask.sum()
                kinds.add('ones' if total == 16 else 'zeros' if total == 0 else 'rectangle')
        self.assertEqual(kinds, {'ones', 'zeros', 'rectangle'})

    def test_random_mask_kinds_follow_their_rates_in_both_domains(self):
        rng = np.random.default_rng(0)
        draws = 10000
        counts = {'mx': {}, 'md': {}}
        for _ in range(draws):
            masks = make_mask_pair(RANDOM_TRAINING, rng, size=(4, 4))
            for name, mask in zip(masks._fields, masks):
                total = mask.sum()
                kind = 'ones' if total == 16 else 'zeros' if total == 0 else 'rectangle'
                counts[name][kind] = counts[name].get(kind, 0) + 1
        for name in ('mx', 'md'):
            for kind, rate in (('ones', 0.3), ('zeros', 0.3), ('rectangle', 0.4)):
                self.assertAlmostEqual(counts[name].get(kind, 0) / draws, rate, delta=0.02,
                                       msg='{} {}'.format(name, kind))

    @ddt.data((1, 1), (1, 2), (2, 1))
    def test_random_masks_on_tiny_grids(self, size):
        rng = np.random.default_rng(5)
        if size == (1, 1):
            with self.assertRaises(MaskError):
                make_mask_pair(RANDOM_TRAINING, rng, size=size)
            return
        for _ in range(50):
            masks = make_mask_pair(RANDOM_TRAINING, rng, size=size)
            self.assertTrue(masks.mx.any() or masks.md.any())

    def test_unknown_mode_raises(self):
        with self.assertRaises(MaskError):
            make_mask_pair('sketch')

    def test_non_binary_mask_is_rejected(self):
        with self.assertRaises(MaskError):
            MaskPair(np.full((1, 2, 2), 0.5), np.ones((1, 2, 2))).validate()

    def test_mismatched_masks_are_rejected(self):
        with self.assertRaises(ShapeError):
            MaskPair(np.ones((1, 2, 2)), np.ones((1, 3, 3))).validate()

    def test_region_mask_uses_strict_majority(self):
        pixels = np.zeros((16, 16))
        pixels[:8, :8] = 1.0
        pixels[:8, 8:8 + 4] = 1.0
        pixels[8:, :8][:5] = 1.0
        region = make_region_mask(pixels)
        self.assertEqual(region.shape, (1, 2, 2))
        np.testing.assert_array_equal(region[0], [[1.0, 0.0], [1.0, 0.0]])

    def test_region_mask_needs_whole_blocks(self):
        with self.assertRaises(ShapeError):
            make_region_mask(np.ones((12, 16)))


class TestConditioning(unittest.TestCase):
    def setUp(self):
        rng = np.random.default_rng(1)
        self.noisy = JointLatent(rng.standard_normal((1, 4, 2, 2)), rng.standard_normal((1, 4, 2, 2)), 5)
        self.known = JointLatent(rng.standard_normal((1, 4, 2, 2)), rng.standard_normal((1, 4, 2, 2)), 0)
        self.masks = make_mask_pair(IMAGE_TO_DEPTH, size=(2, 2))

    def test_condition_layout(self):
        condition = inpaint_condition(self.noisy, self.known, MaskPair(self.masks.mx[None], self.masks.md[None]))
        self.assertEqual(condition.shape, (1, 18, 2, 2))
        np.testing.assert_array_equal(condition[:, :4], self.noisy.zx)
        np.testing.assert_array_equal(condition[:, 4:8], self.noisy.zd)
        np.testing.assert_array_equal(condition[:, 8], 0.0)
        np.testing.assert_array_equal(condition[:, 9], 1.0)
        np.testing.assert_allclose(condition[:, 10:14], self.known.zx)
        np.testing.assert_array_equal(condition[:, 14:18], 0.0)

    def test_reimpose_holds_known_regions_at_the_renoised_latent(self):
        schedule = make_schedule(10, 1e-4, 0.2)
        noise = NoisePair(np.ones((1, 4, 2, 2)), np.ones((1, 4, 2, 2)))
        result = reimpose(self.noisy, self.known, self.masks, noise, schedule)
        alpha_bar = schedule.alpha_bar[5]
        np.testing.assert_allclose(result.zx, np.sqrt(alpha_bar) * self.known.zx + np.sqrt(1 - alpha_bar), rtol=1e-6)
        np.testing.assert_array_equal(result.zd, self.noisy.zd)

    def test_reimpose_at_level_zero_is_the_known_latent(self):
        schedule = make_schedule(10, 1e-4, 0.2)
        noise = NoisePair(np.ones((1, 4, 2, 2)), np.ones((1, 4, 2, 2)))
        result = reimpose(self.noisy._replace(level=0), self.known, self.masks, noise, schedule)
        np.testing.assert_array_equal(result.zx, self.known.zx)


class TestInpaint(unittest.TestCase):
    def setUp(self):
        self.bundle = tiny_bundle('inpaint')
        rng = np.random.default_rng(2)
        self.rgb = rng.uniform(-1, 1, (3, IMAGE_SIZE, IMAGE_SIZE)).astype(np.float32)
        self.depth = rng.uniform(NEAR, FAR, (IMAGE_SIZE, IMAGE_SIZE))

    def test_image_to_depth_keeps_the_appearance_round_trip_exactly(self):
        result = inpaint(self.bundle, make_mask_pair(IMAGE_TO_DEPTH, size=(LATENT_SIZE, LATENT_SIZE)),
                         known_rgb=self.rgb, rng=np.random.default_rng(0))
        round_trip = self.bundle.vae.decode(self.bundle.vae.encode(self.rgb).values[None])[0]
        np.testing.assert_array_equal(result.rgb, round_trip)
        self.assertEqual(result.depth.shape, (IMAGE_SIZE, IMAGE_SIZE))
        self.assertEqual(result.latent.level, 0)

    def test_depth_to_image_keeps_the_depth_round_trip_exactly(self):
        result = inpaint(self.bundle, make_mask_pair(DEPTH_TO_IMAGE, size=(LATENT_SIZE, LATENT_SIZE)),
                         known_depth=self.depth, reference_rgb=self.rgb, rng=np.random.default_rng(0))
        round_trip = self.bundle.vae.decode_depth(
            self.bundle.vae.encode_depth(self.depth, self.bundle.norm).values[None], self.bundle.norm)[0]
        np.testing.assert_array_equal(result.depth, round_trip)
        self.assertEqual(result.rgb.shape, (3, IMAGE_SIZE, IMAGE_SIZE))

    def test_predict_depth_stays_in_the_normalized_range(self):
        depth = predict_depth(self.rgb, self.bundle, rng=np.random.default_rng(0))
        self.assertEqual(depth.shape, (IMAGE_SIZE, IMAGE_SIZE))
        self.assertTrue(np.all((depth >= NEAR - 1e-6) & (depth <= FAR + 1e-6)))

    def test_same_seed_gives_the_same_depth(self):
        first = predict_depth(self.rgb, self.bundle, rng=np.random.default_rng(9))
        second = predict_depth(self.rgb, self.bundle, rng=np.random.default_rng(9))
        np.testing.assert_array_equal(first, second)

    def test_generate_from_depth_returns_an_image(self):
        rgb = generate_from_depth(self.depth, self.rgb, self.bundle, rng=np.random.default_rng(0))
        self.assertEqual(rgb.shape, (3, IMAGE_SIZE, IMAGE_SIZE))
        self.assertTrue(np.all(np.abs(rgb) <= 1.0))

    def test_region_editing_accepts_a_pixel_mask(self):
        region = np.zeros((IMAGE_SIZE, IMAGE_SIZE))
        region[16:, :] = 1.0
        rgb = generate_from_depth(self.depth, self.rgb, self.bundle, rng=np.random.default_rng(0), region=region)
        self.assertEqual(rgb.shape, (3, IMAGE_SIZE, IMAGE_SIZE))

    def test_conditioning_on_a_missing_image_raises(self):
        with self.assertRaises(MaskError):
            inpaint(self.bundle, make_mask_pair(IMAGE_TO_DEPTH, size=(LATENT_SIZE, LATENT_SIZE)),
                    known_depth=self.depth)

    def test_mask_at_the_wrong_resolution_raises(self):
        with self.assertRaises(ShapeError):
            inpaint(self.bundle, make_mask_pair(IMAGE_TO_DEPTH, size=(2, 2)), known_rgb=self.rgb)

    def test_joint_bundle_cannot_inpaint(self):
        with self.assertRaises(CheckpointError):
            predict_depth(self.rgb, tiny_bundle('joint'))
