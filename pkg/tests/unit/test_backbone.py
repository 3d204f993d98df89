import unittest

import ddt
import numpy as np

from portrait_rgbd.backbone import (
    INPAINT_CHANNELS, JOINT_CHANNELS, NO_REFERENCE, ReferenceNet, UNet, UNetConfig, denoise, expand_channels,
    expand_input_channels, reference_features
)
from portrait_rgbd.errors import ConfigurationError, ShapeError
from portrait_rgbd.schedule import JointLatent, NoisePair


def tiny_config(**overrides):
    values = dict(base_channels=8, channel_mults=(1, 2), attention_factors=(1, 2), heads=2)
    values.update(overrides)
    return UNetConfig(**values)


def tiny_unet(seed=0, **overrides):
    return UNet(tiny_config(**overrides), np.random.default_rng(seed)).to_dtype(np.float64)


@ddt.ddt
class TestUNetConfig(unittest.TestCase):
    def test_site_counts_follow_attention_levels(self):
        config = tiny_config(channel_mults=(1, 2, 4), attention_factors=(2,))
        self.assertEqual(config.attention_sites, 3)
        self.assertEqual(config.block_sites, 7)
        attention, blocks = config.site_widths()
        self.assertEqual(attention, [16, 32, 16])
        self.assertEqual(blocks, [8, 16, 32, 32, 32, 16, 8])
        self.assertEqual(config.site_factors()[0], [2, 4, 2])

    def test_embedding_width_defaults_to_four_times_base(self):
        self.assertEqual(tiny_config().emb_dim, 32)

    @ddt.data(
        {'attention_factors': (8,)},
        {'in_channels': 5},
        {'out_channels': 12},
        {'heads': 3},
        {'channel_mults': ()},
    )
    def test_invalid_configs_are_rejected(self, overrides):
        with self.assertRaises(ConfigurationError):
            tiny_config(**overrides)

    def test_round_trips_through_dict(self):
        config = tiny_config(in_channels=8, out_channels=8)
        self.assertEqual(UNetConfig.from_dict(config.to_dict()), config)


class TestUNet(unittest.TestCase):
    def setUp(self):
        self.rng = np.random.default_rng(1)
        self.unet = tiny_unet()

    def test_output_keeps_input_resolution(self):
        out = self.unet(self.rng.standard_normal((2, 4, 4, 4)), np.array([3, 700]))
        self.assertEqual(out.shape, (2, 4, 4, 4))

    def test_wrong_input_channels_raise(self):
        with self.assertRaises(ShapeError):
            self.unet(np.zeros((1, 8, 4, 4)), 1)

    def test_odd_resolution_raises(self):
        with self.assertRaises(ShapeError):
            self.unet(np.zeros((1, 4, 3, 3)), 1)

    def test_missing_reference_must_be_explicit(self):
        with self.assertRaises(ConfigurationError):
            self.unet(np.zeros((1, 4, 4, 4)), 1, reference=None)

    def test_level_changes_the_prediction(self):
        x = self.rng.standard_normal((1, 4, 4, 4))
        self.assertFalse(np.allclose(self.unet(x, 1).data, self.unet(x, 900).data))

    def test_block_hook_sees_every_block_site(self):
        sites = []

        def hook(site, h):
            sites.append((site, h.shape[1]))
            return h

        self.unet(self.rng.standard_normal((1, 4, 4, 4)), 5, block_hook=hook)
        self.assertEqual(sites, [(0, 8), (1, 16), (2, 16), (3, 16), (4, 8)])

    def test_gradients_reach_every_parameter(self):
        out = self.unet(self.rng.standard_normal((1, 4, 4, 4)), 5)
        (out * out).mean().backward()
        missing = [name for name, parameter in self.unet.named_parameters() if parameter.grad is None]
        self.assertEqual(missing, [])


class TestReferenceNet(unittest.TestCase):
    def setUp(self):
        self.rng = np.random.default_rng(2)
        self.unet = expand_channels(tiny_unet())
        self.refnet = ReferenceNet.mirror(self.unet)

    def test_mirror_keeps_four_channels(self):
        self.assertEqual(self.refnet.config.in_channels, 4)
        self.assertEqual(self.refnet.config.out_channels, 4)
        np.testing.assert_array_equal(self.refnet.conv_in.weight.data, self.unet.conv_in.weight.data[:, :4])

    def test_features_cover_every_site(self):
        features = reference_features(self.rng.standard_normal((1, 4, 4, 4)), self.refnet, self.unet)
        self.assertEqual(len(features.attention), self.unet.config.attention_sites)
        self.assertEqual(len(features.blocks), self.unet.config.block_sites)
        self.assertEqual(features.attention[0].shape, (1, 8, 4, 4))

    def test_reference_changes_the_prediction(self):
        features = self.refnet.features(self.rng.standard_normal((1, 4, 4, 4)))
        x = self.rng.standard_normal((2, 8, 4, 4))
        with_reference = self.unet(x, 10, features).data
        without = self.unet(x, 10, NO_REFERENCE).data
        self.assertFalse(np.allclose(with_reference, without))

    def test_one_reference_is_shared_across_the_batch(self):
        features = self.refnet.features(self.rng.standard_normal((1, 4, 4, 4)))
        x = self.rng.standard_normal((1, 8, 4, 4))
        single = self.unet(x, 10, features).data
        batched = self.unet(np.concatenate([x, x]), 10, features).data
        np.testing.assert_allclose(batched[1], single[0], atol=1e-12)


class TestChannelExpansion(unittest.TestCase):
    def setUp(self):
        self.rng = np.random.default_rng(3)
        self.rgb = tiny_unet(seed=4)
        self.joint = expand_channels(self.rgb)

    def test_expanded_appearance_matches_rgb_model_for_twenty_probes(self):
        for _ in range(20):
            zx = self.rng.standard_normal((1, 4, 4, 4))
            zd = self.rng.standard_normal((1, 4, 4, 4))
            level = int(self.rng.integers(1, 1001))
            expected = self.rgb(zx, level).data
            out = self.joint(np.concatenate([zx, zd], axis=1), level).data
            self.assertLess(np.abs(out[:, :4] - expected).max(), 1e-6)
            np.testing.assert_allclose(out[:, 4:], out[:, :4], atol=1e-12)

    def test_new_input_weights_start_at_zero(self):
        weight = self.joint.conv_in.weight.data
        self.assertEqual(weight.shape[1], JOINT_CHANNELS)
        np.testing.assert_array_equal(weight[:, 4:], 0.0)

    def test_expanding_twice_raises(self):
        with self.assertRaises(ConfigurationError):
            expand_channels(self.joint)

    def test_inpaint_expansion_ignores_the_condition_at_init(self):
        inpaint = expand_input_channels(self.joint, INPAINT_CHANNELS)
        x = self.rng.standard_normal((1, 8, 4, 4))
        condition = self.rng.standard_normal((1, 10, 4, 4))
        out = inpaint(np.concatenate([x, condition], axis=1), 30).data
        np.testing.assert_allclose(out, self.joint(x, 30).data, atol=1e-12)

    def test_expansion_must_add_channels(self):
        with self.assertRaises(ConfigurationError):
            expand_input_channels(self.joint, JOINT_CHANNELS)

    def test_denoise_splits_the_prediction(self):
        z = JointLatent(self.rng.standard_normal((1, 4, 4, 4)), self.rng.standard_normal((1, 4, 4, 4)), 12)
        prediction = denoise(self.joint, z, NO_REFERENCE)
        self.assertIsInstance(prediction, NoisePair)
        np.testing.assert_allclose(prediction.ex, prediction.ed, atol=1e-12)
