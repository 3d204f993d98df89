import os
import shutil
import tempfile
import unittest

import numpy as np

from portrait_rgbd.backbone import CONCAT_REFERENCE_CHANNELS
from portrait_rgbd.bundle import CONCAT
from portrait_rgbd.checkpoint import load_bundle, load_checkpoint
from portrait_rgbd.config import default_config
from portrait_rgbd.dataloader import LatentBatch, SampleSet
from portrait_rgbd.errors import CheckpointError, ConfigurationError
from portrait_rgbd.optim import Adam
from portrait_rgbd.synthdata import STUDIO, SyntheticAudioProvider, generate_samples, make_clip
from portrait_rgbd.training import (
    dataset_root, diffusion_loss, expand_bundle, expansion_probe, generate_rgbd, train_stage, trainable_parameters,
    verify_probe
)
from portrait_rgbd.utils import read_csv
from portrait_rgbd.vae import estimate_latent_scale, vae_batch

from .base_test import IMAGE_SIZE, LATENT_SIZE, tiny_bundle


def tiny_config(stage, output, parent=''):
    config = default_config(stage, output_dir=output, parent=parent)
    config.vae.update([('base_channels', 8)])
    config.unet.update([('base_channels', 8), ('channel_mults', '1,2'), ('attention_factors', '1,2'), ('heads', 2)])
    config.schedule_section.update([('levels', 8), ('beta_max', 0.2)])
    config.train.update([('steps', 2), ('batch_size', 2), ('learning_rate', 1e-3), ('sample_steps', 2)])
    config.motion.update([('audio_dim', 4), ('heads', 2), ('frames_per_seq', 2), ('motion_frames', 1)])
    return config.validate()


class TestExpansion(unittest.TestCase):
    def setUp(self):
        self.rgb = tiny_bundle('rgb', refnet=False)

    def test_expanded_halves_reproduce_the_rgb_model(self):
        joint = expand_bundle(self.rgb)
        probe = expansion_probe(self.rgb, joint)
        self.assertEqual(joint.stage, 'joint')
        self.assertIsNotNone(joint.refnet)
        self.assertEqual((joint.unet.config.in_channels, joint.unet.config.out_channels), (8, 8))
        self.assertLess(probe['max_abs_diff'], 1e-5)
        self.assertEqual(len(probe['levels']), 20)

    def test_tampered_probe_fails_verification(self):
        joint = expand_bundle(self.rgb)
        probe = expansion_probe(self.rgb, joint)
        probe['expected'] = [value + 1.0 for value in probe['expected']]
        with self.assertRaises(CheckpointError):
            verify_probe(joint, probe)

    def test_concatenated_reference_widens_the_input(self):
        joint = expand_bundle(self.rgb, CONCAT)
        self.assertIsNone(joint.refnet)
        self.assertEqual(joint.unet.config.in_channels, CONCAT_REFERENCE_CHANNELS)

    def test_only_rgb_bundles_expand(self):
        with self.assertRaises(CheckpointError):
            expand_bundle(tiny_bundle('joint'))


class TestLosses(unittest.TestCase):
    def batch(self, rng):
        shape = (2, 4, LATENT_SIZE, LATENT_SIZE)
        return LatentBatch(rng.standard_normal(shape), rng.standard_normal(shape), rng.standard_normal(shape),
                           np.arange(2))

    def test_every_denoiser_stage_has_a_finite_loss(self):
        rng = np.random.default_rng(0)
        for stage in ('rgb', 'joint', 'inpaint'):
            bundle = tiny_bundle(stage)
            loss = diffusion_loss(bundle, self.batch(rng), rng)
            self.assertEqual(loss.shape, ())
            self.assertTrue(np.isfinite(loss.data))

    def test_joint_loss_reaches_the_reference_network(self):
        rng = np.random.default_rng(1)
        bundle = tiny_bundle('joint')
        parameters = trainable_parameters(bundle)
        diffusion_loss(bundle, self.batch(rng), rng).backward()
        self.assertEqual(len(parameters), len(bundle.unet.parameters()) + len(bundle.refnet.parameters()))
        self.assertTrue(any(parameter.grad is not None for parameter in bundle.refnet.parameters()))

    def test_repeated_steps_on_one_batch_reduce_the_loss(self):
        bundle = tiny_bundle('rgb', refnet=False)
        batch = self.batch(np.random.default_rng(3))
        optimizer = Adam(trainable_parameters(bundle), 2e-3)
        losses = []
        for _ in range(30):
            optimizer.zero_grad()
            loss = diffusion_loss(bundle, batch, np.random.default_rng(4))
            loss.backward()
            optimizer.step()
            losses.append(float(loss.data))
        self.assertLess(losses[-1], losses[0])

    def test_motion_stage_trains_only_the_motion_modules(self):
        bundle = tiny_bundle('motion')
        self.assertEqual(len(trainable_parameters(bundle)), len(bundle.motion.parameters()))

    def test_generated_rgbd_shapes(self):
        rng = np.random.default_rng(2)
        reference = rng.uniform(-1, 1, (3, IMAGE_SIZE, IMAGE_SIZE))
        for stage in ('joint', 'inpaint'):
            rgb, depth = generate_rgbd(tiny_bundle(stage), reference, rng, steps=2)
            self.assertEqual(rgb.shape, (3, IMAGE_SIZE, IMAGE_SIZE))
            self.assertEqual(depth.shape, (IMAGE_SIZE, IMAGE_SIZE))

    def test_dataset_root_needs_a_manifest(self):
        with self.assertRaises(ConfigurationError):
            dataset_root(default_config())


class TestStageChain(unittest.TestCase):
    """
    vae -> rgb -> joint -> inpaint and joint -> motion on an in-memory dataset
    """

    @classmethod
    def setUpClass(cls):
        cls.directory = tempfile.mkdtemp()
        cls.samples = SampleSet(generate_samples([0, 1], 2, IMAGE_SIZE, seed=0, split=STUDIO))
        rng = np.random.default_rng(0)
        cls.clips = [make_clip(0, 3, rng, size=IMAGE_SIZE, frames_per_seq=2, provider=SyntheticAudioProvider(dim=4))]
        cls.results = {}
        parents = {'vae': '', 'rgb': 'vae', 'joint': 'rgb', 'inpaint': 'joint', 'motion': 'joint'}
        for stage, parent in parents.items():
            parent_path = cls.results[parent].checkpoint_path if parent else ''
            config = tiny_config(stage, os.path.join(cls.directory, stage), parent_path)
            if stage == 'motion':
                cls.results[stage] = train_stage(config, clips=cls.clips, progress=False)
            else:
                cls.results[stage] = train_stage(config, samples=cls.samples, progress=False)

    @classmethod
    def tearDownClass(cls):
        shutil.rmtree(cls.directory)

    def test_every_stage_writes_its_artifacts(self):
        for stage, result in self.results.items():
            output = os.path.join(self.directory, stage)
            self.assertTrue(os.path.isfile(os.path.join(output, '{}.ckpt'.format(stage))))
            self.assertTrue(os.path.isfile(os.path.join(output, 'loss.png')))
            self.assertEqual(len(result.losses), 2)
            self.assertTrue(all(np.isfinite(result.losses)))

    def test_loss_log_has_one_row_per_logged_step(self):
        rows = read_csv(os.path.join(self.directory, 'vae', 'loss.csv'))
        self.assertEqual(rows[0], ['step', 'stage', 'loss', 'recon_loss', 'kl_loss'])
        self.assertEqual([row[0] for row in rows[1:]], ['1', '2'])
        rows = read_csv(os.path.join(self.directory, 'joint', 'loss.csv'))
        self.assertEqual(rows[0], ['step', 'stage', 'loss'])

    def test_sample_grid_is_written_when_samples_are_given(self):
        self.assertTrue(os.path.isfile(os.path.join(self.directory, 'joint', 'samples.png')))
        self.assertFalse(os.path.exists(os.path.join(self.directory, 'motion', 'samples.png')))

    def test_latent_scale_is_estimated(self):
        scale = self.results['vae'].bundle.vae.latent_scale
        self.assertGreater(scale, 0.0)
        self.assertNotEqual(scale, 1.0)
        bundle = self.results['vae'].bundle
        stacked = vae_batch(self.samples.rgb, self.samples.depth, bundle.norm)
        self.assertAlmostEqual(scale, estimate_latent_scale(bundle.vae, stacked), places=6)

    def test_lineage_follows_the_stage_order(self):
        stages = {
            'rgb': ['vae'], 'joint': ['vae', 'rgb'], 'inpaint': ['vae', 'rgb', 'joint'], 'motion': ['vae', 'rgb', 'joint'],
        }
        for stage, expected in stages.items():
            manifest = load_checkpoint(self.results[stage].checkpoint_path).manifest
            self.assertEqual([entry['stage'] for entry in manifest['lineage']], expected)
            self.assertEqual(manifest['stage'], stage)

    def test_motion_stage_leaves_the_joint_weights_untouched(self):
        joint, _ = load_bundle(self.results['joint'].checkpoint_path)
        motion, _ = load_bundle(self.results['motion'].checkpoint_path, stages='motion')
        for name, value in joint.unet.state_dict().items():
            np.testing.assert_array_equal(motion.unet.state_dict()[name], value)
        self.assertIsNotNone(motion.motion)

    def test_inpaint_stage_has_the_conditioned_input(self):
        self.assertTrue(self.results['inpaint'].bundle.is_inpaint)

    def test_wrong_parent_is_refused(self):
        config = tiny_config('inpaint', os.path.join(self.directory, 'bad'), self.results['rgb'].checkpoint_path)
        with self.assertRaises(CheckpointError):
            train_stage(config, samples=self.samples, progress=False)
