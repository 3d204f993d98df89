import os
import shutil
import tempfile
import unittest
from collections import OrderedDict

import numpy as np
from mock import Mock

from portrait_rgbd.checkpoint import (
    MAGIC, Checkpoint, check_lineage, decode_archive, encode_archive, file_hash, load_bundle, load_checkpoint,
    load_parent, require_stage, save_bundle, save_checkpoint
)
from portrait_rgbd.errors import CheckpointError
from portrait_rgbd.schedule import JointLatent

from .base_test import LATENT_SIZE, tiny_bundle


def tensors():
    rng = np.random.default_rng(0)
    return OrderedDict([
        ('a.weight', rng.standard_normal((3, 4)).astype(np.float32)),
        ('a.bias', np.zeros(4, dtype=np.float32)),
        ('b.scale', np.array(2.5, dtype=np.float32)),
    ])


class TestArchive(unittest.TestCase):
    def test_encoding_is_deterministic(self):
        first = encode_archive(tensors(), {'stage': 'vae'})
        self.assertEqual(first, encode_archive(tensors(), {'stage': 'vae'}))
        self.assertTrue(first.startswith(MAGIC))

    def test_decoding_restores_names_shapes_and_values(self):
        manifest, restored = decode_archive(encode_archive(tensors(), {'stage': 'vae', 'extras': {'k': 1}}))
        self.assertEqual(manifest['stage'], 'vae')
        self.assertEqual(manifest['extras'], {'k': 1})
        self.assertEqual(list(restored), list(tensors()))
        for name, value in tensors().items():
            np.testing.assert_array_equal(restored[name], value)
            self.assertEqual(restored[name].shape, value.shape)

    def test_corrupt_payload_fails_its_checksum(self):
        data = bytearray(encode_archive(tensors(), {'stage': 'vae'}))
        data[-1] ^= 0xFF
        with self.assertRaises(CheckpointError):
            decode_archive(bytes(data))
        decode_archive(bytes(data), verify=False)

    def test_foreign_and_truncated_files_are_rejected(self):
        with self.assertRaises(CheckpointError):
            decode_archive(b'PK\x03\x04 something else')
        data = encode_archive(tensors(), {'stage': 'vae'})
        with self.assertRaises(CheckpointError):
            decode_archive(data[:-8])


class TestCheckpointFiles(unittest.TestCase):
    def setUp(self):
        self.directory = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.directory)

    def path(self, name):
        return os.path.join(self.directory, name)

    def test_saved_file_hash_is_reported(self):
        digest = save_checkpoint(self.path('x/vae.ckpt'), tensors(), {'stage': 'vae'})
        self.assertEqual(digest, file_hash(self.path('x/vae.ckpt')))
        self.assertEqual(load_checkpoint(self.path('x/vae.ckpt')).file_hash, digest)

    def test_saving_twice_gives_identical_bytes(self):
        save_checkpoint(self.path('a.ckpt'), tensors(), {'stage': 'vae'})
        save_checkpoint(self.path('b.ckpt'), tensors(), {'stage': 'vae'})
        with open(self.path('a.ckpt'), 'rb') as first, open(self.path('b.ckpt'), 'rb') as second:
            self.assertEqual(first.read(), second.read())

    def test_missing_checkpoint_raises(self):
        with self.assertRaises(CheckpointError):
            load_checkpoint(self.path('absent.ckpt'))

    def test_bundle_round_trip_predicts_identically(self):
        bundle = tiny_bundle('joint')
        save_bundle(self.path('joint.ckpt'), bundle, parent=self.fake_parent('rgb'))
        restored, checkpoint = load_bundle(self.path('joint.ckpt'), stages='joint')
        self.assertEqual(checkpoint.manifest['stage'], 'joint')
        self.assertEqual(restored.unet.config, bundle.unet.config)
        self.assertEqual(restored.schedule.levels, bundle.schedule.levels)
        self.assertEqual(restored.norm, bundle.norm)
        rng = np.random.default_rng(0)
        shape = (1, 4, LATENT_SIZE, LATENT_SIZE)
        z = JointLatent(rng.standard_normal(shape), rng.standard_normal(shape), 3)
        reference = rng.standard_normal(shape)
        expected = bundle.predict(z, bundle.prepare_reference(reference))
        actual = restored.predict(z, restored.prepare_reference(reference))
        np.testing.assert_array_equal(actual.ex, expected.ex)
        np.testing.assert_array_equal(actual.ed, expected.ed)

    def test_vae_bundle_round_trip(self):
        bundle = tiny_bundle('joint')
        bundle.vae.latent_scale = 0.75
        vae_only = type(bundle)(bundle.vae, None, None, bundle.norm, stage='vae')
        save_bundle(self.path('vae.ckpt'), vae_only)
        restored, _ = load_bundle(self.path('vae.ckpt'), stages='vae')
        self.assertIsNone(restored.unet)
        self.assertEqual(restored.vae.latent_scale, 0.75)

    def test_motion_bundle_keeps_its_motion_modules(self):
        bundle = tiny_bundle('motion')
        save_bundle(self.path('motion.ckpt'), bundle, parent=self.fake_parent('joint'))
        restored, _ = load_bundle(self.path('motion.ckpt'), stages='motion')
        self.assertEqual(restored.motion.config, bundle.motion.config)
        self.assertEqual(len(restored.motion.blocks), len(bundle.motion.blocks))

    def fake_parent(self, stage):
        lineage = [] if stage == 'vae' else [{'stage': 'vae', 'hash': 'v' * 64}]
        return Checkpoint({'stage': stage, 'lineage': lineage}, {}, stage[0] * 64, self.path(stage + '.ckpt'))

    def test_lineage_records_the_parent(self):
        bundle = tiny_bundle('joint')
        save_bundle(self.path('joint.ckpt'), bundle, parent=self.fake_parent('rgb'))
        manifest = load_checkpoint(self.path('joint.ckpt')).manifest
        self.assertEqual(manifest['parent_hash'], 'r' * 64)
        self.assertEqual([entry['stage'] for entry in manifest['lineage']], ['vae', 'rgb'])

    def test_wrong_stage_is_refused(self):
        save_bundle(self.path('joint.ckpt'), tiny_bundle('joint'), parent=self.fake_parent('rgb'))
        with self.assertRaises(CheckpointError):
            load_bundle(self.path('joint.ckpt'), stages='inpaint')
        with self.assertRaises(CheckpointError):
            load_parent(self.path('joint.ckpt'), 'rgb')

    def test_parent_is_required_after_the_vae_stage(self):
        self.assertIsNone(load_parent('', 'vae'))
        with self.assertRaises(CheckpointError):
            load_parent('', 'joint')


class TestLineage(unittest.TestCase):
    def test_vae_checkpoints_need_no_lineage(self):
        check_lineage({'stage': 'vae'})

    def test_lineage_must_reach_a_vae_checkpoint(self):
        with self.assertRaises(CheckpointError):
            check_lineage({'stage': 'rgb', 'lineage': [], 'parent_hash': None})
        with self.assertRaises(CheckpointError):
            check_lineage({'stage': 'rgb', 'lineage': [{'stage': 'rgb', 'hash': 'a'}], 'parent_hash': 'a'})

    def test_parent_hash_must_match_the_last_ancestor(self):
        lineage = [{'stage': 'vae', 'hash': 'a'}, {'stage': 'rgb', 'hash': 'b'}]
        check_lineage({'stage': 'joint', 'lineage': lineage, 'parent_hash': 'b'})
        with self.assertRaises(CheckpointError):
            check_lineage({'stage': 'joint', 'lineage': lineage, 'parent_hash': 'a'})

    def test_unknown_stage_raises(self):
        with self.assertRaises(CheckpointError):
            check_lineage({'stage': 'refiner'})

    def test_require_stage_names_the_stages(self):
        checkpoint = Mock(manifest={'stage': 'rgb'}, path='rgb.ckpt')
        self.assertIs(require_stage(checkpoint, ('rgb', 'joint')), checkpoint)
        with self.assertRaises(CheckpointError) as context:
            require_stage(checkpoint, 'inpaint', needed_by='motion')
        self.assertIn('inpaint', str(context.exception))
