# -*- coding: utf-8 -*-
#
# Copyright (C) 2026 portrait-rgbd contributors
#
# This software's license gives you freedom; you can copy, convey,
# propagate, redistribute and/or modify this program under the terms of
# the GNU Affero General Public License (AGPL) as published by the Free
# Software Foundation (FSF), either version 3 of the License, or (at your
# option) any later version of the AGPL published by the FSF.
#
# This program is distributed in the hope that it will be useful, but
# WITHOUT ANY WARRANTY; without even the implied warranty of
# MERCHANTABILITY or FITNESS FOR A PARTICULAR PURPOSE.  See the GNU Affero
# General Public License for more details.
#
# You should have received a copy of the GNU Affero General Public License
# along with this program in a file in the toplevel directory called
# "AGPLv3".  If not, see <http://www.gnu.org/licenses/>.
#

# Imports ###########################################################

import json
import os

import numpy as np

from portrait_rgbd import rasters
from portrait_rgbd.checkpoint import file_hash, load_checkpoint
from portrait_rgbd.cli import EXIT_OK, EXIT_USER_ERROR
from portrait_rgbd.synthdata import EVAL_STUDIO, FAR, NEAR, STUDIO, WILD

from .base_test import PipelineBaseTest


# Classes ###########################################################

class StagePipelineTest(PipelineBaseTest):
    """
    Dataset, the five training stages and every inference command, end to end
    """

    @classmethod
    def setUpClass(cls):
        super().setUpClass()
        cls.checkpoints = {}
        steps = [
            ('synthdata', cls.path('data'), '--config', cls.write_config('vae')),
            ('train', cls.write_config('vae'), '--quiet'),
            ('train', cls.write_config('rgb', cls.checkpoint('vae')), '--quiet'),
            ('expand', cls.checkpoint('rgb'), cls.path('runs', 'joint_init.ckpt')),
            ('train', cls.write_config('joint', cls.path('runs', 'joint_init.ckpt')), '--quiet'),
            ('train', cls.write_config('inpaint', cls.checkpoint('joint')), '--quiet'),
            ('train', cls.write_config('motion', cls.checkpoint('joint')), '--quiet'),
        ]
        for argv in steps:
            status, out = cls.cli(*argv)
            if status != EXIT_OK:
                raise AssertionError('`{}` exited with {}:\n{}'.format(' '.join(argv), status, out))
        with open(cls.path('data', 'manifest.json')) as handle:
            cls.manifest = json.load(handle)
        stem = cls.manifest['splits'][EVAL_STUDIO]['samples'][0]['stem']
        cls.image = cls.path('data', EVAL_STUDIO, '{}_rgb.png'.format(stem))
        cls.depth = cls.path('data', EVAL_STUDIO, '{}_depth.png'.format(stem))

    @classmethod
    def checkpoint(cls, stage):
        return cls.path('runs', stage, '{}.ckpt'.format(stage))

    def test_dataset_files_match_the_manifest(self):
        counts = self.manifest['counts']
        self.assertEqual((counts[STUDIO], counts[WILD], counts[EVAL_STUDIO]), (4, 2, 2))
        self.assertEqual(len(os.listdir(self.path('data', STUDIO))), 4 * counts[STUDIO])
        self.assertEqual(len(os.listdir(self.path('data', 'clips', 'clip_0000'))), 4 * 3 + 1)

    def test_every_stage_left_a_checkpoint_and_a_loss_log(self):
        for stage in ('vae', 'rgb', 'joint', 'inpaint', 'motion'):
            self.assertTrue(os.path.isfile(self.checkpoint(stage)))
            self.assertTrue(os.path.isfile(self.path('runs', stage, 'loss.csv')))

    def test_lineage_reaches_back_to_the_autoencoder(self):
        manifest = load_checkpoint(self.checkpoint('motion')).manifest
        self.assertEqual(manifest['lineage'][0]['stage'], 'vae')
        self.assertEqual(manifest['lineage'][-1]['stage'], 'joint')
        self.assertEqual(manifest['parent_hash'], file_hash(self.checkpoint('joint')))

    def test_predict_depth(self):
        output = self.path('predicted_depth.png')
        self.assert_cli('predict-depth', self.checkpoint('inpaint'), self.image, output, '--steps', 2)
        depth = rasters.read_depth(output, NEAR, FAR)
        self.assertEqual(depth.shape, (32, 32))

    def test_depth_to_image_with_a_region(self):
        region = np.zeros((32, 32), dtype=bool)
        region[16:] = True
        rasters.write_mask(self.path('region.png'), region)
        output = self.path('from_depth.png')
        self.assert_cli('depth2image', self.checkpoint('inpaint'), self.depth, self.image, output, '--region',
                        self.path('region.png'), '--steps', 2)
        self.assertEqual(rasters.read_rgb(output).shape, (3, 32, 32))

    def test_sample(self):
        self.assert_cli('sample', self.checkpoint('joint'), self.image, self.path('samples'), '--count', 2,
                        '--steps', 2)
        self.assertEqual(sorted(os.listdir(self.path('samples'))), [
            'sample_000_depth.png', 'sample_000_rgb.png', 'sample_001_depth.png', 'sample_001_rgb.png',
        ])

    def test_animate(self):
        audio = self.path('data', 'clips', 'clip_0000', 'audio.afeat')
        self.assert_cli('animate', self.checkpoint('motion'), self.image, audio, self.path('clip'), '--steps', 2,
                        '--quiet')
        files = os.listdir(self.path('clip'))
        self.assertEqual(len(files), 2 * 3 + 1)
        with open(self.path('clip', 'clip.json')) as handle:
            self.assertEqual(json.load(handle)['frames'], 3)

    def test_eval_depth_of_a_checkpoint(self):
        out = self.assert_cli('eval-depth', self.path('data'), self.path('eval'), '--checkpoint',
                              self.checkpoint('inpaint'), '--steps', 2)
        self.assertIn('AbsRel', out)
        self.assertTrue(any(line.startswith('inpaint.ckpt') for line in out.splitlines()))
        self.assertEqual(len(os.listdir(self.path('eval', 'error_maps', 'inpaint.ckpt'))), 2)

    def test_commands_refuse_checkpoints_of_the_wrong_stage(self):
        status, _ = self.cli('predict-depth', self.checkpoint('joint'), self.image, self.path('x.png'))
        self.assertEqual(status, EXIT_USER_ERROR)
        status, _ = self.cli('animate', self.checkpoint('inpaint'), self.image,
                             self.path('data', 'clips', 'clip_0000', 'audio.afeat'), self.path('y'))
        self.assertEqual(status, EXIT_USER_ERROR)
        status, _ = self.cli('train', self.write_config('motion', self.checkpoint('rgb')), '--quiet')
        self.assertEqual(status, EXIT_USER_ERROR)
