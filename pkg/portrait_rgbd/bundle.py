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

import logging
from collections import OrderedDict, namedtuple

import numpy as np

from . import functional as F
from .backbone import CONCAT_REFERENCE_CHANNELS, INPAINT_CHANNELS, NO_REFERENCE, RGB_CHANNELS
from .errors import ConfigurationError
from .schedule import NoisePair
from .tensor import Tensor, no_grad

# Globals ###########################################################

log = logging.getLogger(__name__)

REFNET = 'refnet'
CONCAT = 'concat'
REFERENCE_MODES = (REFNET, CONCAT)

PreparedReference = namedtuple('PreparedReference', ['features', 'channels'])


# Classes ###########################################################

class ModelBundle:
    """
    Everything a sampler needs: the VAE, the denoiser with its reference
    path, the noise schedule, the depth normalization and, for animation,
    the motion modules

    Latents handed to and returned by the bundle are in diffusion scale
    (divided by the VAE's `latent_scale`).
    """

    def __init__(self, vae, unet, schedule, norm, refnet=None, motion=None, stage='joint',
                 reference_mode=REFNET, sampler='ddim', sample_steps=50):
        if reference_mode not in REFERENCE_MODES:
            raise ConfigurationError('Unknown reference mode `{}`'.format(reference_mode))
        if reference_mode == CONCAT and unet.config.in_channels != CONCAT_REFERENCE_CHANNELS:
            raise ConfigurationError('Concatenated-reference denoiser needs {} input channels, got {}'.format(
                CONCAT_REFERENCE_CHANNELS, unet.config.in_channels))
        self.vae = vae
        self.unet = unet
        self.refnet = refnet
        self.motion = motion
        self.schedule = schedule
        self.norm = norm
        self.stage = stage
        self.reference_mode = reference_mode
        self.sampler = sampler
        self.sample_steps = sample_steps

    @property
    def is_inpaint(self):
        return self.unet.config.in_channels == INPAINT_CHANNELS

    @property
    def is_joint(self):
        return self.unet.config.out_channels != RGB_CHANNELS

    def modules(self):
        """
        (prefix, module) pairs in checkpoint order
        """
        pairs = [('vae', self.vae)]
        if self.unet is not None:
            pairs.append(('unet', self.unet))
        if self.refnet is not None:
            pairs.append(('refnet', self.refnet))
        if self.motion is not None:
            pairs.append(('motion', self.motion))
        return pairs

    def state_tensors(self):
        tensors = OrderedDict()
        for prefix, module in self.modules():
            for name, value in module.state_dict().items():
                tensors['{}.{}'.format(prefix, name)] = value
        return tensors

    def encode_rgb(self, rgb):
        return self.vae.scale(self.vae.encode(rgb).values)

    def encode_depth(self, depth):
        return self.vae.scale(self.vae.encode_depth(depth, self.norm).values)

    def decode_rgb(self, latent):
        return self.vae.decode(self.vae.unscale(latent))

    def decode_depth(self, latent):
        return self.vae.decode_depth(self.vae.unscale(latent), self.norm)

    def reference_features(self, ref_latent):
        """
        ReferenceNet features of a scaled reference latent; differentiable
        when gradients are enabled and the reference network is trainable
        """
        if self.reference_mode != REFNET or self.refnet is None:
            return NO_REFERENCE
        return self.refnet.features(ref_latent)

    def prepare_reference(self, ref_latent):
        """
        Reference inputs for inference; None requests unconditional denoising
        """
        if ref_latent is None:
            return PreparedReference(NO_REFERENCE, None)
        ref_latent = np.asarray(ref_latent, dtype=self.unet.dtype)
        if ref_latent.ndim == 3:
            ref_latent = ref_latent[None]
        if self.reference_mode == CONCAT:
            return PreparedReference(NO_REFERENCE, ref_latent)
        with no_grad():
            return PreparedReference(self.reference_features(ref_latent), None)

    def noise_prediction(self, inputs, levels, reference, concat_channels=None, block_hook=None):
        """
        Raw denoiser output for stacked inputs; `reference` is a
        ReferenceFeatures object or NO_REFERENCE
        """
        inputs = self.unet.cast(inputs)
        if self.reference_mode == CONCAT:
            if concat_channels is None:
                concat_channels = np.zeros((inputs.shape[0], RGB_CHANNELS) + inputs.shape[2:], dtype=inputs.dtype)
            concat_channels = np.broadcast_to(np.asarray(concat_channels, dtype=inputs.dtype),
                                              (inputs.shape[0], RGB_CHANNELS) + inputs.shape[2:])
            inputs = F.concat(inputs, Tensor(concat_channels, dtype=inputs.dtype), axis=1)
        return self.unet(inputs, levels, reference, block_hook=block_hook)

    def predict(self, z, prepared, condition=None, block_hook=None):
        """
        NoisePair prediction for the JointLatent `z`

        An appearance-only denoiser sees `z.zx` and its prediction is reported
        for both halves.
        """
        if self.is_joint:
            inputs = z.joint
        else:
            inputs = z.zx
        if condition is not None:
            inputs = np.concatenate([inputs, np.asarray(condition, dtype=inputs.dtype)], axis=1)
        with no_grad():
            prediction = self.noise_prediction(inputs, z.level, prepared.features, prepared.channels,
                                               block_hook=block_hook).data
        if not self.is_joint:
            return NoisePair(prediction, prediction)
        return NoisePair.from_joint(prediction)
