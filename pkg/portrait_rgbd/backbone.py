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
"""
The latent denoiser and its reference network.

The UNet predicts noise for a channel-stacked latent input. Its spatial
self-attention sites take extra keys/values from a `ReferenceFeatures`
object: the normalized hidden states that a `ReferenceNet` (same trunk,
4-channel input, run at level 0 on the clean reference latent) produced at
the matching site. Sites are counted in forward order: down levels with
attention, the mid block, then up levels with attention.

Block sites (every down level, the mid block, every up level) are where the
motion modules hook in.
"""

# Imports ###########################################################

import logging
from collections import namedtuple

import numpy as np

from . import functional as F
from .errors import ConfigurationError, ShapeError
from .layers import (
    Attention, Conv2d, Downsample, GroupNorm, Linear, Module, ModuleList, ResBlock, Upsample,
    sinusoidal_embedding,
)
from .schedule import NoisePair
from .tensor import Tensor, no_grad

# Globals ###########################################################

log = logging.getLogger(__name__)

RGB_CHANNELS = 4
JOINT_CHANNELS = 8
CONCAT_REFERENCE_CHANNELS = 12
INPAINT_CHANNELS = 18
IN_CHANNEL_CHOICES = (RGB_CHANNELS, JOINT_CHANNELS, CONCAT_REFERENCE_CHANNELS, INPAINT_CHANNELS)
OUT_CHANNEL_CHOICES = (RGB_CHANNELS, JOINT_CHANNELS)


class _NoReference:
    """
    Sentinel requesting unconditional denoising
    """

    def __repr__(self):
        return 'NO_REFERENCE'


NO_REFERENCE = _NoReference()

ReferenceFeatures = namedtuple('ReferenceFeatures', ['attention', 'blocks'])


# Classes ###########################################################

class UNetConfig(namedtuple('UNetConfig', [
        'base_channels', 'channel_mults', 'attention_factors', 'in_channels', 'out_channels', 'emb_dim', 'heads'])):
    """
    Denoiser shape

    `attention_factors` lists the downsampling factors (relative to the latent)
    of the levels carrying spatial attention; the mid block always has one.
    `emb_dim` defaults to four times `base_channels`.
    """

    def __new__(cls, base_channels=64, channel_mults=(1, 2, 4), attention_factors=(1, 2), in_channels=4,
                out_channels=4, emb_dim=None, heads=4):
        try:
            channel_mults = tuple(int(mult) for mult in channel_mults)
            attention_factors = tuple(int(factor) for factor in attention_factors)
        except (TypeError, ValueError):
            raise ConfigurationError('unet channel_mults and attention_factors must be integer lists')
        if not channel_mults or any(mult < 1 for mult in channel_mults):
            raise ConfigurationError('unet channel_mults must be a non-empty list of positive integers, got {}'.format(
                channel_mults))
        factors = [2 ** index for index in range(len(channel_mults))]
        unknown = [factor for factor in attention_factors if factor not in factors]
        if unknown:
            raise ConfigurationError('unet attention_factors {} match no level (factors {})'.format(unknown, factors))
        if in_channels not in IN_CHANNEL_CHOICES:
            raise ConfigurationError('unet in_channels must be one of {}, got {}'.format(IN_CHANNEL_CHOICES, in_channels))
        if out_channels not in OUT_CHANNEL_CHOICES:
            raise ConfigurationError('unet out_channels must be one of {}, got {}'.format(
                OUT_CHANNEL_CHOICES, out_channels))
        if heads < 1 or any((base_channels * mult) % heads for mult in channel_mults):
            raise ConfigurationError('unet heads={} must divide every level width'.format(heads))
        emb_dim = 4 * base_channels if emb_dim is None else int(emb_dim)
        return super().__new__(cls, int(base_channels), channel_mults, attention_factors, int(in_channels),
                               int(out_channels), emb_dim, int(heads))

    @property
    def widths(self):
        return [self.base_channels * mult for mult in self.channel_mults]

    @property
    def attention_levels(self):
        return [2 ** index in self.attention_factors for index in range(len(self.channel_mults))]

    @property
    def attention_sites(self):
        return 2 * sum(self.attention_levels) + 1

    @property
    def block_sites(self):
        return 2 * len(self.channel_mults) + 1

    @property
    def spatial_multiple(self):
        return 2 ** (len(self.channel_mults) - 1)

    def site_widths(self):
        """
        Channel count at every attention site and every block site, in order
        """
        widths = self.widths
        down = [width for width, on in zip(widths, self.attention_levels) if on]
        up = [width for width, on in reversed(list(zip(widths, self.attention_levels))) if on]
        attention = down + [widths[-1]] + up
        blocks = widths + [widths[-1]] + list(reversed(widths))
        return attention, blocks

    def site_factors(self):
        """
        Downsampling factor at every attention site and every block site
        """
        factors = [2 ** index for index in range(len(self.channel_mults))]
        down = [factor for factor, on in zip(factors, self.attention_levels) if on]
        up = [factor for factor, on in reversed(list(zip(factors, self.attention_levels))) if on]
        return down + [factors[-1]] + up, factors + [factors[-1]] + list(reversed(factors))

    def to_dict(self):
        values = self._asdict()
        values['channel_mults'] = list(self.channel_mults)
        values['attention_factors'] = list(self.attention_factors)
        return values

    @classmethod
    def from_dict(cls, values):
        return cls(**values)


class TimestepEmbedding(Module):
    """
    Sinusoidal basis of the level followed by Linear-SiLU-Linear
    """

    def __init__(self, basis_dim, emb_dim, rng):
        self.basis_dim = basis_dim
        self.linear1 = Linear(basis_dim, emb_dim, rng)
        self.linear2 = Linear(emb_dim, emb_dim, rng)

    def forward(self, levels, batch):
        levels = np.broadcast_to(np.asarray(levels, dtype=np.float64), (batch,))
        basis = self.cast(sinusoidal_embedding(levels, self.basis_dim).astype(self.dtype))
        return self.linear2(F.silu(self.linear1(basis)))


class SpatialAttention(Module):
    """
    Self-attention over the spatial positions of [B, C, h, w], with optional
    reference tokens appended to the keys/values
    """

    def __init__(self, channels, heads, rng):
        self.norm = GroupNorm(channels)
        self.attn = Attention(channels, heads, rng)

    def forward(self, x, reference=None, capture=None):
        batch, channels, height, width = x.shape
        normed = self.norm(x)
        if capture is not None:
            capture.append(normed)
        tokens = normed.reshape(batch, channels, height * width).transpose(0, 2, 1)
        keys_values = tokens
        if reference is not None:
            keys_values = F.concat(tokens, _reference_tokens(reference, batch, channels), axis=1)
        attended = self.attn(tokens, keys_values)
        return x + attended.transpose(0, 2, 1).reshape(batch, channels, height, width)


class DownLevel(Module):
    def __init__(self, in_channels, width, attention, last, config, rng):
        self.res = ResBlock(in_channels, width, rng, emb_dim=config.emb_dim)
        self.attn = SpatialAttention(width, config.heads, rng) if attention else None
        self.down = None if last else Downsample(width, rng)


class MidBlock(Module):
    def __init__(self, width, config, rng):
        self.res1 = ResBlock(width, width, rng, emb_dim=config.emb_dim)
        self.attn = SpatialAttention(width, config.heads, rng)
        self.res2 = ResBlock(width, width, rng, emb_dim=config.emb_dim)


class UpLevel(Module):
    def __init__(self, in_channels, skip_channels, width, attention, first, config, rng):
        self.res = ResBlock(in_channels + skip_channels, width, rng, emb_dim=config.emb_dim)
        self.attn = SpatialAttention(width, config.heads, rng) if attention else None
        self.up = None if first else Upsample(width, rng)


class UNet(Module):
    """
    The noise-prediction network

    forward(x, levels, reference) maps a [B, in_channels, h, w] input at the
    given levels to a [B, out_channels, h, w] noise prediction.
    """

    def __init__(self, config=None, rng=None):
        self.config = config or UNetConfig()
        rng = rng if rng is not None else np.random.default_rng(0)
        config = self.config
        widths = config.widths
        self.time_embed = TimestepEmbedding(config.base_channels, config.emb_dim, rng)
        self.conv_in = Conv2d(config.in_channels, config.base_channels, 3, rng)

        self.down = ModuleList()
        channels = config.base_channels
        for index, (width, attention) in enumerate(zip(widths, config.attention_levels)):
            self.down.append(DownLevel(channels, width, attention, index == len(widths) - 1, config, rng))
            channels = width

        self.mid = MidBlock(channels, config, rng)

        self.up = ModuleList()
        for index in reversed(range(len(widths))):
            width = widths[index]
            self.up.append(UpLevel(channels, width, width, config.attention_levels[index], index == 0, config, rng))
            channels = width

        self.norm_out = GroupNorm(channels)
        self.conv_out = Conv2d(channels, config.out_channels, 3, rng)

    def site_references(self, reference):
        sites = self.config.attention_sites
        if reference is None:
            raise ConfigurationError('Missing reference features; pass NO_REFERENCE for unconditional denoising')
        if reference is NO_REFERENCE:
            return [None] * sites
        attention = list(reference.attention)
        if len(attention) != sites:
            raise ShapeError('reference features', 'sites', sites, len(attention))
        return attention

    def forward(self, x, levels, reference=NO_REFERENCE, block_hook=None, capture=None, head=True):
        x = self.cast(x)
        if x.ndim != 4 or x.shape[1] != self.config.in_channels:
            raise ShapeError('denoiser input', 1, self.config.in_channels, x.shape[1] if x.ndim > 1 else x.shape)
        multiple = self.config.spatial_multiple
        if x.shape[2] % multiple or x.shape[3] % multiple:
            raise ShapeError('denoiser input', 2, 'a multiple of {}'.format(multiple), x.shape[2:])
        references = iter(self.site_references(reference))
        attention_capture = capture['attention'] if capture is not None else None
        block_sites = iter(range(self.config.block_sites))

        def finish_block(h):
            site = next(block_sites)
            if block_hook is not None:
                h = block_hook(site, h)
            if capture is not None:
                capture['blocks'].append(h)
            return h

        emb = self.time_embed(levels, x.shape[0])
        h = self.conv_in(x)
        skips = []
        for level in self.down:
            h = level.res(h, emb)
            if level.attn is not None:
                h = level.attn(h, next(references), attention_capture)
            h = finish_block(h)
            skips.append(h)
            if level.down is not None:
                h = level.down(h)

        h = self.mid.res1(h, emb)
        h = self.mid.attn(h, next(references), attention_capture)
        h = self.mid.res2(h, emb)
        h = finish_block(h)

        for level, skip in zip(self.up, reversed(skips)):
            h = level.res(F.concat(h, skip, axis=1), emb)
            if level.attn is not None:
                h = level.attn(h, next(references), attention_capture)
            h = finish_block(h)
            if level.up is not None:
                h = level.up(h)

        if not head:
            return None
        return self.conv_out(F.silu(self.norm_out(h)))


class ReferenceNet(UNet):
    """
    Mirror of the denoiser trunk run on the clean reference latent at level 0
    """

    def __init__(self, config=None, rng=None):
        config = (config or UNetConfig())._replace(in_channels=RGB_CHANNELS, out_channels=RGB_CHANNELS)
        super().__init__(config, rng)

    @classmethod
    def mirror(cls, unet):
        """
        A reference network whose weights are copied from `unet`; input and
        output convolutions keep their first four channels
        """
        refnet = cls(unet.config)
        refnet.to_dtype(unet.dtype)
        state = unet.state_dict()
        state['conv_in.weight'] = state['conv_in.weight'][:, :RGB_CHANNELS].copy()
        state['conv_out.weight'] = state['conv_out.weight'][:RGB_CHANNELS].copy()
        state['conv_out.bias'] = state['conv_out.bias'][:RGB_CHANNELS].copy()
        refnet.load_state_dict(state)
        return refnet

    def features(self, latent):
        latent = self.cast(latent)
        capture = {'attention': [], 'blocks': []}
        self.forward(latent, np.zeros(latent.shape[0]), NO_REFERENCE, capture=capture, head=False)
        return ReferenceFeatures(capture['attention'], capture['blocks'])


# Functions #########################################################

def _reference_tokens(reference, batch, channels):
    reference = reference if isinstance(reference, Tensor) else Tensor(reference)
    if reference.ndim != 4 or reference.shape[1] != channels:
        raise ShapeError('reference feature map', 1, channels, reference.shape[1] if reference.ndim > 1 else None)
    ref_batch = reference.shape[0]
    if ref_batch != batch:
        if ref_batch != 1:
            raise ShapeError('reference feature map', 0, batch, ref_batch)
        reference = F.concat(*([reference] * batch), axis=0)
    _, _, height, width = reference.shape
    return reference.reshape(batch, channels, height * width).transpose(0, 2, 1)


def build_unet(config, rng):
    return UNet(config, rng)


def reference_features(latent, refnet, denoiser=None):
    """
    Features of the clean (scaled) reference latent, one map per attention site
    """
    features = refnet.features(latent)
    if denoiser is not None:
        expected = denoiser.config.attention_sites
        if len(features.attention) != expected:
            raise ShapeError('reference features', 'sites', expected, len(features.attention))
    return features


def expand_input_channels(model, in_channels):
    """
    Copy of `model` with extra zero-initialized input channels appended
    """
    config = model.config
    if in_channels <= config.in_channels:
        raise ConfigurationError('Cannot expand {} input channels to {}'.format(config.in_channels, in_channels))
    expanded = UNet(config._replace(in_channels=in_channels))
    expanded.to_dtype(model.dtype)
    state = model.state_dict()
    weight = state['conv_in.weight']
    extra = np.zeros((weight.shape[0], in_channels - weight.shape[1]) + weight.shape[2:], dtype=weight.dtype)
    state['conv_in.weight'] = np.concatenate([weight, extra], axis=1)
    expanded.load_state_dict(state)
    return expanded


def expand_channels(rgb_model):
    """
    Turn a 4-in/4-out appearance denoiser into an 8-in/8-out joint one

    The four new input channels start at zero and the output convolution is
    duplicated, so at initialization the joint model ignores the depth input
    and predicts the same noise for both halves.
    """
    config = rgb_model.config
    if config.in_channels != RGB_CHANNELS or config.out_channels != RGB_CHANNELS:
        raise ConfigurationError('Model already expanded (in/out channels {}/{})'.format(
            config.in_channels, config.out_channels))
    expanded = expand_input_channels(rgb_model, JOINT_CHANNELS)
    joint = UNet(expanded.config._replace(out_channels=JOINT_CHANNELS))
    joint.to_dtype(rgb_model.dtype)
    state = expanded.state_dict()
    state['conv_out.weight'] = np.concatenate([state['conv_out.weight']] * 2, axis=0)
    state['conv_out.bias'] = np.concatenate([state['conv_out.bias']] * 2, axis=0)
    joint.load_state_dict(state)
    log.info('Expanded denoiser to %d/%d channels', JOINT_CHANNELS, JOINT_CHANNELS)
    return joint


def denoise(unet, z, reference, condition=None):
    """
    Noise prediction for the JointLatent `z`, split into its two domains

    `condition` holds extra input channels appended after the joint latent.
    """
    inputs = z.joint
    if condition is not None:
        inputs = np.concatenate([inputs, np.asarray(condition, dtype=inputs.dtype)], axis=1)
    with no_grad():
        prediction = unet(inputs, z.level, reference)
    return NoisePair.from_joint(prediction.data)
