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
Convolutional variational autoencoder shared by the appearance and depth
domains.

Images in [-1, 1] of size H x W map to 4-channel latents of size H/8 x W/8.
Depth maps are normalized to [-1, 1], replicated to three channels and go
through the same encoder; decoding averages the three channels back.
"""

# Imports ###########################################################

import logging
from collections import namedtuple

import numpy as np

from . import functional as F
from .errors import ConfigurationError, DivergenceError, NonFiniteError, ShapeError
from .layers import Conv2d, Downsample, GroupNorm, Module, ModuleList, ResBlock, Upsample
from .tensor import Tensor, no_grad

# Globals ###########################################################

log = logging.getLogger(__name__)

LATENT_CHANNELS = 4
DOWNSCALE = 8
APPEARANCE = 'appearance'
DEPTH = 'depth'
LOGVAR_LIMIT = 10.0

LatentCode = namedtuple('LatentCode', ['values', 'domain'])


# Classes ###########################################################

class VAEConfig(namedtuple('VAEConfig', ['base_channels', 'channel_mults', 'kl_weight'])):
    """
    Encoder/decoder widths; three multipliers give the three stride-2 stages
    """

    def __new__(cls, base_channels=32, channel_mults=(1, 2, 4), kl_weight=1e-6):
        channel_mults = tuple(int(mult) for mult in channel_mults)
        if len(channel_mults) != 3 or any(mult < 1 for mult in channel_mults):
            raise ConfigurationError('vae channel_mults must be three positive integers, got {}'.format(channel_mults))
        if base_channels < 1:
            raise ConfigurationError('vae base_channels must be positive')
        return super().__new__(cls, int(base_channels), channel_mults, float(kl_weight))

    def to_dict(self):
        return {'base_channels': self.base_channels, 'channel_mults': list(self.channel_mults),
                'kl_weight': self.kl_weight}

    @classmethod
    def from_dict(cls, values):
        return cls(**values)


class DepthNormalization:
    """
    Affine map of depth in [near, far] onto [-1, 1]
    """

    def __init__(self, near, far):
        if not near < far:
            raise ConfigurationError('Depth normalization needs near < far, got near={} far={}'.format(near, far))
        self.near = float(near)
        self.far = float(far)

    def __repr__(self):
        return 'DepthNormalization(near={}, far={})'.format(self.near, self.far)

    def __eq__(self, other):
        return isinstance(other, DepthNormalization) and (self.near, self.far) == (other.near, other.far)

    def normalize(self, depth):
        """
        Returns (normalized, invalid): values outside [near, far] are clamped
        and flagged in `invalid`
        """
        depth = np.asarray(depth, dtype=np.float64)
        invalid = ~np.isfinite(depth) | (depth < self.near) | (depth > self.far)
        clamped = np.clip(np.nan_to_num(depth, nan=self.far, posinf=self.far, neginf=self.near), self.near, self.far)
        normalized = 2.0 * (clamped - self.near) / (self.far - self.near) - 1.0
        return normalized, invalid

    def denormalize(self, values):
        values = np.asarray(values, dtype=np.float64)
        return self.near + (values + 1.0) * 0.5 * (self.far - self.near)


class Encoder(Module):
    def __init__(self, config, rng):
        widths = [config.base_channels * mult for mult in config.channel_mults]
        self.conv_in = Conv2d(3, widths[0], 3, rng)
        self.blocks = ModuleList()
        self.downs = ModuleList()
        channels = widths[0]
        for width in widths:
            self.blocks.append(ResBlock(channels, width, rng))
            self.downs.append(Downsample(width, rng))
            channels = width
        self.mid = ResBlock(channels, channels, rng)
        self.norm_out = GroupNorm(channels)
        self.conv_out = Conv2d(channels, 2 * LATENT_CHANNELS, 3, rng)

    def forward(self, x):
        h = self.conv_in(x)
        for block, down in zip(self.blocks, self.downs):
            h = down(block(h))
        h = self.conv_out(F.silu(self.norm_out(self.mid(h))))
        mean = h[:, :LATENT_CHANNELS]
        raw_logvar = h[:, LATENT_CHANNELS:]
        logvar = F.scale(F.tanh(F.scale(raw_logvar, 1.0 / LOGVAR_LIMIT)), LOGVAR_LIMIT)
        return mean, logvar


class Decoder(Module):
    def __init__(self, config, rng):
        widths = [config.base_channels * mult for mult in reversed(config.channel_mults)]
        self.conv_in = Conv2d(LATENT_CHANNELS, widths[0], 3, rng)
        self.mid = ResBlock(widths[0], widths[0], rng)
        self.blocks = ModuleList()
        self.ups = ModuleList()
        channels = widths[0]
        for width in widths:
            self.ups.append(Upsample(channels, rng))
            self.blocks.append(ResBlock(channels, width, rng))
            channels = width
        self.norm_out = GroupNorm(channels)
        self.conv_out = Conv2d(channels, 3, 3, rng)

    def forward(self, z):
        h = self.mid(self.conv_in(z))
        for up, block in zip(self.ups, self.blocks):
            h = block(up(h))
        return F.tanh(self.conv_out(F.silu(self.norm_out(h))))


class VAE(Module):
    """
    The shared latent space

    `latent_scale` is the empirical standard deviation of the latents over the
    training data; diffusion works on `scale(latent)` = latent / latent_scale.
    """

    def __init__(self, config=None, rng=None):
        self.config = config or VAEConfig()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.encoder = Encoder(self.config, rng)
        self.decoder = Decoder(self.config, rng)
        self.latent_scale = 1.0

    def posterior(self, images):
        return self.encoder(self.cast(images))

    def reconstruct(self, latents):
        return self.decoder(self.cast(latents))

    def encode(self, image, sample=False, rng=None, domain=APPEARANCE):
        """
        Posterior mean (or a reparameterized draw when `sample`) for [3, H, W]
        or [B, 3, H, W] images in [-1, 1]
        """
        images, batched = _as_batch(image, 3)
        height, width = images.shape[-2:]
        if height % DOWNSCALE or width % DOWNSCALE:
            raise ConfigurationError('Image size {}x{} is not divisible by {}'.format(height, width, DOWNSCALE))
        with no_grad():
            mean, logvar = self.posterior(images)
        values = mean.data
        if sample:
            rng = rng if rng is not None else np.random.default_rng()
            noise = rng.standard_normal(values.shape).astype(values.dtype)
            values = values + np.exp(0.5 * logvar.data) * noise
        return LatentCode(values if batched else values[0], domain)

    def decode(self, latent):
        values = latent.values if isinstance(latent, LatentCode) else latent
        latents, batched = _as_batch(values, LATENT_CHANNELS)
        with no_grad():
            images = self.reconstruct(latents).data
        return images if batched else images[0]

    def encode_depth(self, depth, norm, sample=False, rng=None):
        normalized, _ = norm.normalize(depth)
        return self.encode(replicate_depth(normalized), sample=sample, rng=rng, domain=DEPTH)

    def decode_depth(self, latent, norm):
        images = self.decode(latent)
        return norm.denormalize(images.mean(axis=-3))

    def scale(self, values):
        return np.asarray(values) / self.latent_scale

    def unscale(self, values):
        return np.asarray(values) * self.latent_scale


# Functions #########################################################

def _as_batch(values, channels):
    values = np.asarray(values)
    if values.ndim == 3:
        values, batched = values[None], False
    elif values.ndim == 4:
        batched = True
    else:
        raise ShapeError('image batch', 'rank', '3 or 4', values.ndim)
    if values.shape[1] != channels:
        raise ShapeError('channels', 1 if batched else 0, channels, values.shape[1])
    return values, batched


def replicate_depth(normalized):
    """
    [H, W] -> [3, H, W] (or [B, H, W] -> [B, 3, H, W])
    """
    normalized = np.asarray(normalized, dtype=np.float32)
    return np.repeat(normalized[..., None, :, :], 3, axis=-3)


def kl_divergence(mean, logvar):
    """
    KL(N(mean, exp(logvar)) || N(0, I)), averaged over elements
    """
    terms = mean * mean + F.exp(logvar) - logvar
    return F.scale(F.reduce_mean(terms) - 1.0, 0.5)


def vae_loss(vae, images, rng):
    mean, logvar = vae.posterior(images)
    noise = Tensor(rng.standard_normal(mean.shape), dtype=vae.dtype)
    latents = mean + F.exp(F.scale(logvar, 0.5)) * noise
    recon_loss = F.mse(vae.reconstruct(latents), vae.cast(images))
    kl_loss = kl_divergence(mean, logvar)
    return recon_loss, kl_loss


def vae_train_step(vae, images, optimizer, rng):
    """
    One optimizer step on a batch of 3-channel images (RGB and replicated depth
    mixed); returns the loss terms before the update
    """
    optimizer.zero_grad()
    try:
        recon_loss, kl_loss = vae_loss(vae, images, rng)
        total = recon_loss + F.scale(kl_loss, vae.config.kl_weight)
        total.backward()
    except NonFiniteError as error:
        raise DivergenceError('VAE training diverged: {}'.format(error)) from error
    optimizer.step()
    return {
        'recon_loss': float(recon_loss.data),
        'kl_loss': float(kl_loss.data),
        'loss': float(total.data),
    }


def vae_batch(rgb, depth, norm):
    """
    Stack RGB images [B, 3, H, W] and depth maps [B, H, W] into one VAE batch
    """
    normalized, _ = norm.normalize(depth)
    return np.concatenate([np.asarray(rgb, dtype=np.float32), replicate_depth(normalized)], axis=0)


def estimate_latent_scale(vae, images, batch_size=16):
    """
    Standard deviation of the posterior means over `images`
    """
    chunks = [vae.encode(images[start:start + batch_size]).values
              for start in range(0, len(images), batch_size)]
    latents = np.concatenate(chunks, axis=0)
    std = float(np.std(latents))
    if not np.isfinite(std) or std <= 0.0:
        raise DivergenceError('Cannot estimate latent scale: std={}'.format(std))
    log.info('Latent scale estimated at %.4f over %d images', std, len(images))
    return std
