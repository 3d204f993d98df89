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
Masked-latent inpainting with the joint denoiser.

A `MaskPair` says, per domain and per latent pixel, whether the value is
generated (1) or held at a known latent (0). The inpaint denoiser receives
18 input channels:

    [z^x_l (4), z^d_l (4), m^x (1), m^d (1), (1 - m^x) z^x_0 (4), (1 - m^d) z^d_0 (4)]

and after every sampler step the known regions are reset to the known latent
re-noised to the new level with one fixed noise draw.
"""

# Imports ###########################################################

import logging
from collections import namedtuple

import numpy as np

from .backbone import JOINT_CHANNELS
from .errors import CheckpointError, MaskError, ShapeError
from .schedule import JointLatent, NoisePair, add_noise, reverse_sample
from .vae import DOWNSCALE

# Globals ###########################################################

log = logging.getLogger(__name__)

JOINT = 'joint'
IMAGE_TO_DEPTH = 'image_to_depth'
DEPTH_TO_IMAGE = 'depth_to_image'
RANDOM_TRAINING = 'random_training'
MODES = (JOINT, IMAGE_TO_DEPTH, DEPTH_TO_IMAGE, RANDOM_TRAINING)

ONES = 'ones'
ZEROS = 'zeros'
RECTANGLE = 'rectangle'

# per-domain rates of (ones, zeros, rectangle)
KIND_PROBABILITIES = (0.3, 0.3, 0.4)
# md given mx; (zeros, zeros) is excluded without changing either marginal
MD_GIVEN_ZEROS = (3.0 / 7, 0.0, 4.0 / 7)
MD_GIVEN_OTHER = (12.0 / 49, 3.0 / 7, 16.0 / 49)

InpaintResult = namedtuple('InpaintResult', ['rgb', 'depth', 'latent'])


# Classes ###########################################################

class MaskPair(namedtuple('MaskPair', ['mx', 'md'])):
    """
    Binary [1, h, w] (or [B, 1, h, w]) masks; 1 generates, 0 conditions
    """

    def validate(self):
        for name, mask in zip(self._fields, self):
            mask = np.asarray(mask)
            if not np.all((mask == 0) | (mask == 1)):
                raise MaskError('Mask `{}` is not binary'.format(name))
        if np.shape(self.mx) != np.shape(self.md):
            raise ShapeError('mask pair', 'all', np.shape(self.mx), np.shape(self.md))
        return self


# Functions #########################################################

def _rectangle(rng, height, width):
    """
    A random axis-aligned rectangle that never covers the whole grid
    """
    while True:
        rect_h = int(rng.integers(1, height + 1))
        rect_w = int(rng.integers(1, width + 1))
        if (rect_h, rect_w) != (height, width):
            break
    top = int(rng.integers(0, height - rect_h + 1))
    left = int(rng.integers(0, width - rect_w + 1))
    mask = np.zeros((1, height, width), dtype=np.float32)
    mask[:, top:top + rect_h, left:left + rect_w] = 1.0
    return mask


def _domain_mask(kind, rng, height, width):
    if kind == ONES:
        return np.ones((1, height, width), dtype=np.float32)
    if kind == ZEROS:
        return np.zeros((1, height, width), dtype=np.float32)
    return _rectangle(rng, height, width)


def _random_kinds(rng):
    """
    Mask kinds of (mx, md), drawn jointly

    Each domain follows KIND_PROBABILITIES on its own while (zeros, zeros)
    never occurs.
    """
    kinds = (ONES, ZEROS, RECTANGLE)
    mx = kinds[rng.choice(3, p=KIND_PROBABILITIES)]
    if mx == ZEROS:
        md = kinds[rng.choice(3, p=MD_GIVEN_ZEROS)]
    else:
        md = kinds[rng.choice(3, p=MD_GIVEN_OTHER)]
    return mx, md


def make_mask_pair(mode, rng=None, size=(8, 8)):
    """
    Masks of one inpainting mode at latent resolution `size`
    """
    height, width = size
    ones = np.ones((1, height, width), dtype=np.float32)
    zeros = np.zeros((1, height, width), dtype=np.float32)
    if mode == JOINT:
        return MaskPair(ones, ones.copy())
    if mode == IMAGE_TO_DEPTH:
        return MaskPair(zeros, ones)
    if mode == DEPTH_TO_IMAGE:
        return MaskPair(ones, zeros)
    if mode == RANDOM_TRAINING:
        if height * width < 2:
            raise MaskError('Random training masks need at least two latent pixels, got {}x{}'.format(height, width))
        rng = rng if rng is not None else np.random.default_rng()
        mx, md = _random_kinds(rng)
        return MaskPair(_domain_mask(mx, rng, height, width), _domain_mask(md, rng, height, width))
    raise MaskError('Unknown mask mode `{}` (choose from {})'.format(mode, ', '.join(MODES)))


def make_region_mask(pixel_mask, factor=DOWNSCALE):
    """
    Downsample a binary pixel mask to latent resolution by strict majority
    """
    pixel_mask = np.asarray(pixel_mask, dtype=np.float64)
    height, width = pixel_mask.shape[-2:]
    if height % factor or width % factor:
        raise ShapeError('pixel mask', -1, 'a multiple of {}'.format(factor), width)
    blocks = pixel_mask.reshape(pixel_mask.shape[:-2] + (height // factor, factor, width // factor, factor))
    majority = blocks.mean(axis=(-3, -1)) > 0.5
    return np.expand_dims(majority.astype(np.float32), -3)


def inpaint_condition(zl, known, masks):
    """
    The 18-channel denoiser input for noisy latent `zl`, clean known latent
    `known` and `masks`
    """
    masks = MaskPair(*masks).validate()
    if zl.zx.shape != known.zx.shape:
        raise ShapeError('known latent', 'all', zl.zx.shape, known.zx.shape)
    mx = np.broadcast_to(masks.mx, zl.zx.shape[:-3] + (1,) + zl.zx.shape[-2:]).astype(zl.zx.dtype)
    md = np.broadcast_to(masks.md, zl.zx.shape[:-3] + (1,) + zl.zx.shape[-2:]).astype(zl.zx.dtype)
    condition = np.concatenate(
        [zl.zx, zl.zd, mx, md, (1.0 - mx) * known.zx, (1.0 - md) * known.zd], axis=-3)
    return condition


def condition_channels(condition):
    """
    The channels of an inpaint condition that follow the joint latent
    """
    return condition[..., JOINT_CHANNELS:, :, :]


def reimpose(z, known, masks, noise, schedule):
    """
    Reset the known regions of `z` to `known` re-noised to `z.level`
    """
    if z.level == 0:
        noisy_x, noisy_d = known.zx, known.zd
    else:
        noisy_x = add_noise(known.zx, noise.ex, z.level, schedule)
        noisy_d = add_noise(known.zd, noise.ed, z.level, schedule)
    return JointLatent(
        np.where(masks.mx > 0.5, z.zx, noisy_x).astype(z.zx.dtype),
        np.where(masks.md > 0.5, z.zd, noisy_d).astype(z.zd.dtype),
        z.level,
    )


def inpaint(bundle, masks, known_rgb=None, known_depth=None, reference_rgb=None, steps=None, rng=None,
            sampler=None):
    """
    Sample the masked regions of both domains, holding the rest at the known
    image/depth, and decode

    Inputs are single images ([3, H, W] and [H, W]). Decoding blends the known
    latent back in unscaled space, so fully known domains decode to the exact
    VAE round trip of their input.
    """
    if not bundle.is_inpaint:
        raise CheckpointError('Inpainting needs an inpaint-stage checkpoint, got stage `{}`'.format(bundle.stage))
    rng = rng if rng is not None else np.random.default_rng(0)
    steps = steps or bundle.sample_steps
    sampler = sampler or bundle.sampler
    masks = MaskPair(*masks).validate()

    reference = known_rgb if reference_rgb is None else reference_rgb
    size = _image_size(known_rgb, known_depth, reference)
    latent_shape = (1, 4, size[0] // DOWNSCALE, size[1] // DOWNSCALE)
    known_x = bundle.vae.encode(known_rgb).values[None] if known_rgb is not None else \
        np.zeros(latent_shape, dtype=np.float32)
    known_d = bundle.vae.encode_depth(known_depth, bundle.norm).values[None] if known_depth is not None else \
        np.zeros(latent_shape, dtype=np.float32)
    if masks.mx.shape[-2:] != latent_shape[-2:]:
        raise ShapeError('mask', -1, latent_shape[-1], masks.mx.shape[-1])
    if known_rgb is None and not masks.mx.all():
        raise MaskError('Appearance mask conditions on an image that was not given')
    if known_depth is None and not masks.md.all():
        raise MaskError('Depth mask conditions on a depth map that was not given')

    known = JointLatent(bundle.vae.scale(known_x), bundle.vae.scale(known_d), 0)
    mask_batch = MaskPair(masks.mx[None], masks.md[None])
    prepared = bundle.prepare_reference(bundle.encode_rgb(reference) if reference is not None else None)
    fixed_noise = NoisePair(rng.standard_normal(latent_shape), rng.standard_normal(latent_shape))

    def denoise_fn(z):
        condition = inpaint_condition(z, known, mask_batch)
        return bundle.predict(z, prepared, condition=condition_channels(condition))

    def hook(z):
        return reimpose(z, known, mask_batch, fixed_noise, bundle.schedule)

    initial = hook(JointLatent(rng.standard_normal(latent_shape).astype(np.float32),
                               rng.standard_normal(latent_shape).astype(np.float32),
                               bundle.schedule.levels))
    final = reverse_sample(denoise_fn, latent_shape, bundle.schedule, rng, sampler=sampler, steps=steps,
                           hook=hook, initial=initial)

    appearance = np.where(mask_batch.mx > 0.5, bundle.vae.unscale(final.zx), known_x).astype(np.float32)
    depth = np.where(mask_batch.md > 0.5, bundle.vae.unscale(final.zd), known_d).astype(np.float32)
    rgb = bundle.vae.decode(appearance)[0]
    depth_map = bundle.vae.decode_depth(depth, bundle.norm)[0]
    return InpaintResult(rgb, depth_map, final)


def _image_size(*images):
    for image in images:
        if image is not None:
            return np.shape(image)[-2:]
    raise ShapeError('inpaint inputs', 'all', 'at least one image', None)


def predict_depth(rgb, bundle, steps=None, rng=None, sampler=None):
    """
    Monocular depth: the image is known everywhere and is its own reference
    """
    size = np.shape(rgb)[-2:]
    masks = make_mask_pair(IMAGE_TO_DEPTH, size=(size[0] // DOWNSCALE, size[1] // DOWNSCALE))
    return inpaint(bundle, masks, known_rgb=rgb, steps=steps, rng=rng, sampler=sampler).depth


def generate_from_depth(depth, ref, bundle, steps=None, rng=None, region=None, sampler=None):
    """
    Appearance for a known depth map, with the identity of `ref`

    With a pixel-space `region`, only that region of `ref` is regenerated
    (depth-driven editing); elsewhere the appearance of `ref` is kept.
    """
    size = np.shape(depth)[-2:]
    latent_size = (size[0] // DOWNSCALE, size[1] // DOWNSCALE)
    if region is None:
        masks = make_mask_pair(DEPTH_TO_IMAGE, size=latent_size)
        return inpaint(bundle, masks, known_depth=depth, reference_rgb=ref, steps=steps, rng=rng,
                       sampler=sampler).rgb
    mx = make_region_mask(region)
    masks = MaskPair(mx, np.zeros_like(mx))
    return inpaint(bundle, masks, known_rgb=ref, known_depth=depth, reference_rgb=ref, steps=steps, rng=rng,
                   sampler=sampler).rgb
