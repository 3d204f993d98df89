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
Stage training: vae, rgb, joint, inpaint and motion.

Each stage starts from its parent checkpoint (none for vae), trains the
stage's parameters with Adam at a constant step size, logs one CSV record per
logged step, draws a loss curve and a sample grid, and writes a checkpoint
whose lineage links it to its parent.
"""

# Imports ###########################################################

import logging
import os
from collections import namedtuple

import numpy as np
from tqdm import tqdm

from . import functional as F
from . import rasters
from .backbone import (CONCAT_REFERENCE_CHANNELS, INPAINT_CHANNELS, NO_REFERENCE, RGB_CHANNELS, ReferenceNet,
                       UNet, expand_channels, expand_input_channels)
from .bundle import CONCAT, REFNET, ModelBundle
from .checkpoint import bundle_from_checkpoint, load_parent, save_bundle
from .config import STAGES
from .dataloader import BatchLoader, ClipSet, LatentCache, SampleSet, image_batch, latent_batch
from .errors import CheckpointError, ConfigurationError, DivergenceError, NonFiniteError
from .inpaint import JOINT, RANDOM_TRAINING, MaskPair, inpaint, inpaint_condition, make_mask_pair
from .motion import MotionModel, motion_loss
from .optim import Adam
from .schedule import JointLatent, add_noise_joint, reverse_sample
from .synthdata import FAR, NEAR
from .tensor import Tensor, no_grad
from .utils import CSVLog, depth_to_rgb, ensure_dir, image_grid, save_loss_plot
from .vae import VAE, DepthNormalization, estimate_latent_scale, vae_batch, vae_train_step

# Globals ###########################################################

log = logging.getLogger(__name__)

PROBE_COUNT = 20
PROBE_TOLERANCE = 1e-5
GRID_REFERENCES = 4

StageResult = namedtuple('StageResult', ['bundle', 'checkpoint_path', 'file_hash', 'losses'])


# Functions #########################################################

def stage_rng(seed, stage, *keys):
    return np.random.default_rng([int(seed), STAGES.index(stage)] + [int(key) for key in keys])


def dataset_root(config):
    if not config.manifest:
        raise ConfigurationError('The run configuration names no dataset manifest')
    return config.manifest if os.path.isdir(config.manifest) else os.path.dirname(config.manifest) or '.'


def expand_bundle(bundle, reference_mode=REFNET):
    """
    Joint-stage initialization of an rgb-stage bundle: the denoiser goes from
    4/4 to 8/8 channels (12 inputs with a concatenated reference) and the
    reference network is copied from it
    """
    if bundle.stage != 'rgb':
        raise CheckpointError('Channel expansion needs an `rgb` checkpoint, got a `{}` checkpoint'.format(
            bundle.stage))
    unet = expand_channels(bundle.unet)
    refnet = None
    if reference_mode == CONCAT:
        unet = expand_input_channels(unet, CONCAT_REFERENCE_CHANNELS)
    else:
        refnet = ReferenceNet.mirror(unet)
    return ModelBundle(bundle.vae, unet, bundle.schedule, bundle.norm, refnet=refnet, stage='joint',
                       reference_mode=reference_mode, sampler=bundle.sampler, sample_steps=bundle.sample_steps)


def expansion_probe(rgb_bundle, joint_bundle, seed=0, count=PROBE_COUNT):
    """
    Outputs of both denoisers on `count` random (latent, level) pairs; at
    initialization the joint model's two halves both reproduce the rgb model
    """
    rng = np.random.default_rng([seed, 77])
    unet = rgb_bundle.unet
    size = 2 * unet.config.spatial_multiple
    latents = rng.standard_normal((count, RGB_CHANNELS, size, size)).astype(unet.dtype)
    levels = rng.integers(1, rgb_bundle.schedule.levels + 1, count)
    depth = rng.standard_normal(latents.shape).astype(unet.dtype)
    with no_grad():
        expected = unet(latents, levels, NO_REFERENCE).data
    probe = {
        'seed': int(seed),
        'levels': [int(level) for level in levels],
        'latents': latents.astype(np.float64).ravel().tolist(),
        'depth': depth.astype(np.float64).ravel().tolist(),
        'shape': list(latents.shape),
        'expected': expected.astype(np.float64).ravel().tolist(),
    }
    probe['max_abs_diff'] = verify_probe(joint_bundle, probe)
    return probe


def verify_probe(bundle, probe, tolerance=PROBE_TOLERANCE):
    """
    Re-run a stored expansion probe; returns the largest deviation
    """
    shape = tuple(probe['shape'])
    latents = np.asarray(probe['latents'], dtype=bundle.unet.dtype).reshape(shape)
    depth = np.asarray(probe['depth'], dtype=bundle.unet.dtype).reshape(shape)
    expected = np.asarray(probe['expected']).reshape(shape)
    inputs = np.concatenate([latents, depth], axis=1)
    with no_grad():
        output = bundle.noise_prediction(inputs, np.asarray(probe['levels']), NO_REFERENCE).data
    deviation = max(float(np.max(np.abs(output[:, :RGB_CHANNELS] - expected))),
                    float(np.max(np.abs(output[:, RGB_CHANNELS:] - expected))))
    if deviation > tolerance:
        raise CheckpointError('Expanded model deviates from its rgb parent by {:.3g} (tolerance {:.1g})'.format(
            deviation, tolerance))
    return deviation


def init_bundle(config, parent, rng):
    """
    The bundle a stage trains, built from the parent checkpoint
    """
    stage = config.stage
    schedule = config.schedule()
    train = config.train
    if stage == 'vae':
        vae = VAE(config.vae_config(), rng)
        return ModelBundle(vae, None, schedule, DepthNormalization(NEAR, FAR), stage='vae', sampler=train.sampler,
                           sample_steps=train.sample_steps)

    bundle = bundle_from_checkpoint(parent)
    if stage == 'rgb':
        unet = UNet(config.unet_config(RGB_CHANNELS, RGB_CHANNELS), rng)
        return ModelBundle(bundle.vae, unet, schedule, bundle.norm, stage='rgb', sampler=train.sampler,
                           sample_steps=train.sample_steps)
    if stage == 'joint':
        if bundle.stage == 'rgb':
            return expand_bundle(bundle, config.unet.reference)
        probe = parent.manifest.get('extras', {}).get('init_probe')
        if probe is not None:
            verify_probe(bundle, probe)
        bundle.stage = 'joint'
        return bundle
    if bundle.reference_mode == CONCAT:
        raise ConfigurationError('Stage `{}` needs a reference network; the concatenated-reference model '
                                 'only trains the joint stage'.format(stage))
    if stage == 'inpaint':
        unet = expand_input_channels(bundle.unet, INPAINT_CHANNELS)
        return ModelBundle(bundle.vae, unet, bundle.schedule, bundle.norm, refnet=bundle.refnet, stage='inpaint',
                           sampler=bundle.sampler, sample_steps=bundle.sample_steps)
    motion = MotionModel(bundle.unet.config, config.motion_config(), rng)
    for module in (bundle.vae, bundle.unet, bundle.refnet):
        module.freeze()
    return ModelBundle(bundle.vae, bundle.unet, bundle.schedule, bundle.norm, refnet=bundle.refnet, motion=motion,
                       stage='motion', sampler=bundle.sampler, sample_steps=bundle.sample_steps)


def trainable_parameters(bundle):
    stage = bundle.stage
    if stage == 'vae':
        modules = [bundle.vae]
    elif stage == 'motion':
        modules = [bundle.motion]
    else:
        modules = [bundle.unet] + ([bundle.refnet] if bundle.refnet is not None else [])
    parameters = []
    for module in modules:
        module.unfreeze()
        parameters.extend(module.parameters())
    return parameters


def dataset_latent_scale(bundle, samples, count):
    """
    Latent scale over the first `count` samples, RGB and depth encoded together

    The same scale divides RGB and depth latents.
    """
    images = vae_batch(samples.rgb[:count], samples.depth[:count], bundle.norm)
    return estimate_latent_scale(bundle.vae, images)


def random_masks(rng, batch, size):
    pairs = [make_mask_pair(RANDOM_TRAINING, rng, size=size) for _ in range(batch)]
    return MaskPair(np.stack([pair.mx for pair in pairs]), np.stack([pair.md for pair in pairs]))


def diffusion_loss(bundle, batch, rng):
    """
    Noise-prediction loss of the rgb, joint or inpaint denoiser on a LatentBatch
    """
    count = batch.zx.shape[0]
    levels = rng.integers(1, bundle.schedule.levels + 1, count)
    latent, noise = add_noise_joint(batch.zx, batch.zd, levels, rng, bundle.schedule)
    if not bundle.is_joint:
        inputs, target = latent.zx, noise.ex
    elif bundle.is_inpaint:
        masks = random_masks(rng, count, batch.zx.shape[-2:])
        inputs = inpaint_condition(latent, JointLatent(batch.zx, batch.zd, 0), masks)
        target = noise.joint
    else:
        inputs, target = latent.joint, noise.joint
    reference = bundle.reference_features(batch.reference) if bundle.is_joint else NO_REFERENCE
    concat = batch.reference if bundle.reference_mode == CONCAT else None
    prediction = bundle.noise_prediction(inputs, levels, reference, concat_channels=concat)
    return F.mse(prediction, Tensor(target, dtype=prediction.dtype))


def _optimize(loss_fn, optimizer):
    optimizer.zero_grad()
    try:
        loss = loss_fn()
        loss.backward()
    except NonFiniteError as error:
        raise DivergenceError('Training diverged: {}'.format(error)) from error
    optimizer.step()
    return float(loss.data)


def generate_rgbd(bundle, reference_rgb, rng, steps=None, sampler=None):
    """
    One RGBD sample ([3, H, W] image, [H, W] depth) with the identity of
    `reference_rgb`
    """
    size = np.shape(reference_rgb)[-2:]
    if bundle.is_inpaint:
        masks = make_mask_pair(JOINT, size=(size[0] // 8, size[1] // 8))
        result = inpaint(bundle, masks, reference_rgb=reference_rgb, steps=steps, rng=rng, sampler=sampler)
        return result.rgb, result.depth
    ref_latent = bundle.encode_rgb(reference_rgb)[None]
    prepared = bundle.prepare_reference(ref_latent if bundle.is_joint else None)
    final = reverse_sample(lambda z: bundle.predict(z, prepared), ref_latent.shape, bundle.schedule, rng,
                           sampler=sampler or bundle.sampler, steps=steps or bundle.sample_steps)
    return bundle.decode_rgb(final.zx)[0], bundle.decode_depth(final.zd)[0]


def sample_grid(bundle, samples, rng, steps=None):
    """
    Rows of (reference, generated rgb, generated depth); reconstructions for
    the vae stage
    """
    count = min(GRID_REFERENCES, len(samples))
    tiles = []
    for index in range(count):
        sample = samples[index]
        if bundle.stage == 'vae':
            tiles.extend([sample.rgb, bundle.vae.decode(bundle.vae.encode(sample.rgb))])
            continue
        rgb, depth = generate_rgbd(bundle, sample.rgb, rng, steps=steps)
        normalized, _ = bundle.norm.normalize(depth)
        tiles.extend([sample.rgb, rgb, depth_to_rgb(normalized)])
    columns = 2 if bundle.stage == 'vae' else 3
    return image_grid(np.stack(tiles), columns)


def _stage_batches(config, bundle, samples, clips, batch_size, steps):
    """
    (step function, batch iterator) for the stage
    """
    stage = config.stage
    data = config.data
    if stage == 'motion':
        motion = config.motion_config()
        if clips is None:
            clips = ClipSet.from_disk(dataset_root(config), bundle, motion.frames_per_seq, motion.motion_frames,
                                      motion.window)
        else:
            clips = ClipSet(clips, bundle, motion.frames_per_seq, motion.motion_frames, motion.window)

        def clip_batch(indices, rng):
            return [clips.sequence(rng) for _ in indices]

        loader = BatchLoader(len(clips.clips), batch_size, clip_batch, config.seed, 0, data.prefetch)
        return (lambda batch, rng: motion_loss(bundle, batch, rng)), loader.batches(steps)

    if stage == 'vae':
        samples.prepare()
        loader = BatchLoader(len(samples), batch_size, image_batch(samples), config.seed, data.workers, data.prefetch)

        def vae_step(batch, rng):
            return vae_batch(batch.rgb, batch.depth, bundle.norm)
        return vae_step, loader.batches(steps)

    cache = LatentCache(samples, bundle)
    cache.prepare()
    loader = BatchLoader(len(samples), batch_size, latent_batch(samples, cache), config.seed, data.workers,
                         data.prefetch)
    return (lambda batch, rng: diffusion_loss(bundle, batch, rng)), loader.batches(steps)


def train_stage(config, samples=None, clips=None, progress=True):
    """
    Run the stage named by `config.stage` and write its checkpoint

    `samples` (a SampleSet) and `clips` (a list of ClipSample) replace the dataset on
    disk when given.
    """
    stage = config.stage
    steps, batch_size, learning_rate = config.train_settings()
    output = ensure_dir(config.output_path)
    parent = load_parent(config.parent, stage)
    rng = stage_rng(config.seed, stage)
    bundle = init_bundle(config, parent, rng)
    optimizer = Adam(trainable_parameters(bundle), learning_rate)
    log.info('Training stage `%s` for %d steps (batch %d, step size %g) into %s', stage, steps, batch_size,
             learning_rate, output)

    if stage != 'motion' and samples is None:
        samples = SampleSet.from_disk(dataset_root(config), config.data.splits)
    step_fn, batches = _stage_batches(config, bundle, samples, clips, batch_size, steps)
    columns = ['step', 'stage', 'loss'] + (['recon_loss', 'kl_loss'] if stage == 'vae' else [])
    records = CSVLog(os.path.join(output, 'loss.csv'), columns)
    losses = []
    bar = tqdm(batches, total=steps, desc=stage, disable=not progress)
    for step, batch in enumerate(bar, start=1):
        step_rng = stage_rng(config.seed, stage, 3, step)
        if stage == 'vae':
            terms = vae_train_step(bundle.vae, step_fn(batch, step_rng), optimizer, step_rng)
        else:
            terms = {'loss': _optimize(lambda: step_fn(batch, step_rng), optimizer)}
        losses.append(terms['loss'])
        if not np.isfinite(terms['loss']):
            raise DivergenceError('Loss of stage `{}` is {} at step {}'.format(stage, terms['loss'], step))
        bar.set_postfix(loss='{:.4f}'.format(terms['loss']))
        if step == 1 or step % config.train.log_every == 0 or step == steps:
            records.append(step=step, stage=stage, **terms)
            log.debug('%s step %d: loss %.5f', stage, step, terms['loss'])
        if config.train.sample_every and step % config.train.sample_every == 0 and samples is not None:
            grid = sample_grid(bundle, samples, stage_rng(config.seed, stage, 4, step), config.train.sample_steps)
            rasters.write_rgb(os.path.join(output, 'samples_{:06d}.png'.format(step)), grid)

    if stage == 'vae':
        bundle.vae.latent_scale = dataset_latent_scale(bundle, samples, 16 * config.vae.scale_batches)

    if losses:
        save_loss_plot(os.path.join(output, 'loss.png'), list(range(1, len(losses) + 1)), losses,
                       'stage {}'.format(stage))
    if samples is not None:
        grid = sample_grid(bundle, samples, stage_rng(config.seed, stage, 5), config.train.sample_steps)
        rasters.write_rgb(os.path.join(output, 'samples.png'), grid)

    path = os.path.join(output, '{}.ckpt'.format(stage))
    digest = save_bundle(path, bundle, config.config_hash(), parent,
                         extras={'steps': steps, 'batch_size': batch_size, 'learning_rate': learning_rate})
    return StageResult(bundle, path, digest, losses)
