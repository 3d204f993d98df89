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
Audio-driven sequence generation.

Every block site of the denoiser gets an audio-attention module (spatial
tokens of a frame attend to that frame's window of audio features) followed
by a temporal-attention module (each spatial position attends over the
motion frames and the frames being generated). Both end in a zero-initialized
projection inside a residual connection, so a fresh motion model leaves the
denoiser's per-frame output unchanged.
"""

# Imports ###########################################################

import logging
from collections import namedtuple

import numpy as np

from . import functional as F
from .errors import ConfigurationError, ShapeError
from .layers import Attention, GroupNorm, Linear, Module, ModuleList, sinusoidal_embedding
from .schedule import add_noise_joint, joint_loss, reverse_sample
from .tensor import Tensor, no_grad

# Globals ###########################################################

log = logging.getLogger(__name__)

FRAMES_PER_SEQUENCE = 14
MOTION_FRAMES = 4
AUDIO_WINDOW = 5
FRAME_RATE = 25.0

MotionConfig = namedtuple('MotionConfig', ['audio_dim', 'window', 'heads', 'frames_per_seq', 'motion_frames'])
MotionConfig.__new__.__defaults__ = (16, AUDIO_WINDOW, 4, FRAMES_PER_SEQUENCE, MOTION_FRAMES)


# Classes ###########################################################

class AudioTrack(namedtuple('AudioTrack', ['features', 'frame_rate'])):
    """
    Per-frame audio features [T, A] at `frame_rate` frames per second
    """

    def __new__(cls, features, frame_rate=FRAME_RATE):
        features = np.asarray(features, dtype=np.float32)
        if features.ndim != 2:
            raise ShapeError('audio features', 'rank', 2, features.ndim)
        if features.shape[0] < 1:
            raise ShapeError('audio features', 0, 'at least one frame', 0)
        if not np.all(np.isfinite(features)):
            raise ConfigurationError('Audio features contain non-finite values')
        return super().__new__(cls, features, float(frame_rate))

    def __len__(self):
        return self.features.shape[0]

    @property
    def dim(self):
        return self.features.shape[1]


class AudioAttention(Module):
    """
    Spatial tokens of each frame attend to the projected tokens of that
    frame's audio window
    """

    def __init__(self, channels, audio_dim, heads, rng):
        self.audio_dim = audio_dim
        self.norm = GroupNorm(channels)
        self.audio_proj = Linear(audio_dim, channels, rng)
        self.attn = Attention(channels, heads, rng, zero_out=True)

    def forward(self, x, windows):
        """
        x: [N, C, h, w] frames; windows: [N, k * A]
        """
        x = self.cast(x)
        frames, channels, height, width = x.shape
        windows = self.cast(windows)
        if windows.shape[0] != frames:
            raise ShapeError('audio windows', 0, frames, windows.shape[0])
        if windows.shape[1] % self.audio_dim:
            raise ShapeError('audio windows', 1, 'a multiple of {}'.format(self.audio_dim), windows.shape[1])
        audio_tokens = self.audio_proj(windows.reshape(frames, windows.shape[1] // self.audio_dim, self.audio_dim))
        tokens = self.norm(x).reshape(frames, channels, height * width).transpose(0, 2, 1)
        attended = self.attn(tokens, audio_tokens)
        return x + attended.transpose(0, 2, 1).reshape(frames, channels, height, width)


class TemporalAttention(Module):
    """
    Attention along time at every spatial position, over the motion frames
    followed by the current frames; only the current frames are returned
    """

    def __init__(self, channels, heads, rng):
        self.channels = channels
        self.norm = GroupNorm(channels)
        self.attn = Attention(channels, heads, rng, zero_out=True)

    def _time_tokens(self, x, sequences, length):
        """
        [B * length, C, h, w] -> [B * h * w, length, C]
        """
        _, channels, height, width = x.shape
        return (self.norm(x)
                .reshape(sequences, length, channels, height, width)
                .transpose(0, 3, 4, 1, 2)
                .reshape(sequences * height * width, length, channels))

    def forward(self, x, frames, motion=None):
        """
        x: [B * f, C, h, w]; motion: [B * n, C, h, w] or None
        """
        x = self.cast(x)
        total, channels, height, width = x.shape
        if total % frames:
            raise ShapeError('temporal input', 0, 'a multiple of {}'.format(frames), total)
        sequences = total // frames
        current = self._time_tokens(x, sequences, frames)
        context_length = 0
        tokens = current
        if motion is not None:
            motion = self.cast(motion)
            if motion.shape[1:] != x.shape[1:]:
                raise ShapeError('motion features', 'spatial', x.shape[1:], motion.shape[1:])
            if motion.shape[0] % sequences:
                raise ShapeError('motion features', 0, 'a multiple of {}'.format(sequences), motion.shape[0])
            context_length = motion.shape[0] // sequences
            tokens = F.concat(self._time_tokens(motion, sequences, context_length), current, axis=1)

        positions = sinusoidal_embedding(np.arange(context_length + frames), channels).astype(x.dtype)
        tokens = tokens + positions[None]
        queries = tokens[:, context_length:, :]
        attended = self.attn(queries, tokens)
        restored = (attended
                    .reshape(sequences, height, width, frames, channels)
                    .transpose(0, 3, 4, 1, 2)
                    .reshape(total, channels, height, width))
        return x + restored


class MotionBlock(Module):
    def __init__(self, channels, config, rng):
        self.audio = AudioAttention(channels, config.audio_dim, config.heads, rng)
        self.temporal = TemporalAttention(channels, config.heads, rng)

    def forward(self, x, frames, windows, motion=None):
        return self.temporal(self.audio(x, windows), frames, motion)


class MotionModel(Module):
    """
    One audio + temporal block per block site of a denoiser
    """

    def __init__(self, unet_config, config=None, rng=None):
        self.config = config or MotionConfig()
        rng = rng if rng is not None else np.random.default_rng(0)
        if self.config.window % 2 == 0:
            raise ConfigurationError('Audio window must be odd, got {}'.format(self.config.window))
        _, block_widths = unet_config.site_widths()
        self.blocks = ModuleList(MotionBlock(width, self.config, rng) for width in block_widths)

    def hook(self, frames, windows, motion_features=None):
        """
        A UNet block hook applying the motion blocks; `motion_features` is the
        list of per-block-site maps captured by the reference network on the
        motion frames (None for no context)
        """
        windows = self.cast(windows)

        def block_hook(site, h):
            motion = motion_features[site] if motion_features is not None else None
            return self.blocks[site](h, frames, windows, motion)

        return block_hook


# Functions #########################################################

def audio_window(track, t, k):
    """
    Features of frames t - (k-1)/2 .. t + (k-1)/2 concatenated, replicating
    the first/last frame past the ends
    """
    if k < 1 or k % 2 == 0:
        raise ConfigurationError('Audio window must be a positive odd size, got {}'.format(k))
    if len(track) < 1:
        raise ShapeError('audio track', 0, 'at least one frame', 0)
    half = (k - 1) // 2
    indices = np.clip(np.arange(t - half, t + half + 1), 0, len(track) - 1)
    return track.features[indices].reshape(-1)


def audio_windows(track, start, count, k):
    return np.stack([audio_window(track, t, k) for t in range(start, start + count)])


def audio_attention(module, block_features, windows):
    """
    Apply `module` to [B, C, f, h, w] features with [B, f, k * A] windows
    """
    block_features = np.asarray(block_features)
    windows = np.asarray(windows)
    batch, channels, frames, height, width = block_features.shape
    if windows.shape[:2] != (batch, frames):
        raise ShapeError('audio windows', 1, frames, windows.shape[1])
    flat = block_features.transpose(0, 2, 1, 3, 4).reshape(batch * frames, channels, height, width)
    with no_grad():
        out = module(flat, windows.reshape(batch * frames, -1)).data
    return out.reshape(batch, frames, channels, height, width).transpose(0, 2, 1, 3, 4)


def temporal_attention(module, block_features, motion_features=None):
    """
    Apply `module` to [B, C, f, h, w] features with [B, C, n, h, w] (or no)
    motion features
    """
    block_features = np.asarray(block_features)
    batch, channels, frames, height, width = block_features.shape
    flat = block_features.transpose(0, 2, 1, 3, 4).reshape(batch * frames, channels, height, width)
    motion = None
    if motion_features is not None:
        motion_features = np.asarray(motion_features)
        if motion_features.shape[-2:] != (height, width) or motion_features.shape[1] != channels:
            raise ShapeError('motion features', 'spatial', (channels, height, width),
                             (motion_features.shape[1],) + motion_features.shape[-2:])
        motion = motion_features.transpose(0, 2, 1, 3, 4).reshape(-1, channels, height, width)
    with no_grad():
        out = module(flat, frames, motion).data
    return out.reshape(batch, frames, channels, height, width).transpose(0, 2, 1, 3, 4)


def motion_features(bundle, context_latents):
    """
    Block-site features of the reference network on scaled motion-frame latents
    """
    with no_grad():
        return bundle.refnet.features(context_latents).blocks


def motion_loss(bundle, sequences, rng):
    """
    Joint noise-prediction loss of the motion model on a batch of training
    sequences

    Each sequence is a dict of scaled latents `context` [n, 4, h, w],
    `zx`/`zd` [f, 4, h, w], the reference latent `reference` [1, 4, h, w] and
    audio `windows` [f, k * A]. One level is drawn per sequence.
    """
    frames = sequences[0]['zx'].shape[0]
    noisy, noises, levels, references, windows, contexts = [], [], [], [], [], []
    for sequence in sequences:
        level = int(rng.integers(1, bundle.schedule.levels + 1))
        latent, noise = add_noise_joint(sequence['zx'], sequence['zd'], level, rng, bundle.schedule)
        noisy.append(latent.joint)
        noises.append(noise.joint)
        levels.append(np.full(frames, level))
        references.append(sequence['reference'] if len(sequences) == 1 else
                          np.repeat(sequence['reference'], frames, axis=0))
        windows.append(sequence['windows'])
        contexts.append(sequence['context'])

    with no_grad():
        reference = bundle.refnet.features(np.concatenate(references))
        context = bundle.refnet.features(np.concatenate(contexts)).blocks
    hook = bundle.motion.hook(frames, np.concatenate(windows), context)
    prediction = bundle.noise_prediction(np.concatenate(noisy), np.concatenate(levels), reference, block_hook=hook)
    return joint_loss(prediction, Tensor(np.concatenate(noises), dtype=prediction.dtype))


def animate(ref, audio, bundle, frames=None, frames_per_seq=FRAMES_PER_SEQUENCE, n_motion=MOTION_FRAMES, rng=None,
            steps=None, sampler=None, progress=False):
    """
    Generate an RGBD clip [T, 4, H, W] (RGB in [-1, 1] then depth in length
    units) for `audio`, chunk by chunk

    The first chunk uses the reference latent replicated n times as motion
    context; every later chunk uses the last n appearance latents generated.
    """
    if bundle.motion is None or bundle.refnet is None:
        raise ConfigurationError('Animation needs a motion-stage bundle with a reference network')
    frames = len(audio) if frames is None else int(frames)
    if frames < 1:
        raise ConfigurationError('Clip length must be positive, got {}'.format(frames))
    if n_motion < 1:
        raise ConfigurationError('Animation needs at least one motion frame, got {}'.format(n_motion))
    if len(audio) < frames:
        raise ShapeError('audio track', 0, 'at least {} frames'.format(frames), len(audio))
    rng = rng if rng is not None else np.random.default_rng(0)
    steps = steps or bundle.sample_steps
    sampler = sampler or bundle.sampler
    window = bundle.motion.config.window

    ref_latent = bundle.encode_rgb(ref)[None]
    prepared = bundle.prepare_reference(ref_latent)
    context = np.repeat(ref_latent, n_motion, axis=0)
    height, width = ref_latent.shape[-2:]

    clip = []
    for start in range(0, frames, frames_per_seq):
        count = min(frames_per_seq, frames - start)
        windows = audio_windows(audio, start, count, window)
        hook = bundle.motion.hook(count, windows, motion_features(bundle, context))

        def denoise_fn(z, hook=hook):
            return bundle.predict(z, prepared, block_hook=hook)

        final = reverse_sample(denoise_fn, (count, 4, height, width), bundle.schedule, rng, sampler=sampler,
                               steps=steps, progress=progress)
        rgb = bundle.decode_rgb(final.zx)
        depth = bundle.decode_depth(final.zd)
        clip.append(np.concatenate([rgb, depth[:, None].astype(rgb.dtype)], axis=1))
        context = np.concatenate([context, final.zx])[-n_motion:]
        log.debug('Generated frames %d-%d of %d', start, start + count - 1, frames)
    return np.concatenate(clip)
