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
Training data: samples from disk or memory, reference pairing, a cache of
VAE latents and a batch loader with a bounded prefetch queue.

Batch contents are drawn from the loader's generator on the calling thread;
workers only assemble them, so batches come out in the same order and with
the same contents whatever the number of workers.
"""

# Imports ###########################################################

import logging
import os
from collections import deque, namedtuple
from concurrent.futures import ThreadPoolExecutor

import numpy as np
from lazy import lazy

from . import synthdata
from .errors import ConfigurationError
from .motion import audio_windows
from .tensor import no_grad

# Globals ###########################################################

log = logging.getLogger(__name__)

Batch = namedtuple('Batch', ['rgb', 'depth', 'mask', 'reference', 'indices'])
LatentBatch = namedtuple('LatentBatch', ['zx', 'zd', 'reference', 'indices'])


# Classes ###########################################################

class SampleSet:
    """
    RGBD samples of one or more splits, with same-identity reference pairing
    """

    def __init__(self, samples):
        self._samples = list(samples)
        if not self._samples:
            raise ConfigurationError('Training set is empty')

    @classmethod
    def from_disk(cls, root, splits, manifest=None):
        manifest = manifest or synthdata.load_manifest(root)
        root = root if os.path.isdir(root) else os.path.dirname(root)
        samples = []
        for split in splits:
            if split not in manifest['splits']:
                raise ConfigurationError('Dataset has no split `{}` (available: {})'.format(
                    split, ', '.join(sorted(manifest['splits']))))
            samples.extend(synthdata.load_split(root, manifest, split))
        log.info('Loaded %d samples from %s (%s)', len(samples), root, ', '.join(splits))
        return cls(samples)

    def __len__(self):
        return len(self._samples)

    def __getitem__(self, index):
        return self._samples[index]

    @lazy
    def by_identity(self):
        groups = {}
        for index, sample in enumerate(self._samples):
            groups.setdefault(sample.identity_id, []).append(index)
        return groups

    @lazy
    def rgb(self):
        return np.stack([sample.rgb for sample in self._samples]).astype(np.float32)

    @lazy
    def depth(self):
        return np.stack([sample.depth for sample in self._samples])

    @lazy
    def masks(self):
        return np.stack([sample.valid_mask for sample in self._samples]).astype(bool)

    def prepare(self):
        """
        Materialize the stacked arrays before worker threads read them
        """
        return self.rgb, self.depth, self.masks, self.by_identity

    def reference_index(self, index, rng):
        """
        Another sample of the same identity, or the sample itself when it is
        the identity's only one
        """
        group = self.by_identity[self._samples[index].identity_id]
        others = [other for other in group if other != index]
        if not others:
            return index
        return others[int(rng.integers(len(others)))]


class LatentCache:
    """
    Scaled VAE latents of every sample of a SampleSet, encoded on first use
    """

    def __init__(self, samples, bundle, batch_size=16):
        self.samples = samples
        self.bundle = bundle
        self.batch_size = batch_size

    def _encode(self, images, encode):
        chunks = []
        with no_grad():
            for start in range(0, len(images), self.batch_size):
                chunks.append(encode(images[start:start + self.batch_size]))
        return np.concatenate(chunks).astype(np.float32)

    @lazy
    def zx(self):
        log.info('Encoding %d appearance latents', len(self.samples))
        return self._encode(self.samples.rgb, self.bundle.encode_rgb)

    @lazy
    def zd(self):
        log.info('Encoding %d depth latents', len(self.samples))
        return self._encode(self.samples.depth, self.bundle.encode_depth)

    def prepare(self):
        self.samples.prepare()
        return self.zx, self.zd


class ClipSet:
    """
    Training sequences cut from talking clips: `frames_per_seq` consecutive
    frames, the `motion_frames` ground-truth frames before them as motion
    context (the reference frame repeated when the sequence starts the clip)
    and the matching audio windows
    """

    def __init__(self, clips, bundle, frames_per_seq, motion_frames, window):
        self.clips = list(clips)
        if not self.clips:
            raise ConfigurationError('No clips to train on')
        self.bundle = bundle
        self.frames_per_seq = frames_per_seq
        self.motion_frames = motion_frames
        self.window = window
        short = [len(clip.frames) for clip in self.clips if len(clip.frames) < frames_per_seq]
        if short:
            raise ConfigurationError('Clips of {} frames are shorter than a sequence of {}'.format(
                short[0], frames_per_seq))

    @classmethod
    def from_disk(cls, root, bundle, frames_per_seq, motion_frames, window, manifest=None):
        manifest = manifest or synthdata.load_manifest(root)
        clips = [synthdata.load_clip(root, manifest, record) for record in manifest['clips']]
        return cls(clips, bundle, frames_per_seq, motion_frames, window)

    @lazy
    def latents(self):
        """
        Per clip, (zx, zd) scaled latents of every frame
        """
        encoded = []
        with no_grad():
            for clip in self.clips:
                rgb = np.stack([frame.rgb for frame in clip.frames])
                depth = np.stack([frame.depth for frame in clip.frames])
                encoded.append((self.bundle.encode_rgb(rgb), self.bundle.encode_depth(depth)))
        return encoded

    def sequence(self, rng):
        clip_index = int(rng.integers(len(self.clips)))
        clip = self.clips[clip_index]
        zx, zd = self.latents[clip_index]
        total = len(clip.frames)
        start = int(rng.integers(0, total - self.frames_per_seq + 1))
        stop = start + self.frames_per_seq
        reference_index = int(rng.integers(total))
        reference = zx[reference_index:reference_index + 1]
        if start >= self.motion_frames:
            context = zx[start - self.motion_frames:start]
        else:
            missing = self.motion_frames - start
            context = np.concatenate([np.repeat(reference, missing, axis=0), zx[:start]])
        return {
            'context': context,
            'zx': zx[start:stop],
            'zd': zd[start:stop],
            'reference': reference,
            'windows': audio_windows(clip.audio, start, self.frames_per_seq, self.window),
        }


class BatchLoader:
    """
    Iterates batches from `make_batch(indices, rng)` over randomly drawn
    indices; with `workers` > 0 batch assembly runs on a thread pool with at
    most `prefetch` batches in flight
    """

    def __init__(self, size, batch_size, make_batch, seed=0, workers=0, prefetch=4):
        if batch_size < 1:
            raise ConfigurationError('Batch size must be positive, got {}'.format(batch_size))
        self.size = size
        self.batch_size = batch_size
        self.make_batch = make_batch
        self.seed = seed
        self.workers = workers
        self.prefetch = max(1, prefetch)

    def _jobs(self, count):
        rng = np.random.default_rng([self.seed, 1])
        for position in range(count):
            indices = rng.integers(0, self.size, self.batch_size)
            yield indices, np.random.default_rng([self.seed, 2, position])

    def batches(self, count):
        if not self.workers:
            for indices, rng in self._jobs(count):
                yield self.make_batch(indices, rng)
            return
        with ThreadPoolExecutor(max_workers=self.workers) as pool:
            pending = deque()
            for indices, rng in self._jobs(count):
                pending.append(pool.submit(self.make_batch, indices, rng))
                if len(pending) >= self.prefetch:
                    yield pending.popleft().result()
            while pending:
                yield pending.popleft().result()


# Functions #########################################################

def image_batch(samples):
    """
    make_batch callable producing pixel-space Batches
    """
    def make_batch(indices, rng):
        references = [samples.reference_index(int(index), rng) for index in indices]
        return Batch(samples.rgb[indices], samples.depth[indices], samples.masks[indices],
                     samples.rgb[references], indices)
    return make_batch


def latent_batch(samples, cache):
    """
    make_batch callable producing LatentBatches from cached latents
    """
    def make_batch(indices, rng):
        references = [samples.reference_index(int(index), rng) for index in indices]
        return LatentBatch(cache.zx[indices], cache.zd[indices], cache.zx[references], indices)
    return make_batch
