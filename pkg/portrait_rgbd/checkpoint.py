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
Single-file checkpoint archives.

Layout: the 8-byte magic, the little-endian 64-bit length of the header, the
header itself (UTF-8 JSON with sorted keys) and the payload of little-endian
float32 tensors. The header carries the manifest: stage, schedule, latent
scale, model configurations, config hash, lineage and a tensor index mapping
each name to its shape, byte offset into the payload and SHA-256 checksum.
"""

# Imports ###########################################################

import hashlib
import json
import logging
import os
import struct
from collections import OrderedDict, namedtuple

import numpy as np

from .backbone import ReferenceNet, UNet, UNetConfig
from .bundle import REFNET, ModelBundle
from .config import PARENT_STAGE, STAGES
from .errors import CheckpointError, DataError
from .motion import MotionConfig, MotionModel
from .schedule import NoiseSchedule
from .vae import VAE, DepthNormalization, VAEConfig

# Globals ###########################################################

log = logging.getLogger(__name__)

MAGIC = b'PRGBDCK1'
LENGTH = struct.Struct('<Q')
PAYLOAD_DTYPE = np.dtype('<f4')
FORMAT_VERSION = 1

Checkpoint = namedtuple('Checkpoint', ['manifest', 'tensors', 'file_hash', 'path'])


# Functions #########################################################

def sha256_hex(data):
    return hashlib.sha256(data).hexdigest()


def file_hash(path):
    digest = hashlib.sha256()
    try:
        with open(path, 'rb') as handle:
            for block in iter(lambda: handle.read(1 << 20), b''):
                digest.update(block)
    except OSError as error:
        raise DataError(path, error.strerror or str(error))
    return digest.hexdigest()


def encode_archive(tensors, manifest):
    """
    Archive bytes for an ordered mapping of name -> array and a manifest dict
    (the tensor index is added to a copy of the manifest)
    """
    index = {}
    chunks = []
    offset = 0
    for name, value in tensors.items():
        data = np.ascontiguousarray(value, dtype=PAYLOAD_DTYPE).tobytes()
        index[name] = {'shape': list(np.shape(value)), 'offset': offset, 'checksum': sha256_hex(data)}
        chunks.append(data)
        offset += len(data)
    header = dict(manifest)
    header['format'] = FORMAT_VERSION
    header['tensors'] = index
    header_bytes = json.dumps(header, sort_keys=True, separators=(',', ':')).encode('utf-8')
    return b''.join([MAGIC, LENGTH.pack(len(header_bytes)), header_bytes] + chunks)


def decode_archive(data, verify=True, source='<memory>'):
    """
    (manifest, tensors) from archive bytes; tensors come back in payload order
    """
    if data[:len(MAGIC)] != MAGIC:
        raise CheckpointError('{}: not a checkpoint archive'.format(source))
    start = len(MAGIC) + LENGTH.size
    if len(data) < start:
        raise CheckpointError('{}: truncated header'.format(source))
    (header_length,) = LENGTH.unpack(data[len(MAGIC):start])
    try:
        manifest = json.loads(data[start:start + header_length].decode('utf-8'))
    except ValueError as error:
        raise CheckpointError('{}: corrupt header ({})'.format(source, error))
    payload = memoryview(data)[start + header_length:]
    index = manifest.pop('tensors', {})
    tensors = OrderedDict()
    for name, entry in sorted(index.items(), key=lambda item: item[1]['offset']):
        count = int(np.prod(entry['shape'], dtype=np.int64))
        end = entry['offset'] + count * PAYLOAD_DTYPE.itemsize
        if end > len(payload):
            raise CheckpointError('{}: tensor `{}` extends past the payload'.format(source, name))
        chunk = bytes(payload[entry['offset']:end])
        if verify and sha256_hex(chunk) != entry['checksum']:
            raise CheckpointError('{}: checksum mismatch for tensor `{}`'.format(source, name))
        tensors[name] = np.frombuffer(chunk, dtype=PAYLOAD_DTYPE).reshape(entry['shape']).astype(np.float32)
    return manifest, tensors


def save_checkpoint(path, tensors, manifest):
    """
    Write an archive and return its SHA-256
    """
    data = encode_archive(tensors, manifest)
    directory = os.path.dirname(path)
    try:
        if directory:
            os.makedirs(directory, exist_ok=True)
        with open(path, 'wb') as handle:
            handle.write(data)
    except OSError as error:
        raise DataError(path, error.strerror or str(error))
    digest = sha256_hex(data)
    log.info('Saved %d tensors to %s (%s)', len(tensors), path, digest[:12])
    return digest


def load_checkpoint(path, verify=True):
    try:
        with open(path, 'rb') as handle:
            data = handle.read()
    except FileNotFoundError:
        raise CheckpointError('{}: checkpoint not found'.format(path))
    except OSError as error:
        raise DataError(path, error.strerror or str(error))
    manifest, tensors = decode_archive(data, verify=verify, source=path)
    return Checkpoint(manifest, tensors, sha256_hex(data), path)


def check_lineage(manifest, source=''):
    """
    Every non-vae checkpoint must descend from a vae checkpoint through its
    recorded lineage, the last entry of which is its parent
    """
    stage = manifest.get('stage')
    if stage not in STAGES:
        raise CheckpointError('{}: unknown stage `{}`'.format(source, stage))
    if stage == 'vae':
        return
    lineage = manifest.get('lineage') or []
    if not lineage or lineage[0].get('stage') != 'vae':
        raise CheckpointError('{}: lineage of `{}` checkpoint does not reach a vae checkpoint'.format(source, stage))
    if lineage[-1].get('hash') != manifest.get('parent_hash'):
        raise CheckpointError('{}: parent hash does not match the recorded lineage'.format(source))


def require_stage(checkpoint, stages, needed_by=None):
    stages = (stages,) if isinstance(stages, str) else tuple(stages)
    stage = checkpoint.manifest.get('stage')
    if stage not in stages:
        prefix = 'Stage `{}` requires'.format(needed_by) if needed_by else 'Expected'
        raise CheckpointError('{} a `{}` checkpoint, {} is a `{}` checkpoint'.format(
            prefix, '` or `'.join(stages), checkpoint.path, stage))
    return checkpoint


def load_parent(path, stage):
    """
    The checkpoint a `stage` run starts from, checked against the stage order
    """
    required = PARENT_STAGE[stage]
    if required is None:
        return None
    if not path:
        raise CheckpointError('Stage `{}` requires a `{}` checkpoint; set `parent` in the run configuration'.format(
            stage, required))
    accepted = ('rgb', 'joint') if stage == 'joint' else (required,)
    checkpoint = load_checkpoint(path)
    check_lineage(checkpoint.manifest, path)
    return require_stage(checkpoint, accepted, needed_by=stage)


def lineage_after(parent):
    if parent is None:
        return []
    return list(parent.manifest.get('lineage', [])) + [{'stage': parent.manifest['stage'], 'hash': parent.file_hash}]


def bundle_manifest(bundle, config_hash='', parent=None, extras=None):
    model = {
        'vae': bundle.vae.config.to_dict(),
        'unet': bundle.unet.config.to_dict() if bundle.unet is not None else None,
        'refnet': bundle.refnet is not None,
        'motion': dict(bundle.motion.config._asdict()) if bundle.motion is not None else None,
        'reference_mode': bundle.reference_mode,
        'sampler': bundle.sampler,
        'sample_steps': bundle.sample_steps,
    }
    return {
        'stage': bundle.stage,
        'schedule': bundle.schedule.to_dict() if bundle.schedule is not None else None,
        'latent_scale': float(bundle.vae.latent_scale),
        'depth_range': [bundle.norm.near, bundle.norm.far],
        'config_hash': config_hash,
        'parent_hash': parent.file_hash if parent is not None else None,
        'lineage': lineage_after(parent),
        'model': model,
        'extras': extras or {},
    }


def save_bundle(path, bundle, config_hash='', parent=None, extras=None):
    return save_checkpoint(path, bundle.state_tensors(), bundle_manifest(bundle, config_hash, parent, extras))


def _split_prefix(tensors, prefix):
    marker = prefix + '.'
    return OrderedDict((name[len(marker):], value) for name, value in tensors.items() if name.startswith(marker))


def bundle_from_checkpoint(checkpoint, dtype=np.float32):
    """
    Rebuild the modules described by the manifest and load their tensors
    """
    manifest = checkpoint.manifest
    model = manifest['model']
    vae = VAE(VAEConfig(**model['vae']))
    vae.to_dtype(dtype)
    vae.load_state_dict(_split_prefix(checkpoint.tensors, 'vae'))
    vae.latent_scale = manifest['latent_scale']
    norm = DepthNormalization(*manifest['depth_range'])
    schedule = NoiseSchedule.from_dict(manifest['schedule']) if manifest.get('schedule') else None

    unet = refnet = motion = None
    if model.get('unet'):
        unet_config = UNetConfig.from_dict(model['unet'])
        unet = UNet(unet_config).to_dtype(dtype)
        unet.load_state_dict(_split_prefix(checkpoint.tensors, 'unet'))
        if model.get('refnet'):
            refnet = ReferenceNet(unet_config).to_dtype(dtype)
            refnet.load_state_dict(_split_prefix(checkpoint.tensors, 'refnet'))
        if model.get('motion'):
            motion = MotionModel(unet_config, MotionConfig(**model['motion'])).to_dtype(dtype)
            motion.load_state_dict(_split_prefix(checkpoint.tensors, 'motion'))
    return ModelBundle(vae, unet, schedule, norm, refnet=refnet, motion=motion, stage=manifest['stage'],
                       reference_mode=model.get('reference_mode', REFNET), sampler=model.get('sampler', 'ddim'),
                       sample_steps=model.get('sample_steps', 50))


def load_bundle(path, stages=None, dtype=np.float32):
    """
    (bundle, checkpoint) for the archive at `path`, optionally requiring one
    of `stages`
    """
    checkpoint = load_checkpoint(path)
    check_lineage(checkpoint.manifest, path)
    if stages is not None:
        require_stage(checkpoint, stages)
    return bundle_from_checkpoint(checkpoint, dtype), checkpoint
