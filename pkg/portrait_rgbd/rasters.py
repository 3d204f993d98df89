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
On-disk formats for images, depth maps, masks and audio features.

RGB is 8-bit PNG, depth is 16-bit greyscale PNG quantized linearly over
[near, far], masks are 1-bit PNG and part labels 8-bit greyscale PNG. Audio
features live in a small binary file: magic, uint32 T, uint32 A, float32
frame rate, then T x A little-endian float32 values.
"""

# Imports ###########################################################

import logging
import struct

import numpy as np
import png

from .errors import DataError
from .motion import AudioTrack

# Globals ###########################################################

log = logging.getLogger(__name__)

DEPTH_LEVELS = 65535
AUDIO_MAGIC = b'PRGBDAF1'
AUDIO_HEADER = struct.Struct('<IIf')


# Functions #########################################################

def _write_png(path, rows, width, height, **options):
    try:
        with open(path, 'wb') as handle:
            png.Writer(width, height, **options).write(handle, rows)
    except OSError as error:
        raise DataError(path, error.strerror or str(error))


def _read_png(path):
    try:
        width, height, rows, info = png.Reader(filename=str(path)).read()
        array = np.array([list(row) for row in rows])
    except (OSError, png.Error) as error:
        raise DataError(path, str(error))
    return array.reshape(height, width, -1), info


def rgb_to_bytes(rgb):
    """
    [3, H, W] in [-1, 1] -> [H, W, 3] uint8
    """
    rgb = np.clip((np.asarray(rgb, dtype=np.float64) + 1.0) * 0.5, 0.0, 1.0)
    return np.round(rgb * 255.0).astype(np.uint8).transpose(1, 2, 0)


def bytes_to_rgb(data):
    return (data.astype(np.float32).transpose(2, 0, 1) / 255.0) * 2.0 - 1.0


def write_rgb(path, rgb):
    data = rgb_to_bytes(rgb)
    height, width, _ = data.shape
    _write_png(path, [row.reshape(-1).tolist() for row in data], width, height, greyscale=False, bitdepth=8)


def read_rgb(path):
    data, _ = _read_png(path)
    if data.shape[2] != 3:
        raise DataError(path, 'expected an RGB image, got {} planes'.format(data.shape[2]))
    return bytes_to_rgb(data)


def quantize_depth(depth, near, far):
    depth = np.clip(np.asarray(depth, dtype=np.float64), near, far)
    return np.round((depth - near) / (far - near) * DEPTH_LEVELS).astype(np.uint16)


def dequantize_depth(levels, near, far):
    return near + np.asarray(levels, dtype=np.float64) / DEPTH_LEVELS * (far - near)


def write_depth(path, depth, near, far):
    levels = quantize_depth(depth, near, far)
    height, width = levels.shape
    _write_png(path, [row.tolist() for row in levels], width, height, greyscale=True, bitdepth=16)


def read_depth(path, near, far):
    data, _ = _read_png(path)
    return dequantize_depth(data[:, :, 0], near, far)


def write_mask(path, mask):
    mask = np.asarray(mask).astype(bool).astype(np.uint8)
    height, width = mask.shape
    _write_png(path, [row.tolist() for row in mask], width, height, greyscale=True, bitdepth=1)


def read_mask(path):
    data, _ = _read_png(path)
    return data[:, :, 0].astype(bool)


def write_labels(path, labels):
    labels = np.asarray(labels, dtype=np.uint8)
    height, width = labels.shape
    _write_png(path, [row.tolist() for row in labels], width, height, greyscale=True, bitdepth=8)


def read_labels(path):
    data, _ = _read_png(path)
    return data[:, :, 0].astype(np.uint8)


def write_colormap(path, image):
    """
    [H, W, 3] floats in [0, 1] (error maps, plots of normals) as 8-bit RGB
    """
    data = np.round(np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0) * 255.0).astype(np.uint8)
    height, width, _ = data.shape
    _write_png(path, [row.reshape(-1).tolist() for row in data], width, height, greyscale=False, bitdepth=8)


def write_audio(path, track):
    features = np.asarray(track.features, dtype='<f4')
    frames, dim = features.shape
    try:
        with open(path, 'wb') as handle:
            handle.write(AUDIO_MAGIC)
            handle.write(AUDIO_HEADER.pack(frames, dim, track.frame_rate))
            handle.write(features.tobytes())
    except OSError as error:
        raise DataError(path, error.strerror or str(error))


def read_audio(path):
    try:
        with open(path, 'rb') as handle:
            payload = handle.read()
    except OSError as error:
        raise DataError(path, error.strerror or str(error))
    if payload[:len(AUDIO_MAGIC)] != AUDIO_MAGIC:
        raise DataError(path, 'not an audio feature file')
    offset = len(AUDIO_MAGIC)
    frames, dim, frame_rate = AUDIO_HEADER.unpack_from(payload, offset)
    offset += AUDIO_HEADER.size
    expected = frames * dim * 4
    if len(payload) - offset != expected:
        raise DataError(path, 'expected {} bytes of features, found {}'.format(expected, len(payload) - offset))
    features = np.frombuffer(payload, dtype='<f4', offset=offset).reshape(frames, dim)
    return AudioTrack(features.astype(np.float32), frame_rate)
