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
Relative-depth evaluation, error maps, normals and diffuse relighting.

Metrics follow the scale-and-shift invariant protocol: predictions are
aligned to the ground truth by least squares over the evaluation mask before
AbsRel, delta1 and RMSE are computed. RMSE is reported in the units of the
inputs, which for the pipeline is normalized depth.
"""

# Imports ###########################################################

import logging
from collections import namedtuple

import numpy as np

from .errors import ConfigurationError, DegenerateAlignmentError, EmptyMaskError, ShapeError

# Globals ###########################################################

log = logging.getLogger(__name__)

DELTA1_THRESHOLD = 1.25
FLOOR_FRACTION = 1e-4
POSITIVE_OFFSET = 0.1
ERROR_LIMIT = 0.1
OUTSIDE_GRAY = 0.5
METRIC_COLUMNS = ('AbsRel', 'delta1', 'RMSE')


# Classes ###########################################################

class DepthMetrics(namedtuple('DepthMetrics', ['abs_rel', 'delta1', 'rmse'])):
    def as_row(self):
        return [self.abs_rel, self.delta1, self.rmse]


# Functions #########################################################

def _mask(mask, shape):
    if mask is None:
        return np.ones(shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != shape:
        raise ShapeError('evaluation mask', 'all', shape, mask.shape)
    if not mask.any():
        raise EmptyMaskError('Evaluation mask selects no pixels')
    return mask


def _pair(pred, gt):
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ShapeError('predicted depth', 'all', gt.shape, pred.shape)
    return pred, gt


def fit_scale_shift(pred, gt, mask=None):
    """
    Least-squares (s, t) minimizing sum over the mask of (s pred + t - gt)^2
    """
    pred, gt = _pair(pred, gt)
    mask = _mask(mask, gt.shape)
    p = pred[mask]
    g = gt[mask]
    if np.ptp(g) == 0.0:
        raise DegenerateAlignmentError('Ground truth is constant under the mask; scale and shift are undefined')
    design = np.stack([p, np.ones_like(p)], axis=1)
    (scale, shift), _, _, _ = np.linalg.lstsq(design, g, rcond=None)
    return float(scale), float(shift)


def align_depth(pred, gt, mask=None):
    scale, shift = fit_scale_shift(pred, gt, mask)
    log.debug('Aligned prediction with scale %.6g and shift %.6g', scale, shift)
    return scale * np.asarray(pred, dtype=np.float64) + shift


def to_positive_range(pred, gt, mask=None):
    """
    Shift both maps so that the masked ground-truth minimum sits at 0.1 of the
    masked ground-truth range, which makes ratio metrics meaningful for signed
    (normalized) depth
    """
    pred, gt = _pair(pred, gt)
    mask = _mask(mask, gt.shape)
    low = gt[mask].min()
    spread = np.ptp(gt[mask])
    shift = POSITIVE_OFFSET * spread - low
    return pred + shift, gt + shift


def depth_metrics(pred_aligned, gt, mask=None):
    """
    AbsRel, delta1 and RMSE over the mask; the ground truth must be positive
    there, predictions are floored at a small fraction of its range
    """
    pred, gt = _pair(pred_aligned, gt)
    mask = _mask(mask, gt.shape)
    p = pred[mask]
    g = gt[mask]
    if np.any(g <= 0.0):
        raise ConfigurationError('Ratio metrics need positive ground truth; shift it with to_positive_range()')
    spread = np.ptp(g)
    floor = FLOOR_FRACTION * (spread if spread > 0.0 else g.max())
    p = np.maximum(p, floor)
    abs_rel = float(np.mean(np.abs(p - g) / g))
    delta1 = float(np.mean(np.maximum(p / g, g / p) < DELTA1_THRESHOLD))
    rmse = float(np.sqrt(np.mean((p - g) ** 2)))
    return DepthMetrics(abs_rel, delta1, rmse)


def raw_depth_metrics(pred, gt, mask=None, signed=False):
    """
    Metrics without any alignment
    """
    if signed:
        pred, gt = to_positive_range(pred, gt, mask)
    return depth_metrics(pred, gt, mask)


def evaluate_depth(pred, gt, mask=None, signed=True):
    """
    The full protocol: align, shift signed depth into a positive range, score
    """
    aligned = align_depth(pred, gt, mask)
    if signed:
        aligned, gt = to_positive_range(aligned, gt, mask)
    return depth_metrics(aligned, gt, mask)


def mean_metrics(metrics):
    if not metrics:
        raise ConfigurationError('No metrics to aggregate')
    values = np.asarray([list(item) for item in metrics], dtype=np.float64)
    return DepthMetrics(*[float(value) for value in values.mean(axis=0)])


def summary_table(rows, title=None):
    """
    Text table of (name, DepthMetrics) rows with AbsRel, delta1 and RMSE
    columns; RMSE is in normalized depth units
    """
    name_width = max([len('Method')] + [len(str(name)) for name, _ in rows])
    header = '{:<{width}}  {:>8}  {:>8}  {:>8}'.format('Method', 'AbsRel', 'δ1', 'RMSE', width=name_width)
    lines = []
    if title:
        lines.append(title)
    lines.append(header)
    lines.append('-' * len(header))
    for name, metrics in rows:
        lines.append('{:<{width}}  {:>8.3f}  {:>8.3f}  {:>8.3f}'.format(
            str(name), metrics.abs_rel, metrics.delta1, metrics.rmse, width=name_width))
    lines.append('(RMSE in normalized depth units)')
    return '\n'.join(lines)


def error_map(pred_aligned, gt, mask=None, limit=ERROR_LIMIT):
    """
    [H, W, 3] image in [0, 1]: signed error clamped to +/-limit on a linear
    blue-white-red ramp (white is no error, red is too far), gray outside the mask
    """
    pred, gt = _pair(pred_aligned, gt)
    if mask is None:
        mask = np.ones(gt.shape, dtype=bool)
    mask = np.asarray(mask, dtype=bool)
    error = np.clip(pred - gt, -limit, limit) / limit
    positive = np.maximum(error, 0.0)
    negative = np.maximum(-error, 0.0)
    image = np.stack([1.0 - negative, 1.0 - positive - negative, 1.0 - positive], axis=-1)
    image[~mask] = OUTSIDE_GRAY
    return image


def normals_from_depth(depth, spacing=1.0):
    """
    Unit normals [3, H, W] of a height field: larger values are nearer the
    viewer, u runs along columns and v along rows. Central differences inside,
    one-sided differences on the borders. Pass the negated map for distance
    depth.
    """
    depth = np.asarray(depth, dtype=np.float64)
    if depth.ndim != 2:
        raise ShapeError('depth map', 'ndim', 2, depth.ndim)
    du = np.gradient(depth, spacing, axis=1)
    dv = np.gradient(depth, spacing, axis=0)
    normals = np.stack([-du, -dv, np.ones_like(depth)])
    return normals / np.linalg.norm(normals, axis=0, keepdims=True)


def shading(normals, light_dir, ambient=0.2):
    light = np.asarray(light_dir, dtype=np.float64)
    length = np.linalg.norm(light)
    if length == 0.0:
        raise ConfigurationError('Light direction must be non-zero')
    light = light / length
    lambert = np.maximum(np.tensordot(light, np.asarray(normals, dtype=np.float64), axes=1), 0.0)
    return ambient + (1.0 - ambient) * lambert


def relight(rgb, normals, light_dir, ambient=0.2):
    """
    Multiply a [3, H, W] image with values in [0, 1] by a diffuse shading layer
    """
    rgb = np.asarray(rgb, dtype=np.float64)
    layer = shading(normals, light_dir, ambient)
    return np.clip(rgb * layer[None], 0.0, 1.0)


def mouth_opening(depths, region, face_mask=None):
    """
    Per-frame opening of the mouth: mean depth inside `region` minus the
    median depth over the face
    """
    depths = np.asarray(depths, dtype=np.float64)
    region = np.asarray(region, dtype=bool)
    if not region.any():
        raise EmptyMaskError('Mouth region selects no pixels')
    face = np.ones(region.shape, dtype=bool) if face_mask is None else np.asarray(face_mask, dtype=bool)
    return np.array([frame[region].mean() - np.median(frame[face]) for frame in depths])


def audio_sync_correlation(signal, openings):
    """
    Pearson correlation of two per-frame series; 0 when either is constant
    """
    signal = np.asarray(signal, dtype=np.float64)
    openings = np.asarray(openings, dtype=np.float64)
    if signal.shape != openings.shape:
        raise ShapeError('openings', 0, signal.shape, openings.shape)
    if np.std(signal) == 0.0 or np.std(openings) == 0.0:
        return 0.0
    return float(np.corrcoef(signal, openings)[0, 1])


def boundary_continuity_ratio(frames, chunk):
    """
    Mean absolute per-pixel change across chunk boundaries divided by the mean
    change between consecutive frames inside chunks
    """
    frames = np.asarray(frames, dtype=np.float64)
    steps = np.abs(np.diff(frames, axis=0)).reshape(frames.shape[0] - 1, -1).mean(axis=1)
    boundary = (np.arange(1, frames.shape[0]) % chunk) == 0
    if not boundary.any() or boundary.all():
        raise ConfigurationError('Clip of {} frames has no chunk boundary for chunks of {}'.format(
            frames.shape[0], chunk))
    within = steps[~boundary].mean()
    if within == 0.0:
        return float('inf') if steps[boundary].mean() > 0.0 else 1.0
    return float(steps[boundary].mean() / within)


def psnr(image, target, peak=2.0):
    """
    Peak signal-to-noise ratio in dB; the default peak suits [-1, 1] images
    """
    image, target = _pair(image, target)
    mse = np.mean((image - target) ** 2)
    if mse == 0.0:
        return float('inf')
    return float(10.0 * np.log10(peak * peak / mse))
