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
The diffusion process: variance schedule, forward noising of single and joint
latents, the joint noise-prediction loss and the reverse samplers.

Level 0 is the clean latent (alpha_bar = 1); levels 1..L are noisy. Joint
quantities always concatenate the appearance half before the depth half along
the channel axis.
"""

# Imports ###########################################################

import logging
from collections import namedtuple

import numpy as np
from tqdm import tqdm

from . import functional as F
from .errors import ConfigurationError, LevelError, ShapeError
from .tensor import Tensor

# Globals ###########################################################

log = logging.getLogger(__name__)

CHANNEL_AXIS = -3
SAMPLERS = ('ddim', 'ddpm')


# Classes ###########################################################

class NoiseSchedule:
    """
    Linear beta schedule over `levels` noise levels

    Arrays are indexed by level and have `levels + 1` entries; entry 0 is the
    clean endpoint (beta 0, alpha_bar 1).
    """

    def __init__(self, levels, beta_min, beta_max):
        self.levels = int(levels)
        self.beta_min = float(beta_min)
        self.beta_max = float(beta_max)
        betas = np.linspace(self.beta_min, self.beta_max, self.levels, dtype=np.float64)
        self.beta = np.concatenate([[0.0], betas])
        self.alpha = 1.0 - self.beta
        self.alpha_bar = np.cumprod(self.alpha)

    def __repr__(self):
        return 'NoiseSchedule(levels={}, beta_min={}, beta_max={})'.format(self.levels, self.beta_min, self.beta_max)

    def check_level(self, level, allow_zero=False):
        low = 0 if allow_zero else 1
        levels = np.asarray(level)
        if np.any(levels < low) or np.any(levels > self.levels):
            raise LevelError('Level {} outside [{}, {}]'.format(level, low, self.levels))
        return levels.astype(np.int64)

    def to_dict(self):
        return {'levels': self.levels, 'beta_min': self.beta_min, 'beta_max': self.beta_max}

    @classmethod
    def from_dict(cls, values):
        return make_schedule(values['levels'], values['beta_min'], values['beta_max'])


class JointLatent(namedtuple('JointLatent', ['zx', 'zd', 'level'])):
    """
    Appearance and depth latents at one shared noise level
    """

    def __new__(cls, zx, zd, level):
        zx = np.asarray(zx)
        zd = np.asarray(zd)
        if zx.shape != zd.shape:
            raise ShapeError('joint latent depth half', 'all', zx.shape, zd.shape)
        return super().__new__(cls, zx, zd, level)

    @property
    def joint(self):
        return np.concatenate([self.zx, self.zd], axis=CHANNEL_AXIS)

    @classmethod
    def from_joint(cls, joint, level):
        zx, zd = split_joint(joint)
        return cls(zx, zd, level)


class NoisePair(namedtuple('NoisePair', ['ex', 'ed'])):
    @property
    def joint(self):
        if isinstance(self.ex, Tensor) or isinstance(self.ed, Tensor):
            return F.concat(self.ex, self.ed, axis=CHANNEL_AXIS)
        return np.concatenate([self.ex, self.ed], axis=CHANNEL_AXIS)

    @classmethod
    def from_joint(cls, joint):
        return cls(*split_joint(joint))


# Functions #########################################################

def make_schedule(levels, beta_min, beta_max):
    if int(levels) < 1:
        raise ConfigurationError('Schedule needs at least one level, got {}'.format(levels))
    if not 0.0 < beta_min <= beta_max < 1.0:
        raise ConfigurationError('Schedule needs 0 < beta_min <= beta_max < 1, got {} and {}'.format(
            beta_min, beta_max))
    return NoiseSchedule(levels, beta_min, beta_max)


def split_joint(joint):
    """
    Split along the channel axis into the appearance and depth halves
    """
    channels = joint.shape[CHANNEL_AXIS]
    if channels % 2:
        raise ShapeError('joint latent', CHANNEL_AXIS, 'an even channel count', channels)
    half = channels // 2
    return joint[..., :half, :, :], joint[..., half:, :, :]


def _per_sample(values, like):
    """
    Broadcast per-sample coefficients over the trailing [C, h, w] axes
    """
    values = np.asarray(values, dtype=np.float64)
    if values.ndim == 0:
        return values
    return values.reshape(values.shape + (1,) * (like.ndim - values.ndim))


def add_noise(z0, eps, level, schedule, allow_zero=False):
    """
    z_l = sqrt(alpha_bar_l) z_0 + sqrt(1 - alpha_bar_l) eps

    `level` is a scalar or one level per leading batch element.
    """
    z0 = np.asarray(z0)
    eps = np.asarray(eps)
    if z0.shape != eps.shape:
        raise ShapeError('noise', 'all', z0.shape, eps.shape)
    levels = schedule.check_level(level, allow_zero=allow_zero)
    alpha_bar = _per_sample(schedule.alpha_bar[levels], z0)
    noisy = np.sqrt(alpha_bar) * z0 + np.sqrt(1.0 - alpha_bar) * eps
    return noisy.astype(z0.dtype)


def add_noise_joint(zx0, zd0, level, rng, schedule):
    """
    Noise both domains to the same level with independent Gaussian draws
    """
    zx0 = np.asarray(zx0)
    zd0 = np.asarray(zd0)
    if zx0.shape != zd0.shape:
        raise ShapeError('depth latent', 'all', zx0.shape, zd0.shape)
    noise = NoisePair(
        rng.standard_normal(zx0.shape).astype(zx0.dtype),
        rng.standard_normal(zd0.shape).astype(zd0.dtype),
    )
    latent = JointLatent(
        add_noise(zx0, noise.ex, level, schedule),
        add_noise(zd0, noise.ed, level, schedule),
        level,
    )
    return latent, noise


def joint_loss(eps_hat, eps):
    """
    Mean squared error between the concatenated predicted and true noise

    Returns a scalar tensor, differentiable when `eps_hat` is.
    """
    predicted = eps_hat.joint if isinstance(eps_hat, NoisePair) else eps_hat
    target = eps.joint if isinstance(eps, NoisePair) else eps
    if isinstance(target, Tensor):
        target = target.data
    if not isinstance(predicted, Tensor):
        predicted = Tensor(predicted, dtype=np.asarray(predicted).dtype)
    return F.mse(predicted, Tensor(target, dtype=predicted.dtype))


def ancestral_update(z, eps_hat, level, schedule, noise=None):
    """
    z_{l-1} = (z_l - beta_l / sqrt(1 - alpha_bar_l) eps_hat) / sqrt(alpha_l) + sigma_l xi
    with sigma_l^2 = beta_l (1 - alpha_bar_{l-1}) / (1 - alpha_bar_l)
    """
    beta = schedule.beta[level]
    alpha = schedule.alpha[level]
    alpha_bar = schedule.alpha_bar[level]
    mean = (z - beta / np.sqrt(1.0 - alpha_bar) * eps_hat) / np.sqrt(alpha)
    variance = beta * (1.0 - schedule.alpha_bar[level - 1]) / (1.0 - alpha_bar)
    if level == 1 or noise is None:
        return mean.astype(z.dtype)
    return (mean + np.sqrt(variance) * noise).astype(z.dtype)


def ddpm_step(z, eps_hat, rng, schedule):
    """
    One ancestral step from `z.level` to `z.level - 1`, same rule for both
    domains; the last step (level 1) is deterministic
    """
    level = int(z.level)
    if level < 1:
        raise LevelError('Nothing to denoise at level 0')
    schedule.check_level(level)
    if level > 1:
        xi = NoisePair(rng.standard_normal(z.zx.shape), rng.standard_normal(z.zd.shape))
    else:
        xi = NoisePair(None, None)
    return JointLatent(
        ancestral_update(z.zx, np.asarray(eps_hat.ex), level, schedule, xi.ex),
        ancestral_update(z.zd, np.asarray(eps_hat.ed), level, schedule, xi.ed),
        level - 1,
    )


def predict_clean(z, eps_hat, level, schedule):
    alpha_bar = schedule.alpha_bar[level]
    return (z - np.sqrt(1.0 - alpha_bar) * eps_hat) / np.sqrt(alpha_bar)


def ddim_update(z, eps_hat, level, next_level, schedule):
    clean = predict_clean(z, eps_hat, level, schedule)
    if next_level == 0:
        return clean.astype(z.dtype)
    alpha_bar_next = schedule.alpha_bar[next_level]
    return (np.sqrt(alpha_bar_next) * clean + np.sqrt(1.0 - alpha_bar_next) * eps_hat).astype(z.dtype)


def ddim_step(z, eps_hat, next_level, schedule):
    """
    Deterministic jump from `z.level` to `next_level` through the predicted
    clean latent
    """
    level = int(z.level)
    schedule.check_level(level)
    if next_level >= level or next_level < 0:
        raise LevelError('DDIM target level {} must lie in [0, {})'.format(next_level, level))
    return JointLatent(
        ddim_update(z.zx, np.asarray(eps_hat.ex), level, next_level, schedule),
        ddim_update(z.zd, np.asarray(eps_hat.ed), level, next_level, schedule),
        next_level,
    )


def sampling_levels(levels, steps):
    """
    Descending, roughly evenly strided levels from `levels` down to 1
    """
    if steps < 1:
        raise ConfigurationError('Sampler needs at least one step, got {}'.format(steps))
    steps = min(int(steps), int(levels))
    grid = np.round(np.linspace(1, levels, steps)).astype(np.int64)
    return [int(level) for level in np.unique(grid)[::-1]]


def reverse_sample(denoise_fn, shape, schedule, rng, sampler='ddim', steps=50, hook=None, initial=None,
                   progress=False):
    """
    Run the reverse process from pure noise (or `initial`, a JointLatent at
    level L) down to level 0

    `denoise_fn(z)` returns the NoisePair prediction for the JointLatent `z`.
    `hook(z)`, when given, may replace the latent after every step; it is how
    inpainting re-imposes the known domain. DDPM ignores `steps` and walks
    every level.
    """
    if sampler not in SAMPLERS:
        raise ConfigurationError('Unknown sampler `{}` (choose from {})'.format(sampler, ', '.join(SAMPLERS)))
    if initial is None:
        initial = JointLatent(
            rng.standard_normal(shape).astype(np.float32),
            rng.standard_normal(shape).astype(np.float32),
            schedule.levels,
        )
    z = initial

    if sampler == 'ddpm':
        levels = list(range(schedule.levels, 0, -1))
    else:
        levels = sampling_levels(schedule.levels, steps)

    for position, level in enumerate(tqdm(levels, disable=not progress, desc=sampler, leave=False)):
        if z.level != level:
            z = z._replace(level=level)
        eps_hat = denoise_fn(z)
        if sampler == 'ddpm':
            z = ddpm_step(z, eps_hat, rng, schedule)
        else:
            next_level = levels[position + 1] if position + 1 < len(levels) else 0
            z = ddim_step(z, eps_hat, next_level, schedule)
        if hook is not None:
            z = hook(z)
    return z
