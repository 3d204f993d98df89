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
Procedural portrait-proxy RGBD data.

Heads are ray-cast with an orthographic camera: the image plane is z = 0,
rays travel along +z, pixel (i, j) sits at u = (j + 0.5) / W * 2 - 1
(right) and v = 1 - (i + 0.5) / H * 2 (up). Depth is the hit distance along
the ray. A head is a superellipsoid skull with two eye spheres, an
ellipsoidal nose and a mouth whose vertical opening follows the expression
scalar. The pose rotates the head about its centre (yaw about the vertical
axis, then pitch).

Shading and normals are expressed in the view frame: u right, v down, z
towards the viewer.
"""

# Imports ###########################################################

import json
import logging
import math
import os
from collections import namedtuple
from concurrent.futures import ThreadPoolExecutor

import numpy as np

from . import rasters
from .errors import ConfigurationError, DataError
from .motion import AudioTrack, FRAME_RATE
from .utils import ensure_dir

# Globals ###########################################################

log = logging.getLogger(__name__)

NEAR = 0.5
FAR = 2.0
HEAD_CENTER_Z = 1.25
AMBIENT = 0.2
SIZES = (32, 64, 128, 256)
MAX_ANGLE = math.radians(45.0)

MARCH_STEPS = 128
BISECTION_STEPS = 48

BACKGROUND, SKULL, EYE, NOSE, MOUTH = 0, 1, 2, 3, 4
STUDIO = 'studio'
WILD = 'wild'
EVAL_STUDIO = 'eval_studio'
EVAL_WILD = 'eval_wild'

Palette = namedtuple('Palette', ['skin', 'iris', 'lips', 'background'])
HeadGeometry = namedtuple('HeadGeometry', ['skull_radii', 'exponent', 'eyes', 'nose', 'mouth', 'palette'])
Eye = namedtuple('Eye', ['center', 'radius'])
Nose = namedtuple('Nose', ['center', 'radii'])
Mouth = namedtuple('Mouth', ['center_y', 'half_width'])
Rendering = namedtuple('Rendering', ['rgb', 'depth', 'valid_mask', 'parts'])

RGBDSample = namedtuple('RGBDSample', [
    'rgb', 'depth', 'valid_mask', 'parts', 'identity_id', 'pose', 'expression', 'split', 'light_dir'])
ClipSample = namedtuple('ClipSample', ['frames', 'audio', 'driving_signal'])

NOSE_RADII = (0.06, 0.16, 0.12)
NOSE_PROTRUSION = 0.10
SCLERA = np.array([0.95, 0.95, 0.92])
MOUTH_INTERIOR = np.array([0.25, 0.05, 0.08])
DEFAULT_PALETTE = Palette(np.array([0.8, 0.6, 0.5]), np.array([0.2, 0.3, 0.5]), np.array([0.7, 0.3, 0.3]),
                          np.array([0.2, 0.2, 0.25]))


# Classes ###########################################################

class SyntheticAudioProvider:
    """
    Per-frame audio features derived from a mouth-opening signal s:
    channel j is sin(pi (j + 1) s / 2 + phase_j) plus Gaussian noise, with
    phase_0 = 0 so that channel 0 grows monotonically with the opening
    """

    def __init__(self, dim=16, noise=0.05, frame_rate=FRAME_RATE, seed=0):
        self.dim = dim
        self.noise = noise
        self.frame_rate = frame_rate
        phases = np.random.default_rng(seed).uniform(0.0, 2.0 * math.pi, dim)
        phases[0] = 0.0
        self.phases = phases

    def __call__(self, driving_signal, rng):
        signal = np.asarray(driving_signal, dtype=np.float64)[:, None]
        harmonics = np.arange(1, self.dim + 1)[None, :]
        features = np.sin(math.pi * harmonics * signal / 2.0 + self.phases[None, :])
        features = features + self.noise * rng.standard_normal(features.shape)
        return AudioTrack(features.astype(np.float32), self.frame_rate)


# Functions #########################################################

def rotation(yaw, pitch):
    cy, sy = math.cos(yaw), math.sin(yaw)
    cp, sp = math.cos(pitch), math.sin(pitch)
    ry = np.array([[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]])
    rx = np.array([[1.0, 0.0, 0.0], [0.0, cp, -sp], [0.0, sp, cp]])
    return ry @ rx


def pixel_grid(height, width):
    """
    (u, v) image-plane coordinates of pixel centres, each [H, W]
    """
    u = (np.arange(width) + 0.5) / width * 2.0 - 1.0
    v = 1.0 - (np.arange(height) + 0.5) / height * 2.0
    return np.meshgrid(u, v)


def skull_front_z(radii, exponent, x, y):
    """
    Local z of the front (camera-facing) skull surface above (x, y)
    """
    a, b, c = radii
    inside = 1.0 - abs(x / a) ** exponent - abs(y / b) ** exponent
    return -c * max(inside, 0.0) ** (1.0 / exponent)


def head_geometry(identity_id):
    """
    Geometry and palette of an identity; the same id always gives the same head
    """
    rng = np.random.default_rng([7919, int(identity_id)])
    radii = (rng.uniform(0.38, 0.46), rng.uniform(0.50, 0.58), rng.uniform(0.40, 0.46))
    exponent = rng.uniform(2.0, 3.0)

    eye_x = rng.uniform(0.15, 0.18)
    eye_y = rng.uniform(0.08, 0.12)
    eye_radius = rng.uniform(0.055, 0.07)
    eyes = []
    for side in (-1.0, 1.0):
        surface = skull_front_z(radii, exponent, side * eye_x, eye_y)
        eyes.append(Eye(np.array([side * eye_x, eye_y, surface + 0.45 * eye_radius]), eye_radius))

    nose_y = rng.uniform(-0.02, 0.02)
    nose_center_z = -radii[2] - NOSE_PROTRUSION + NOSE_RADII[2]
    nose = Nose(np.array([0.0, nose_y, nose_center_z]), np.array(NOSE_RADII))
    mouth = Mouth(rng.uniform(-0.28, -0.24), rng.uniform(0.12, 0.16))

    red = rng.uniform(0.55, 0.95)
    green = red * rng.uniform(0.6, 0.85)
    blue = green * rng.uniform(0.6, 0.9)
    skin = np.array([red, green, blue])
    palette = Palette(
        skin=skin,
        iris=rng.uniform(0.05, 0.6, 3),
        lips=np.clip(skin * np.array([1.0, 0.55, 0.6]), 0.0, 1.0),
        background=rng.uniform(0.1, 0.4, 3),
    )
    return HeadGeometry(radii, exponent, tuple(eyes), nose, mouth, palette)


def _superellipsoid_value(points, radii, exponent):
    scaled = np.abs(points / np.asarray(radii)) ** exponent
    return scaled.sum(axis=-1) - 1.0


def _superellipsoid_normal(points, radii, exponent):
    radii = np.asarray(radii)
    scaled = points / radii
    grad = exponent * np.sign(scaled) * np.abs(scaled) ** (exponent - 1.0) / radii
    return grad / np.maximum(np.linalg.norm(grad, axis=-1, keepdims=True), 1e-12)


def _intersect_skull(origins, direction, radii, exponent):
    """
    First hit of rays with the superellipsoid: coarse march through the
    bounding box, then bisection on the bracketing interval
    """
    count = origins.shape[0]
    half = np.asarray(radii)
    with np.errstate(divide='ignore', invalid='ignore'):
        inverse = np.where(np.abs(direction) > 1e-12, 1.0 / direction, np.inf)
        t_low = (-half - origins) * inverse
        t_high = (half - origins) * inverse
    t_low = np.where(np.isnan(t_low), -np.inf, t_low)
    t_high = np.where(np.isnan(t_high), np.inf, t_high)
    t_enter = np.max(np.minimum(t_low, t_high), axis=1)
    t_exit = np.min(np.maximum(t_low, t_high), axis=1)
    t_enter = np.maximum(t_enter, 0.0)
    candidates = t_exit > t_enter
    t_enter = np.where(candidates, t_enter, 0.0)

    hit = np.zeros(count, dtype=bool)
    t_hit = np.full(count, np.inf)
    lower = t_enter.copy()
    upper = t_enter.copy()
    span = np.where(candidates, t_exit - t_enter, 0.0)
    previous = t_enter.copy()
    for step in range(MARCH_STEPS + 1):
        t = t_enter + span * step / MARCH_STEPS
        inside = _superellipsoid_value(origins + t[:, None] * direction, radii, exponent) <= 0.0
        fresh = candidates & inside & ~hit
        lower = np.where(fresh, previous, lower)
        upper = np.where(fresh, t, upper)
        hit |= fresh
        previous = t

    for _ in range(BISECTION_STEPS):
        middle = 0.5 * (lower + upper)
        inside = _superellipsoid_value(origins + middle[:, None] * direction, radii, exponent) <= 0.0
        upper = np.where(inside, middle, upper)
        lower = np.where(inside, lower, middle)
    t_hit[hit] = upper[hit]
    return t_hit


def _intersect_ellipsoid(origins, direction, center, radii):
    """
    Nearest positive hit with an axis-aligned ellipsoid (a sphere when the
    radii are equal); inf where the ray misses
    """
    radii = np.broadcast_to(np.asarray(radii, dtype=np.float64), (3,))
    o = (origins - center) / radii
    d = direction / radii
    a = float(d @ d)
    b = o @ d
    c = np.sum(o * o, axis=1) - 1.0
    disc = b * b - a * c
    t = np.full(origins.shape[0], np.inf)
    valid = disc >= 0.0
    root = (-b[valid] - np.sqrt(disc[valid])) / a
    t[valid] = np.where(root > 0.0, root, np.inf)
    return t


def render_geometry(geometry, pose, expression, light_dir, height, width):
    """
    Ray-cast `geometry`; returns a Rendering with rgb [3, H, W] in [-1, 1],
    depth [H, W], valid_mask [H, W] and part labels [H, W]
    """
    yaw, pitch = pose
    rot = rotation(yaw, pitch)
    center = np.array([0.0, 0.0, HEAD_CENTER_Z])
    u, v = pixel_grid(height, width)
    world_origins = np.stack([u.ravel(), v.ravel(), np.zeros(u.size)], axis=1)
    origins = (world_origins - center) @ rot
    direction = rot.T @ np.array([0.0, 0.0, 1.0])

    t_skull = _intersect_skull(origins, direction, geometry.skull_radii, geometry.exponent)
    hits = [t_skull]
    labels = [SKULL]
    for eye in geometry.eyes:
        hits.append(_intersect_ellipsoid(origins, direction, eye.center, eye.radius))
        labels.append(EYE)
    if geometry.nose is not None:
        hits.append(_intersect_ellipsoid(origins, direction, geometry.nose.center, geometry.nose.radii))
        labels.append(NOSE)
    hits = np.stack(hits)
    nearest = np.argmin(hits, axis=0)
    t = hits[nearest, np.arange(hits.shape[1])]
    valid = np.isfinite(t)
    parts = np.where(valid, np.asarray(labels)[nearest], BACKGROUND).astype(np.uint8)

    points = origins + np.where(valid, t, 0.0)[:, None] * direction
    normals = np.zeros_like(points)
    albedo = np.tile(geometry.palette.background, (points.shape[0], 1))

    on_skull = valid & (parts == SKULL)
    normals[on_skull] = _superellipsoid_normal(points[on_skull], geometry.skull_radii, geometry.exponent)
    albedo[on_skull] = geometry.palette.skin

    eye_index = 1
    for eye in geometry.eyes:
        on_eye = valid & (nearest == eye_index)
        offsets = (points[on_eye] - eye.center) / eye.radius
        normals[on_eye] = offsets
        iris = (-offsets[:, 2]) > 0.8
        albedo[on_eye] = np.where(iris[:, None], geometry.palette.iris, SCLERA)
        eye_index += 1

    if geometry.nose is not None:
        on_nose = valid & (nearest == eye_index)
        grad = (points[on_nose] - geometry.nose.center) / geometry.nose.radii ** 2
        normals[on_nose] = grad / np.linalg.norm(grad, axis=1, keepdims=True)
        albedo[on_nose] = geometry.palette.skin * 0.97

    depth_t = t.copy()
    if geometry.mouth is not None:
        half_height = 0.015 + 0.07 * expression
        dx = points[:, 0] / geometry.mouth.half_width
        dy = (points[:, 1] - geometry.mouth.center_y) / half_height
        radius2 = dx * dx + dy * dy
        front = on_skull & (points[:, 2] < 0.0)
        opening = front & (radius2 < 1.0)
        lip_dx = points[:, 0] / (geometry.mouth.half_width + 0.02)
        lip_dy = (points[:, 1] - geometry.mouth.center_y) / (half_height + 0.02)
        lips = front & ~opening & (lip_dx * lip_dx + lip_dy * lip_dy < 1.0)
        depth_t = np.where(opening, depth_t + 0.05 * expression * (1.0 - radius2), depth_t)
        albedo[lips] = geometry.palette.lips
        albedo[opening] = MOUTH_INTERIOR
        parts[opening | lips] = MOUTH

    light = np.asarray(light_dir, dtype=np.float64)
    norm = np.linalg.norm(light)
    if norm == 0.0:
        raise ConfigurationError('Light direction must be non-zero')
    light = light / norm
    world_normals = normals @ rot.T
    view_normals = world_normals * np.array([1.0, -1.0, -1.0])
    shading = AMBIENT + (1.0 - AMBIENT) * np.maximum(view_normals @ light, 0.0)
    color = np.where(valid[:, None], albedo * shading[:, None], albedo)
    rgb = np.clip(color, 0.0, 1.0).reshape(height, width, 3).transpose(2, 0, 1) * 2.0 - 1.0

    depth = np.where(valid, depth_t, FAR).reshape(height, width)
    return Rendering(rgb.astype(np.float32), depth, valid.reshape(height, width), parts.reshape(height, width))


def render_sample(identity_id, pose, expression, light_dir, height, width=None, split=STUDIO):
    width = height if width is None else width
    if height != width or height not in SIZES:
        raise ConfigurationError('Unsupported image size {}x{} (square, one of {})'.format(height, width, SIZES))
    if any(abs(angle) > MAX_ANGLE + 1e-12 for angle in pose):
        raise ConfigurationError('Pose {} exceeds +/-45 degrees'.format(pose))
    if not 0.0 <= expression <= 1.0:
        raise ConfigurationError('Expression must lie in [0, 1], got {}'.format(expression))
    rendering = render_geometry(head_geometry(identity_id), pose, expression, light_dir, height, width)
    return RGBDSample(
        rgb=rendering.rgb,
        depth=rendering.depth,
        valid_mask=rendering.valid_mask,
        parts=rendering.parts,
        identity_id=int(identity_id),
        pose=(float(pose[0]), float(pose[1])),
        expression=float(expression),
        split=split,
        light_dir=tuple(float(value) for value in light_dir),
    )


def _box_blur(values, mask, radius=2):
    """
    Mean of `values` over the masked pixels of a (2r+1)^2 window
    """
    padded_values = np.pad(np.where(mask, values, 0.0), radius)
    padded_mask = np.pad(mask.astype(np.float64), radius)
    total = np.zeros_like(values, dtype=np.float64)
    count = np.zeros_like(values, dtype=np.float64)
    height, width = values.shape
    for dy in range(2 * radius + 1):
        for dx in range(2 * radius + 1):
            total += padded_values[dy:dy + height, dx:dx + width]
            count += padded_mask[dy:dy + height, dx:dx + width]
    return np.where(count > 0, total / np.maximum(count, 1.0), values)


def bias_field(height, width, rng, mask=None):
    """
    Smooth field in [-1, 1], zero mean over `mask`, from a few low-frequency
    cosines
    """
    u, v = pixel_grid(height, width)
    field = np.zeros((height, width))
    for _ in range(3):
        fu, fv = rng.uniform(0.3, 1.2, 2)
        phase = rng.uniform(0.0, 2.0 * math.pi)
        field += rng.uniform(0.5, 1.0) * np.cos(math.pi * (fu * u + fv * v) + phase)
    region = np.ones((height, width), dtype=bool) if mask is None else mask
    field -= field[region].mean()
    peak = np.abs(field[region]).max()
    return field / peak if peak > 0 else field


def make_wild_sample(studio, rng, strength=1.0):
    """
    Pseudo ground truth: the studio depth with a smooth low-frequency bias, a
    small scale/shift jitter and a smoothed mouth, plus mild colour jitter and
    a replaced background
    """
    if strength == 0.0:
        return studio._replace(split=WILD)
    mask = np.asarray(studio.valid_mask, dtype=bool)
    depth = studio.depth.copy()
    if mask.any():
        head = depth[mask]
        head_range = float(head.max() - head.min()) or 1.0
        amplitude = rng.uniform(0.015, 0.03) * head_range * strength
        field = 0.65 + 0.35 * bias_field(depth.shape[0], depth.shape[1], rng, mask)
        scale = 1.0 + rng.uniform(-0.01, 0.01) * strength
        shift = rng.uniform(-0.001, 0.001) * head_range * strength
        mean = head.mean()
        corrupted = mean + (depth - mean) * scale + shift + amplitude * field
        mouth = mask & (studio.parts == MOUTH)
        if mouth.any():
            smoothed = _box_blur(corrupted, mask)
            corrupted = np.where(mouth, smoothed, corrupted)
        depth = np.where(mask, np.clip(corrupted, NEAR, FAR), depth)

    rgb01 = (studio.rgb.astype(np.float64) + 1.0) * 0.5
    jitter = 1.0 + rng.uniform(-0.05, 0.05, 3) * strength
    rgb01 = np.clip(rgb01 * jitter[:, None, None], 0.0, 1.0)
    background = rng.uniform(0.0, 1.0, 3)
    rgb01 = np.where(mask[None], rgb01, background[:, None, None])
    return studio._replace(rgb=(rgb01 * 2.0 - 1.0).astype(np.float32), depth=depth, split=WILD)


def random_light(rng):
    light = np.array([rng.uniform(-0.6, 0.6), rng.uniform(-0.6, 0.3), 1.0])
    return tuple(light / np.linalg.norm(light))


def random_pose(rng, max_degrees=30.0):
    limit = math.radians(max_degrees)
    return (float(rng.uniform(-limit, limit)), float(rng.uniform(-limit / 2.0, limit / 2.0)))


def driving_signal(frames, rng, window=5):
    """
    Moving average of a clipped uniform random walk started at 0.5, in [0, 1]
    """
    walk = np.empty(frames)
    value = 0.5
    for index in range(frames):
        value = float(np.clip(value + rng.uniform(-0.2, 0.2), 0.0, 1.0))
        walk[index] = value
    half = window // 2
    padded = np.pad(walk, half, mode='edge')
    smoothed = np.convolve(padded, np.ones(window) / window, mode='valid')
    return np.clip(smoothed, 0.0, 1.0)


def make_clip(identity_id, frames, rng, size=64, frames_per_seq=14, provider=None, wild_strength=1.0):
    """
    A talking clip: the mouth follows a random driving signal, the head yaw
    drifts slowly and the audio features are derived from the signal
    """
    if frames < frames_per_seq:
        raise ConfigurationError('Clips need at least {} frames, got {}'.format(frames_per_seq, frames))
    provider = provider or SyntheticAudioProvider()
    signal = driving_signal(frames, rng)
    yaw = math.radians(rng.uniform(-10.0, 10.0))
    pitch = math.radians(rng.uniform(-5.0, 5.0))
    drift = math.radians(rng.uniform(-0.5, 0.5))
    light = random_light(rng)
    samples = []
    for index in range(frames):
        pose = (float(np.clip(yaw + drift * index, -MAX_ANGLE, MAX_ANGLE)), pitch)
        studio = render_sample(identity_id, pose, float(signal[index]), light, size)
        samples.append(make_wild_sample(studio, rng, wild_strength))
    return ClipSample(samples, provider(signal, rng), signal)


def generate_samples(identities, per_identity, size, seed, split=STUDIO, wild_strength=1.0, workers=0):
    """
    In-memory samples, `per_identity` random poses/expressions/lights each
    """
    def render(job):
        identity, index = job
        rng = np.random.default_rng([seed, _split_code(split), identity, index])
        pose = random_pose(rng)
        expression = float(rng.uniform(0.0, 1.0))
        light = random_light(rng)
        sample = render_sample(identity, pose, expression, light, size)
        if split in (WILD, EVAL_WILD):
            wild = make_wild_sample(sample, rng, wild_strength)
            if split == EVAL_WILD:
                return wild._replace(depth=sample.depth, split=EVAL_WILD)
            return wild
        return sample._replace(split=split)

    jobs = [(identity, index) for identity in identities for index in range(per_identity)]
    if workers and workers > 0:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            return list(pool.map(render, jobs))
    return [render(job) for job in jobs]


def _split_code(split):
    return (STUDIO, WILD, EVAL_STUDIO, EVAL_WILD).index(split)


def _sample_record(stem, sample):
    return {
        'stem': stem,
        'identity': sample.identity_id,
        'yaw': round(sample.pose[0], 8),
        'pitch': round(sample.pose[1], 8),
        'expression': round(sample.expression, 8),
        'light': [round(value, 8) for value in sample.light_dir],
    }


def write_sample(directory, stem, sample, near=NEAR, far=FAR):
    base = os.path.join(directory, stem)
    rasters.write_rgb(base + '_rgb.png', sample.rgb)
    rasters.write_depth(base + '_depth.png', sample.depth, near, far)
    rasters.write_mask(base + '_mask.png', sample.valid_mask)
    rasters.write_labels(base + '_parts.png', sample.parts)


def build_dataset(config, root, workers=0):
    """
    Render every split and clip of `config` (a SynthSection) under `root` and
    write `manifest.json`; returns the manifest
    """
    size = config.image_size
    studio_ids = list(range(config.studio_identities))
    wild_ids = list(range(len(studio_ids), len(studio_ids) + config.wild_identities))
    eval_start = len(studio_ids) + len(wild_ids)
    eval_ids = list(range(eval_start, eval_start + config.eval_identities))
    plan = [
        (STUDIO, studio_ids, config.samples_per_identity),
        (WILD, wild_ids, config.samples_per_identity),
        (EVAL_STUDIO, eval_ids, config.eval_samples_per_identity),
        (EVAL_WILD, eval_ids, config.eval_samples_per_identity),
    ]
    manifest = {
        'version': 1,
        'seed': config.seed,
        'image_size': size,
        'near': NEAR,
        'far': FAR,
        'frame_rate': FRAME_RATE,
        'audio_dim': config.audio_dim,
        'wild_strength': config.wild_strength,
        'splits': {},
        'clips': [],
        'counts': {},
    }
    for split, identities, per_identity in plan:
        directory = os.path.join(root, split)
        ensure_dir(directory)
        samples = generate_samples(identities, per_identity, size, config.seed, split, config.wild_strength, workers)
        records = []
        for position, sample in enumerate(samples):
            stem = '{:04d}_{:03d}'.format(sample.identity_id, position % per_identity)
            write_sample(directory, stem, sample)
            records.append(_sample_record(stem, sample))
        manifest['splits'][split] = {'identities': identities, 'samples': records}
        manifest['counts'][split] = len(records)
        log.info('Wrote %d %s samples', len(records), split)

    provider = SyntheticAudioProvider(dim=config.audio_dim, seed=config.seed)
    clip_ids = wild_ids or studio_ids
    for clip_index in range(config.clips):
        identity = clip_ids[clip_index % len(clip_ids)]
        rng = np.random.default_rng([config.seed, 99, clip_index])
        clip = make_clip(identity, config.clip_frames, rng, size, config.frames_per_seq, provider, config.wild_strength)
        name = 'clip_{:04d}'.format(clip_index)
        directory = os.path.join(root, 'clips', name)
        ensure_dir(directory)
        for index, frame in enumerate(clip.frames):
            write_sample(directory, 'frame_{:03d}'.format(index), frame)
        rasters.write_audio(os.path.join(directory, 'audio.afeat'), clip.audio)
        manifest['clips'].append({
            'name': name,
            'identity': identity,
            'frames': len(clip.frames),
            'driving_signal': [round(float(value), 8) for value in clip.driving_signal],
            'poses': [[round(frame.pose[0], 8), round(frame.pose[1], 8)] for frame in clip.frames],
            'light': [round(value, 8) for value in clip.frames[0].light_dir],
        })
    manifest['counts']['clips'] = config.clips
    manifest['counts']['clip_frames'] = config.clips * config.clip_frames

    path = os.path.join(root, 'manifest.json')
    try:
        with open(path, 'w') as handle:
            json.dump(manifest, handle, sort_keys=True, indent=1)
    except OSError as error:
        raise DataError(path, error.strerror or str(error))
    log.info('Dataset written to %s', root)
    return manifest


def load_manifest(root):
    path = os.path.join(root, 'manifest.json') if os.path.isdir(root) else root
    try:
        with open(path) as handle:
            return json.load(handle)
    except OSError as error:
        raise DataError(path, error.strerror or str(error))
    except ValueError as error:
        raise DataError(path, 'invalid manifest: {}'.format(error))


def load_split(root, manifest, split):
    """
    Read the samples of `split` back from disk
    """
    near, far = manifest['near'], manifest['far']
    directory = os.path.join(root, split)
    samples = []
    for record in manifest['splits'][split]['samples']:
        base = os.path.join(directory, record['stem'])
        samples.append(RGBDSample(
            rgb=rasters.read_rgb(base + '_rgb.png'),
            depth=rasters.read_depth(base + '_depth.png', near, far),
            valid_mask=rasters.read_mask(base + '_mask.png'),
            parts=rasters.read_labels(base + '_parts.png'),
            identity_id=record['identity'],
            pose=(record['yaw'], record['pitch']),
            expression=record['expression'],
            split=split,
            light_dir=tuple(record['light']),
        ))
    return samples


def load_clip(root, manifest, record):
    near, far = manifest['near'], manifest['far']
    light = tuple(record['light'])
    directory = os.path.join(root, 'clips', record['name'])
    frames = []
    for index, expression in enumerate(record['driving_signal']):
        base = os.path.join(directory, 'frame_{:03d}'.format(index))
        yaw, pitch = record['poses'][index]
        frames.append(RGBDSample(
            rgb=rasters.read_rgb(base + '_rgb.png'),
            depth=rasters.read_depth(base + '_depth.png', near, far),
            valid_mask=rasters.read_mask(base + '_mask.png'),
            parts=rasters.read_labels(base + '_parts.png'),
            identity_id=record['identity'],
            pose=(yaw, pitch),
            expression=expression,
            split=WILD,
            light_dir=light,
        ))
    audio = rasters.read_audio(os.path.join(directory, 'audio.afeat'))
    return ClipSample(frames, audio, np.asarray(record['driving_signal']))
