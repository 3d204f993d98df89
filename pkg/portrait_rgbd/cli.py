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
Command-line entry points.

Every command writes its artifacts under the directory it is given (relative
paths are resolved against $PORTRAIT_RGBD_OUTPUT_ROOT when set). Errors raised
on purpose by the package are reported as one line and exit with status 2.
"""

# Imports ###########################################################

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import evalkit, gradcheck, rasters, synthdata
from .checkpoint import load_bundle, load_checkpoint, require_stage, save_bundle
from .config import RunConfig, default_config
from .errors import ConfigurationError, PortraitRGBDError
from .inpaint import generate_from_depth, predict_depth
from .motion import animate
from .training import expand_bundle, expansion_probe, generate_rgbd, train_stage
from .utils import ensure_dir, resolve_output_dir, write_csv
from .vae import DepthNormalization

# Globals ###########################################################

log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USER_ERROR = 2


# Functions #########################################################

def _rng(args):
    return np.random.default_rng(args.seed)


def _light(text):
    try:
        values = [float(part) for part in text.split(',')]
    except ValueError:
        raise argparse.ArgumentTypeError('light direction must be three comma separated numbers')
    if len(values) != 3:
        raise argparse.ArgumentTypeError('light direction must have three components')
    return values


def cmd_synthdata(args):
    config = RunConfig.load(args.config) if args.config else default_config()
    synth = config.synth
    if args.seed is not None:
        synth.seed = args.seed
    if args.size is not None:
        synth.image_size = args.size
    root = ensure_dir(resolve_output_dir(args.output))
    manifest = synthdata.build_dataset(synth, root, workers=args.workers)
    counts = ', '.join('{} {}'.format(count, name) for name, count in sorted(manifest['counts'].items()))
    print('Wrote {} ({})'.format(os.path.join(root, 'manifest.json'), counts))
    return EXIT_OK


def cmd_train(args):
    config = RunConfig.load(args.config)
    if args.parent:
        config.parent = args.parent
    if args.steps is not None:
        config.train.steps = args.steps
    result = train_stage(config, progress=not args.quiet)
    print('{} checkpoint: {} ({})'.format(config.stage, result.checkpoint_path, result.file_hash[:12]))
    return EXIT_OK


def cmd_expand(args):
    bundle, checkpoint = load_bundle(args.checkpoint, stages='rgb')
    joint = expand_bundle(bundle, args.reference)
    probe = expansion_probe(bundle, joint, seed=args.seed)
    output = resolve_output_dir(args.output)
    digest = save_bundle(output, joint, checkpoint.manifest.get('config_hash', ''), checkpoint,
                         extras={'init': True, 'init_probe': probe})
    print('Expanded {} to {}/{} channels: {} ({}), probe deviation {:.2g}'.format(
        args.checkpoint, joint.unet.config.in_channels, joint.unet.config.out_channels, output, digest[:12],
        probe['max_abs_diff']))
    return EXIT_OK


def cmd_sample(args):
    bundle, _ = load_bundle(args.checkpoint, stages=('joint', 'inpaint', 'motion'))
    reference = rasters.read_rgb(args.reference)
    output = ensure_dir(resolve_output_dir(args.output))
    rng = _rng(args)
    for index in range(args.count):
        rgb, depth = generate_rgbd(bundle, reference, rng, steps=args.steps, sampler=args.sampler)
        rasters.write_rgb(os.path.join(output, 'sample_{:03d}_rgb.png'.format(index)), rgb)
        rasters.write_depth(os.path.join(output, 'sample_{:03d}_depth.png'.format(index)), depth,
                            bundle.norm.near, bundle.norm.far)
    print('Wrote {} samples ({} reference) to {}'.format(args.count, bundle.reference_mode, output))
    return EXIT_OK


def cmd_predict_depth(args):
    bundle, _ = load_bundle(args.checkpoint, stages='inpaint')
    rgb = rasters.read_rgb(args.image)
    depth = predict_depth(rgb, bundle, steps=args.steps, rng=_rng(args), sampler=args.sampler)
    output = resolve_output_dir(args.output)
    rasters.write_depth(output, depth, bundle.norm.near, bundle.norm.far)
    print('Wrote {}'.format(output))
    return EXIT_OK


def cmd_depth2image(args):
    bundle, _ = load_bundle(args.checkpoint, stages='inpaint')
    depth = rasters.read_depth(args.depth, bundle.norm.near, bundle.norm.far)
    reference = rasters.read_rgb(args.reference)
    region = rasters.read_mask(args.region) if args.region else None
    rgb = generate_from_depth(depth, reference, bundle, steps=args.steps, rng=_rng(args), region=region,
                              sampler=args.sampler)
    output = resolve_output_dir(args.output)
    rasters.write_rgb(output, rgb)
    print('Wrote {}'.format(output))
    return EXIT_OK


def cmd_animate(args):
    bundle, _ = load_bundle(args.checkpoint, stages='motion')
    reference = rasters.read_rgb(args.reference)
    audio = rasters.read_audio(args.audio)
    frames = args.frames or len(audio)
    clip = animate(reference, audio, bundle, frames=frames, frames_per_seq=bundle.motion.config.frames_per_seq,
                   n_motion=bundle.motion.config.motion_frames, rng=_rng(args), steps=args.steps,
                   sampler=args.sampler, progress=not args.quiet)
    output = ensure_dir(resolve_output_dir(args.output))
    for index, frame in enumerate(clip):
        rasters.write_rgb(os.path.join(output, 'frame_{:03d}_rgb.png'.format(index)), frame[:3])
        rasters.write_depth(os.path.join(output, 'frame_{:03d}_depth.png'.format(index)), frame[3],
                            bundle.norm.near, bundle.norm.far)
    manifest = {
        'frames': len(clip),
        'frame_rate': audio.frame_rate,
        'frames_per_seq': bundle.motion.config.frames_per_seq,
        'motion_frames': bundle.motion.config.motion_frames,
        'near': bundle.norm.near,
        'far': bundle.norm.far,
        'reference': os.path.abspath(args.reference),
        'audio': os.path.abspath(args.audio),
        'seed': args.seed,
    }
    with open(os.path.join(output, 'clip.json'), 'w') as handle:
        json.dump(manifest, handle, sort_keys=True, indent=1)
    print('Wrote {} frames to {}'.format(len(clip), output))
    return EXIT_OK


def cmd_relight(args):
    rgb = rasters.read_rgb(args.image)
    depth = rasters.read_depth(args.depth, args.near, args.far)
    width = depth.shape[1]
    normals = evalkit.normals_from_depth(-depth, spacing=2.0 / width)
    relit = evalkit.relight((rgb + 1.0) * 0.5, normals, args.light, ambient=args.ambient)
    output = resolve_output_dir(args.output)
    rasters.write_rgb(output, relit * 2.0 - 1.0)
    if args.normals:
        rasters.write_colormap(resolve_output_dir(args.normals), (normals.transpose(1, 2, 0) + 1.0) * 0.5)
    print('Wrote {}'.format(output))
    return EXIT_OK


def _predictions_from_dir(directory, records, near, far):
    for record in records:
        yield rasters.read_depth(os.path.join(directory, '{}_depth.png'.format(record['stem'])), near, far)


def _predictions_from_checkpoint(path, samples, args):
    bundle, _ = load_bundle(path, stages='inpaint')
    rng = _rng(args)
    for sample in samples:
        yield predict_depth(sample.rgb, bundle, steps=args.steps, rng=rng, sampler=args.sampler)


def cmd_eval_depth(args):
    root = args.dataset
    manifest = synthdata.load_manifest(root)
    if args.split not in manifest['splits']:
        raise ConfigurationError('Dataset has no split `{}`'.format(args.split))
    root = root if os.path.isdir(root) else os.path.dirname(root)
    samples = synthdata.load_split(root, manifest, args.split)
    records = manifest['splits'][args.split]['samples']
    if args.limit:
        samples, records = samples[:args.limit], records[:args.limit]
    sources = [(os.path.basename(os.path.normpath(path)), path) for path in (args.checkpoint or [])]
    if args.predictions:
        sources.append((os.path.basename(os.path.normpath(args.predictions)), args.predictions))
    if not sources:
        raise ConfigurationError('Give --checkpoint or --predictions to evaluate')

    norm = DepthNormalization(manifest['near'], manifest['far'])
    output = ensure_dir(resolve_output_dir(args.output))
    rows = []
    for name, source in sources:
        if os.path.isdir(source):
            predictions = _predictions_from_dir(source, records, norm.near, norm.far)
        else:
            predictions = _predictions_from_checkpoint(source, samples, args)
        per_sample = []
        maps = ensure_dir(os.path.join(output, 'error_maps', name))
        for sample, record, prediction in zip(samples, records, predictions):
            pred, _ = norm.normalize(prediction)
            gt, _ = norm.normalize(sample.depth)
            metrics = evalkit.evaluate_depth(pred, gt, sample.valid_mask)
            per_sample.append([record['stem']] + metrics.as_row())
            aligned = evalkit.align_depth(pred, gt, sample.valid_mask)
            rasters.write_colormap(os.path.join(maps, '{}.png'.format(record['stem'])),
                                   evalkit.error_map(aligned, gt, sample.valid_mask))
        write_csv(os.path.join(output, '{}_metrics.csv'.format(name)), ['stem'] + list(evalkit.METRIC_COLUMNS),
                  per_sample)
        mean = evalkit.mean_metrics([evalkit.DepthMetrics(*row[1:]) for row in per_sample])
        rows.append((name, mean))
    table = evalkit.summary_table(rows, title='Depth on `{}` ({} images)'.format(args.split, len(samples)))
    with open(os.path.join(output, 'summary.txt'), 'w') as handle:
        handle.write(table + '\n')
    print(table)
    return EXIT_OK


def cmd_gradcheck(args):
    reports, failures = gradcheck.check_all(seeds=range(args.seeds), bound=args.bound)
    worst = {}
    for report in reports:
        if report.op_name not in worst or report.max_rel_err > worst[report.op_name].max_rel_err:
            worst[report.op_name] = report
    for name in sorted(worst):
        report = worst[name]
        status = 'FAIL' if report.max_rel_err >= args.bound else 'ok'
        print('{:<22} {:>10.3e}  {}'.format(name, report.max_rel_err, status))
    if failures:
        print('{} of {} checks exceed {:g}'.format(len(failures), len(reports), args.bound))
        return EXIT_FAILURE
    print('All {} operations pass ({} seeds)'.format(len(worst), args.seeds))
    return EXIT_OK


def cmd_inspect(args):
    checkpoint = load_checkpoint(args.checkpoint)
    if args.stage:
        require_stage(checkpoint, args.stage)
    manifest = dict(checkpoint.manifest)
    extras = manifest.get('extras', {})
    if 'init_probe' in extras:
        extras = dict(extras, init_probe='<{} probes>'.format(len(extras['init_probe']['levels'])))
    manifest['extras'] = extras
    manifest['file_hash'] = checkpoint.file_hash
    manifest['tensor_count'] = len(checkpoint.tensors)
    print(json.dumps(manifest, sort_keys=True, indent=1))
    return EXIT_OK


def _sampling_options(parser):
    parser.add_argument('--steps', type=int, default=None, help='sampler steps (default: from checkpoint)')
    parser.add_argument('--sampler', choices=('ddim', 'ddpm'), default=None)
    parser.add_argument('--seed', type=int, default=0)


def build_parser():
    parser = argparse.ArgumentParser(prog='portrait-rgbd', description='Joint portrait RGB and depth diffusion')
    parser.add_argument('--verbose', '-v', action='store_true', help='debug logging')
    commands = parser.add_subparsers(dest='command', metavar='COMMAND')
    commands.required = True

    sub = commands.add_parser('synthdata', help='render the synthetic dataset')
    sub.add_argument('output')
    sub.add_argument('--config', help='run configuration whose <synth> section is used')
    sub.add_argument('--seed', type=int, default=None)
    sub.add_argument('--size', type=int, default=None)
    sub.add_argument('--workers', type=int, default=0)
    sub.set_defaults(func=cmd_synthdata)

    sub = commands.add_parser('train', help='train one stage')
    sub.add_argument('config')
    sub.add_argument('--parent', help='parent checkpoint (overrides the configuration)')
    sub.add_argument('--steps', type=int, default=None)
    sub.add_argument('--quiet', action='store_true', help='no progress bar')
    sub.set_defaults(func=cmd_train)

    sub = commands.add_parser('expand', help='turn an rgb checkpoint into a joint initialization')
    sub.add_argument('checkpoint')
    sub.add_argument('output')
    sub.add_argument('--reference', choices=('refnet', 'concat'), default='refnet')
    sub.add_argument('--seed', type=int, default=0)
    sub.set_defaults(func=cmd_expand)

    sub = commands.add_parser('sample', help='generate RGBD portraits of a reference identity')
    sub.add_argument('checkpoint')
    sub.add_argument('reference')
    sub.add_argument('output')
    sub.add_argument('--count', type=int, default=4)
    _sampling_options(sub)
    sub.set_defaults(func=cmd_sample)

    sub = commands.add_parser('predict-depth', help='estimate depth for an image')
    sub.add_argument('checkpoint')
    sub.add_argument('image')
    sub.add_argument('output')
    _sampling_options(sub)
    sub.set_defaults(func=cmd_predict_depth)

    sub = commands.add_parser('depth2image', help='generate an image for a depth map')
    sub.add_argument('checkpoint')
    sub.add_argument('depth')
    sub.add_argument('reference')
    sub.add_argument('output')
    sub.add_argument('--region', help='1-bit mask of the region to regenerate')
    _sampling_options(sub)
    sub.set_defaults(func=cmd_depth2image)

    sub = commands.add_parser('animate', help='generate an RGBD clip driven by audio features')
    sub.add_argument('checkpoint')
    sub.add_argument('reference')
    sub.add_argument('audio')
    sub.add_argument('output')
    sub.add_argument('--frames', type=int, default=None)
    sub.add_argument('--quiet', action='store_true')
    _sampling_options(sub)
    sub.set_defaults(func=cmd_animate)

    sub = commands.add_parser('relight', help='relight an image with the normals of its depth map')
    sub.add_argument('image')
    sub.add_argument('depth')
    sub.add_argument('output')
    sub.add_argument('--light', type=_light, default=[0.0, 0.0, 1.0], help='x,y,z with y down and z to the viewer')
    sub.add_argument('--ambient', type=float, default=0.2)
    sub.add_argument('--near', type=float, default=synthdata.NEAR)
    sub.add_argument('--far', type=float, default=synthdata.FAR)
    sub.add_argument('--normals', help='also write the normal map here')
    sub.set_defaults(func=cmd_relight)

    sub = commands.add_parser('eval-depth', help='score depth predictions on a dataset split')
    sub.add_argument('dataset')
    sub.add_argument('output')
    sub.add_argument('--checkpoint', action='append', help='inpaint checkpoint to evaluate (repeatable)')
    sub.add_argument('--predictions', help='directory of <stem>_depth.png predictions')
    sub.add_argument('--split', default=synthdata.EVAL_STUDIO)
    sub.add_argument('--limit', type=int, default=0)
    _sampling_options(sub)
    sub.set_defaults(func=cmd_eval_depth)

    sub = commands.add_parser('gradcheck', help='finite-difference check of every registered operation')
    sub.add_argument('--seeds', type=int, default=5)
    sub.add_argument('--bound', type=float, default=gradcheck.BOUND)
    sub.set_defaults(func=cmd_gradcheck)

    sub = commands.add_parser('inspect', help='print the manifest of a checkpoint')
    sub.add_argument('checkpoint')
    sub.add_argument('--stage', default=None)
    sub.set_defaults(func=cmd_inspect)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format='%(asctime)s %(levelname)s %(name)s: %(message)s')
    try:
        return args.func(args)
    except PortraitRGBDError as error:
        log.error('%s', error)
        print('error: {}'.format(error), file=sys.stderr)
        return EXIT_USER_ERROR
    except Exception:  # pylint: disable=broad-except
        log.exception('Unexpected failure in `%s`', args.command)
        return EXIT_FAILURE


if __name__ == '__main__':
    sys.exit(main())
