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
Run configuration.

A run is described by one XML document:

    <run stage="joint" seed="0" manifest="data/manifest.json" output_dir="runs/joint" parent="runs/rgb/rgb.ckpt">
      <unet base_channels="64" channel_mults="1,2,4"/>
      <train steps="5000"/>
    </run>

Attributes of `<run>` and of each section element are flat key/values coerced
by the typed fields below. Unknown sections, unknown attributes and values
that cannot be coerced are errors.
"""

# Imports ###########################################################

import hashlib
import logging
from weakref import WeakKeyDictionary

from lxml import etree

from .backbone import UNetConfig
from .errors import ConfigurationError, DataError
from .motion import MotionConfig
from .schedule import make_schedule
from .utils import resolve_output_dir
from .vae import VAEConfig

# Globals ###########################################################

log = logging.getLogger(__name__)

STAGES = ('vae', 'rgb', 'joint', 'inpaint', 'motion')
PARENT_STAGE = {'vae': None, 'rgb': 'vae', 'joint': 'rgb', 'inpaint': 'joint', 'motion': 'joint'}

# steps, batch size, learning rate
STAGE_DEFAULTS = {
    'vae': (3000, 16, 2e-4),
    'rgb': (5000, 32, 1e-4),
    'joint': (5000, 32, 1e-5),
    'inpaint': (1000, 32, 1e-5),
    'motion': (3000, 1, 1e-5),
}


# Classes ###########################################################

class Field:
    """
    Typed attribute of a configuration section, with no persistence beyond the
    instance it is set on
    """

    def __init__(self, default=None, help=''):  # pylint: disable=redefined-builtin
        self.default = default
        self.help = help
        self.name = None
        self.data = WeakKeyDictionary()

    def __set_name__(self, owner, name):
        self.name = name

    def __get__(self, instance, owner):
        if instance is None:
            return self
        return self.data.get(instance, self.default)

    def __set__(self, instance, value):
        if value is None:
            self.data[instance] = None
            return
        try:
            self.data[instance] = self.coerce(value)
        except (TypeError, ValueError):
            raise ConfigurationError('{}.{}: cannot interpret {!r} as {}'.format(
                getattr(instance, 'tag', type(instance).__name__), self.name, value, type(self).__name__.lower()))

    def coerce(self, value):
        return value

    def to_text(self, value):
        return str(value)


class String(Field):
    def __init__(self, *args, choices=None, **kwargs):
        super().__init__(*args, **kwargs)
        self.choices = choices

    def coerce(self, value):
        value = str(value)
        if self.choices is not None and value not in self.choices:
            raise ValueError(value)
        return value


class Integer(Field):
    def coerce(self, value):
        if isinstance(value, bool):
            raise TypeError(value)
        return int(value)


class Float(Field):
    def coerce(self, value):
        return float(value)

    def to_text(self, value):
        return repr(float(value))


class Boolean(Field):
    def coerce(self, value):
        if isinstance(value, str):
            lowered = value.strip().lower()
            if lowered in ('true', '1', 'yes'):
                return True
            if lowered in ('false', '0', 'no'):
                return False
            raise ValueError(value)
        return bool(value)

    def to_text(self, value):
        return 'true' if value else 'false'


class List(Field):
    """
    Comma separated values, each coerced with `item`
    """

    def __init__(self, *args, item=str, **kwargs):
        super().__init__(*args, **kwargs)
        self.item = item

    def coerce(self, value):
        if isinstance(value, str):
            value = [part.strip() for part in value.split(',') if part.strip()]
        return tuple(self.item(part) for part in value)

    def to_text(self, value):
        return ','.join(str(part) for part in value)


class Section:
    """
    One element of the run document; its fields are the class attributes
    that are `Field` instances
    """
    tag = None

    @classmethod
    def fields(cls):
        found = {}
        for klass in reversed(cls.__mro__):
            for name, value in vars(klass).items():
                if isinstance(value, Field):
                    found[name] = value
        return found

    def update(self, items):
        fields = self.fields()
        for name, value in items:
            if name not in fields:
                raise ConfigurationError('Unknown attribute `{}` in <{}> (known: {})'.format(
                    name, self.tag, ', '.join(sorted(fields))))
            setattr(self, name, value)
        return self

    def to_dict(self):
        return {name: getattr(self, name) for name in sorted(self.fields())}

    def to_node(self):
        node = etree.Element(self.tag)
        for name, field in sorted(self.fields().items()):
            value = getattr(self, name)
            if value is not None:
                node.set(name, field.to_text(value))
        return node


class DataSection(Section):
    tag = 'data'
    image_size = Integer(64)
    splits = List(('studio', 'wild'))
    eval_split = String('eval_studio')
    workers = Integer(0)
    prefetch = Integer(4)
    cache_latents = Boolean(True)


class VAESection(Section):
    tag = 'vae'
    base_channels = Integer(32)
    channel_mults = List((1, 2, 4), item=int)
    kl_weight = Float(1e-6)
    scale_batches = Integer(8, help='batches used to estimate the latent scale')


class UNetSection(Section):
    tag = 'unet'
    base_channels = Integer(64)
    channel_mults = List((1, 2, 4), item=int)
    attention_factors = List((1, 2), item=int)
    heads = Integer(4)
    reference = String('refnet', choices=('refnet', 'concat'))


class ScheduleSection(Section):
    tag = 'schedule'
    levels = Integer(1000)
    beta_min = Float(1e-4)
    beta_max = Float(0.02)


class TrainSection(Section):
    tag = 'train'
    steps = Integer(None, help='defaults per stage')
    batch_size = Integer(None, help='defaults per stage')
    learning_rate = Float(None, help='defaults per stage')
    log_every = Integer(10)
    sample_every = Integer(0)
    sampler = String('ddim', choices=('ddim', 'ddpm'))
    sample_steps = Integer(50)


class InpaintSection(Section):
    tag = 'inpaint'
    sampler = String('ddim', choices=('ddim', 'ddpm'))
    steps = Integer(50)


class MotionSection(Section):
    tag = 'motion'
    audio_dim = Integer(16)
    window = Integer(5)
    heads = Integer(4)
    frames_per_seq = Integer(14)
    motion_frames = Integer(4)


class SynthSection(Section):
    tag = 'synth'
    image_size = Integer(64)
    studio_identities = Integer(64)
    wild_identities = Integer(32)
    eval_identities = Integer(8)
    samples_per_identity = Integer(40)
    eval_samples_per_identity = Integer(4)
    clips = Integer(64)
    clip_frames = Integer(56)
    frames_per_seq = Integer(14)
    audio_dim = Integer(16)
    wild_strength = Float(1.0)
    seed = Integer(0)


SECTIONS = (DataSection, VAESection, UNetSection, ScheduleSection, TrainSection, InpaintSection, MotionSection,
            SynthSection)


class RunConfig(Section):
    tag = 'run'
    stage = String('joint', choices=STAGES)
    seed = Integer(0)
    manifest = String('')
    output_dir = String('runs')
    parent = String('')
    deterministic = Boolean(True)
    workers = Integer(0)

    def __init__(self):
        self.sections = {section.tag: section() for section in SECTIONS}

    def __getattr__(self, name):
        sections = self.__dict__.get('sections', {})
        if name in sections:
            return sections[name]
        raise AttributeError(name)

    @classmethod
    def from_node(cls, node):
        if node.tag != cls.tag:
            raise ConfigurationError('Run configuration must have a <run> root element, got <{}>'.format(node.tag))
        config = cls()
        config.update(node.items())
        for child in node:
            if child.tag is etree.Comment:
                continue
            if child.tag not in config.sections:
                raise ConfigurationError('Unknown section <{}> (known: {})'.format(
                    child.tag, ', '.join(sorted(config.sections))))
            config.sections[child.tag].update(child.items())
        config.validate()
        return config

    @classmethod
    def from_string(cls, text):
        parser = etree.XMLParser(remove_comments=True)
        try:
            node = etree.fromstring(text.encode('utf-8') if isinstance(text, str) else text, parser=parser)
        except etree.XMLSyntaxError as error:
            raise ConfigurationError('Malformed run configuration: {}'.format(error))
        return cls.from_node(node)

    @classmethod
    def load(cls, path):
        try:
            with open(path, 'rb') as handle:
                text = handle.read()
        except OSError as error:
            raise DataError(path, error.strerror or str(error))
        log.info('Loading run configuration from %s', path)
        return cls.from_string(text)

    def validate(self):
        if self.synth.frames_per_seq > self.synth.clip_frames:
            raise ConfigurationError('synth clip_frames must be at least frames_per_seq')
        if self.motion.motion_frames < 1 or self.motion.window % 2 == 0:
            raise ConfigurationError('motion window must be odd and motion_frames positive')
        self.vae_config()
        self.unet_config()
        self.schedule()
        return self

    def to_node(self):
        node = super().to_node()
        for tag in sorted(self.sections):
            node.append(self.sections[tag].to_node())
        return node

    def to_string(self):
        return etree.tostring(self.to_node(), encoding='unicode', pretty_print=True)

    def config_hash(self):
        """
        SHA-256 of the canonical text (sorted sections and attributes)
        """
        return hashlib.sha256(self.to_string().encode('utf-8')).hexdigest()

    @property
    def output_path(self):
        return resolve_output_dir(self.output_dir)

    def train_settings(self):
        """
        (steps, batch_size, learning_rate), the stage defaults filling unset values
        """
        steps, batch_size, learning_rate = STAGE_DEFAULTS[self.stage]
        train = self.train
        return (
            steps if train.steps is None else train.steps,
            batch_size if train.batch_size is None else train.batch_size,
            learning_rate if train.learning_rate is None else train.learning_rate,
        )

    def vae_config(self):
        return VAEConfig(self.vae.base_channels, self.vae.channel_mults, self.vae.kl_weight)

    def unet_config(self, in_channels=4, out_channels=4):
        unet = self.unet
        return UNetConfig(unet.base_channels, unet.channel_mults, unet.attention_factors, in_channels,
                          out_channels, heads=unet.heads)

    def schedule(self):
        return make_schedule(self.schedule_section.levels, self.schedule_section.beta_min,
                             self.schedule_section.beta_max)

    @property
    def schedule_section(self):
        return self.sections['schedule']

    def motion_config(self):
        motion = self.motion
        return MotionConfig(motion.audio_dim, motion.window, motion.heads, motion.frames_per_seq,
                            motion.motion_frames)


# Functions #########################################################

def default_config(stage='joint', **attributes):
    config = RunConfig()
    config.update([('stage', stage)] + sorted(attributes.items()))
    return config
