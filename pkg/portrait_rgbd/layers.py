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
Parameterized layers built on the differentiable operations.

`Module` discovers its parameters and sub-modules from its attributes, in
assignment order, which fixes the dotted names used by `state_dict()` and by
the checkpoint archive.
"""

# Imports ###########################################################

import logging
import math
from collections import OrderedDict

import numpy as np

from . import functional as F
from .errors import CheckpointError, ShapeError
from .tensor import STANDARD, Tensor

# Globals ###########################################################

log = logging.getLogger(__name__)


# Classes ###########################################################

class Parameter(Tensor):
    """
    A leaf tensor owned by a module and updated by the optimizer
    """

    def __init__(self, data, dtype=STANDARD):
        super().__init__(data, requires_grad=True, dtype=dtype)


class Module:
    """
    Base class of every network component
    """

    def __call__(self, *args, **kwargs):
        return self.forward(*args, **kwargs)

    def forward(self, *args, **kwargs):
        raise NotImplementedError

    def _members(self):
        for name, value in vars(self).items():
            if isinstance(value, (Parameter, Module)):
                yield name, value

    def named_parameters(self, prefix=''):
        for name, value in self._members():
            full_name = prefix + name
            if isinstance(value, Parameter):
                yield full_name, value
            else:
                yield from value.named_parameters(full_name + '.')

    def parameters(self):
        return [parameter for _, parameter in self.named_parameters()]

    def trainable_parameters(self):
        return [parameter for parameter in self.parameters() if parameter.requires_grad]

    def num_parameters(self):
        return sum(parameter.size for parameter in self.parameters())

    @property
    def dtype(self):
        for parameter in self.parameters():
            return parameter.dtype
        return np.dtype(STANDARD)

    def state_dict(self):
        return OrderedDict((name, parameter.data.copy()) for name, parameter in self.named_parameters())

    def load_state_dict(self, state, strict=True):
        own = OrderedDict(self.named_parameters())
        missing = [name for name in own if name not in state]
        if missing:
            raise CheckpointError('Missing tensors: {}'.format(', '.join(missing[:5])))
        unexpected = [name for name in state if name not in own]
        if strict and unexpected:
            raise CheckpointError('Unexpected tensors: {}'.format(', '.join(unexpected[:5])))
        for name, parameter in own.items():
            value = np.asarray(state[name])
            if value.shape != parameter.shape:
                raise ShapeError('tensor `{}`'.format(name), 'all', parameter.shape, value.shape)
            parameter.data = value.astype(parameter.dtype, copy=True)
            parameter.grad = None

    def to_dtype(self, dtype):
        for parameter in self.parameters():
            parameter.data = parameter.data.astype(dtype)
            parameter.grad = None
        return self

    def freeze(self):
        for parameter in self.parameters():
            parameter.requires_grad = False
        return self

    def unfreeze(self):
        for parameter in self.parameters():
            parameter.requires_grad = True
        return self

    def zero_grad(self):
        for parameter in self.parameters():
            parameter.grad = None

    def cast(self, value):
        """
        Wrap raw arrays in a tensor of the module's precision
        """
        if isinstance(value, Tensor):
            return value
        return Tensor(value, dtype=self.dtype)


class ModuleList(Module):
    """
    An ordered list of sub-modules, named by position
    """

    def __init__(self, modules=()):
        self.items = list(modules)

    def _members(self):
        for position, module in enumerate(self.items):
            yield str(position), module

    def append(self, module):
        self.items.append(module)

    def __getitem__(self, position):
        return self.items[position]

    def __iter__(self):
        return iter(self.items)

    def __len__(self):
        return len(self.items)


class Linear(Module):
    def __init__(self, in_features, out_features, rng, bias=True, zero_init=False):
        bound = 1.0 / math.sqrt(in_features)
        if zero_init:
            self.weight = Parameter(np.zeros((out_features, in_features)))
        else:
            self.weight = Parameter(rng.uniform(-bound, bound, (out_features, in_features)))
        if bias:
            self.bias = Parameter(np.zeros(out_features) if zero_init else rng.uniform(-bound, bound, out_features))
        else:
            self.bias = None

    def forward(self, x):
        return F.linear(self.cast(x), self.weight, self.bias)


class Conv2d(Module):
    def __init__(self, in_channels, out_channels, kernel_size, rng, stride=1, padding=None, zero_init=False):
        self.stride = stride
        self.padding = kernel_size // 2 if padding is None else padding
        shape = (out_channels, in_channels, kernel_size, kernel_size)
        bound = 1.0 / math.sqrt(in_channels * kernel_size * kernel_size)
        if zero_init:
            self.weight = Parameter(np.zeros(shape))
            self.bias = Parameter(np.zeros(out_channels))
        else:
            self.weight = Parameter(rng.uniform(-bound, bound, shape))
            self.bias = Parameter(rng.uniform(-bound, bound, out_channels))

    @property
    def in_channels(self):
        return self.weight.shape[1]

    @property
    def out_channels(self):
        return self.weight.shape[0]

    def forward(self, x):
        return F.conv2d(self.cast(x), self.weight, self.bias, stride=self.stride, padding=self.padding)


class GroupNorm(Module):
    def __init__(self, channels, groups=None):
        self.groups = F.norm_groups(channels) if groups is None else groups
        self.gamma = Parameter(np.ones(channels))
        self.beta = Parameter(np.zeros(channels))

    def forward(self, x):
        return F.group_norm(self.cast(x), self.gamma, self.beta, groups=self.groups)


class Attention(Module):
    """
    Multi-head attention with bias-free query/key/value projections and a
    biased output projection, optionally zero-initialized
    """

    def __init__(self, channels, heads, rng, kv_channels=None, zero_out=False):
        kv_channels = channels if kv_channels is None else kv_channels
        self.heads = heads
        self.to_q = Linear(channels, channels, rng, bias=False)
        self.to_k = Linear(kv_channels, channels, rng, bias=False)
        self.to_v = Linear(kv_channels, channels, rng, bias=False)
        self.to_out = Linear(channels, channels, rng, zero_init=zero_out)

    def forward(self, queries, keys_values=None):
        queries = self.cast(queries)
        keys_values = queries if keys_values is None else self.cast(keys_values)
        return F.cross_attention(
            queries, keys_values,
            self.to_q.weight, self.to_k.weight, self.to_v.weight,
            self.to_out.weight, self.to_out.bias,
            heads=self.heads,
        )


class ResBlock(Module):
    """
    GroupNorm-SiLU-conv twice with a residual path; when `emb_dim` is given the
    projected embedding is added to the hidden state between the convolutions
    """

    def __init__(self, in_channels, out_channels, rng, emb_dim=None):
        self.norm1 = GroupNorm(in_channels)
        self.conv1 = Conv2d(in_channels, out_channels, 3, rng)
        self.emb_proj = Linear(emb_dim, out_channels, rng) if emb_dim else None
        self.norm2 = GroupNorm(out_channels)
        self.conv2 = Conv2d(out_channels, out_channels, 3, rng)
        self.skip = Conv2d(in_channels, out_channels, 1, rng) if in_channels != out_channels else None

    def forward(self, x, emb=None):
        x = self.cast(x)
        h = self.conv1(F.silu(self.norm1(x)))
        if self.emb_proj is not None:
            projected = self.emb_proj(F.silu(emb))
            h = h + projected.reshape(projected.shape[0], projected.shape[1], 1, 1)
        h = self.conv2(F.silu(self.norm2(h)))
        residual = x if self.skip is None else self.skip(x)
        return residual + h


class Downsample(Module):
    def __init__(self, channels, rng):
        self.conv = Conv2d(channels, channels, 3, rng, stride=2, padding=1)

    def forward(self, x):
        return self.conv(x)


class Upsample(Module):
    def __init__(self, channels, rng):
        self.conv = Conv2d(channels, channels, 3, rng)

    def forward(self, x):
        return self.conv(F.upsample_nearest2x(self.cast(x)))


# Functions #########################################################

def sinusoidal_embedding(positions, dim, max_period=10000.0):
    """
    [len(positions), dim] sinusoidal basis, cosines first
    """
    positions = np.asarray(positions, dtype=np.float64).reshape(-1)
    half = dim // 2
    frequencies = np.exp(-math.log(max_period) * np.arange(half, dtype=np.float64) / half)
    angles = positions[:, None] * frequencies[None, :]
    embedding = np.concatenate([np.cos(angles), np.sin(angles)], axis=1)
    if dim % 2:
        embedding = np.concatenate([embedding, np.zeros((len(positions), 1))], axis=1)
    return embedding
