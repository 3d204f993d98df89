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
Differentiable operations.

Each operation is a `Function` subclass plus a functional wrapper registered
in `OPS` together with the sample shapes the gradient checker feeds it.
"""

# Imports ###########################################################

import logging
import math

import numpy as np

from .errors import ConfigurationError, ShapeError
from .tensor import OPS, Function, Tensor, as_tensor

# Globals ###########################################################

log = logging.getLogger(__name__)

NORM_GROUPS = 8
NORM_EPS = 1e-5


# Functions #########################################################

def sum_to_shape(array, shape):
    """
    Sum `array` over the axes that broadcasting expanded to reach `shape`
    """
    while array.ndim > len(shape):
        array = array.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and array.shape[axis] != 1:
            array = array.sum(axis=axis, keepdims=True)
    return array


def _swap_last(array):
    return np.swapaxes(array, -1, -2)


def norm_groups(channels):
    return math.gcd(NORM_GROUPS, channels)


# Classes ###########################################################

class Add(Function):
    name = 'add'

    def forward(self, a, b):
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, grad):
        return sum_to_shape(grad, self.shapes[0]), sum_to_shape(grad, self.shapes[1])


class Sub(Function):
    name = 'sub'

    def forward(self, a, b):
        self.shapes = (a.shape, b.shape)
        return a - b

    def backward(self, grad):
        return sum_to_shape(grad, self.shapes[0]), sum_to_shape(-grad, self.shapes[1])


class Mul(Function):
    name = 'mul'

    def forward(self, a, b):
        self.a, self.b = a, b
        return a * b

    def backward(self, grad):
        return sum_to_shape(grad * self.b, self.a.shape), sum_to_shape(grad * self.a, self.b.shape)


class Scale(Function):
    name = 'scale'

    def __init__(self, factor):
        super().__init__()
        self.factor = factor

    def forward(self, x):
        return x * np.asarray(self.factor, dtype=x.dtype)

    def backward(self, grad):
        return (grad * np.asarray(self.factor, dtype=grad.dtype),)


class MatMul(Function):
    name = 'matmul'

    def forward(self, a, b):
        if a.shape[-1] != b.shape[-2]:
            raise ShapeError('matmul', -1, b.shape[-2], a.shape[-1])
        self.a, self.b = a, b
        return np.matmul(a, b)

    def backward(self, grad):
        grad_a = np.matmul(grad, _swap_last(self.b))
        grad_b = np.matmul(_swap_last(self.a), grad)
        return sum_to_shape(grad_a, self.a.shape), sum_to_shape(grad_b, self.b.shape)


class Linear(Function):
    """
    y = x Wᵀ + b over the last axis of x; W is [out, in]
    """
    name = 'linear'

    def forward(self, x, weight, bias=None):
        if x.shape[-1] != weight.shape[1]:
            raise ShapeError('linear input', -1, weight.shape[1], x.shape[-1])
        self.x, self.weight, self.has_bias = x, weight, bias is not None
        y = np.matmul(x, weight.T)
        if bias is not None:
            y = y + bias
        return y

    def backward(self, grad):
        flat_grad = grad.reshape(-1, grad.shape[-1])
        flat_x = self.x.reshape(-1, self.x.shape[-1])
        grads = [np.matmul(grad, self.weight), np.matmul(flat_grad.T, flat_x)]
        if self.has_bias:
            grads.append(flat_grad.sum(axis=0))
        return tuple(grads)


class Conv2d(Function):
    """
    Cross-correlation of [B, Cin, H, W] with [Cout, Cin, k, k] via im2col
    """
    name = 'conv2d'

    def __init__(self, stride=1, padding=0):
        super().__init__()
        self.stride = stride
        self.padding = padding

    def forward(self, x, weight, bias):
        if x.ndim != 4:
            raise ShapeError('conv2d input', 'rank', 4, x.ndim)
        if weight.ndim != 4:
            raise ShapeError('conv2d weight', 'rank', 4, weight.ndim)
        if x.shape[1] != weight.shape[1]:
            raise ShapeError('conv2d input channels', 1, weight.shape[1], x.shape[1])
        if weight.shape[2] != weight.shape[3] or weight.shape[2] % 2 == 0:
            raise ShapeError('conv2d kernel', 2, 'odd square extent', weight.shape[2:])
        if bias.shape != (weight.shape[0],):
            raise ShapeError('conv2d bias', 0, weight.shape[0], bias.shape[0] if bias.ndim else bias.shape)

        batch, channels, height, width = x.shape
        kernel, stride, pad = weight.shape[2], self.stride, self.padding
        out_h = (height + 2 * pad - kernel) // stride + 1
        out_w = (width + 2 * pad - kernel) // stride + 1
        if out_h < 1 or out_w < 1:
            raise ShapeError('conv2d input', 2, '>= kernel extent', height)

        padded = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad))) if pad else x
        padded = np.ascontiguousarray(padded)
        s_b, s_c, s_h, s_w = padded.strides
        patches = np.lib.stride_tricks.as_strided(
            padded,
            shape=(batch, channels, kernel, kernel, out_h, out_w),
            strides=(s_b, s_c, s_h, s_w, stride * s_h, stride * s_w),
            writeable=False,
        )
        cols = patches.reshape(batch, channels * kernel * kernel, out_h * out_w)
        flat_weight = weight.reshape(weight.shape[0], -1)

        self.x_shape = x.shape
        self.padded_shape = padded.shape
        self.cols = cols
        self.weight = weight
        self.out_hw = (out_h, out_w)

        y = np.matmul(flat_weight, cols) + bias[None, :, None]
        return y.reshape(batch, weight.shape[0], out_h, out_w)

    def backward(self, grad):
        batch, channels, height, width = self.x_shape
        out_channels, _, kernel, _ = self.weight.shape
        out_h, out_w = self.out_hw
        stride, pad = self.stride, self.padding

        flat_grad = grad.reshape(batch, out_channels, out_h * out_w)
        flat_weight = self.weight.reshape(out_channels, -1)
        grad_weight = np.einsum('bon,bkn->ok', flat_grad, self.cols).reshape(self.weight.shape)
        grad_bias = flat_grad.sum(axis=(0, 2))

        grad_cols = np.matmul(flat_weight.T, flat_grad).reshape(batch, channels, kernel, kernel, out_h, out_w)
        grad_padded = np.zeros(self.padded_shape, dtype=grad.dtype)
        for i in range(kernel):
            for j in range(kernel):
                grad_padded[:, :, i:i + stride * out_h:stride, j:j + stride * out_w:stride] += grad_cols[:, :, i, j]
        grad_x = grad_padded[:, :, pad:pad + height, pad:pad + width]
        return np.ascontiguousarray(grad_x), grad_weight, grad_bias


class GroupNorm(Function):
    """
    Normalize over channel groups and spatial positions of [B, C, ...]
    """
    name = 'group_norm'

    def __init__(self, groups, eps=NORM_EPS):
        super().__init__()
        self.groups = groups
        self.eps = eps

    def forward(self, x, gamma, beta):
        channels = x.shape[1]
        if channels % self.groups:
            raise ConfigurationError('group_norm: {} groups do not divide {} channels'.format(self.groups, channels))
        if gamma.shape != (channels,):
            raise ShapeError('group_norm gamma', 0, channels, gamma.shape[0])
        grouped = x.reshape(x.shape[0], self.groups, -1)
        mean = grouped.mean(axis=-1, keepdims=True)
        var = grouped.var(axis=-1, keepdims=True)
        self.rstd = 1.0 / np.sqrt(var + self.eps)
        self.normalized = (grouped - mean) * self.rstd
        self.gamma = gamma
        self.broadcast = (1, channels) + (1,) * (x.ndim - 2)
        normalized = self.normalized.reshape(x.shape)
        return normalized * gamma.reshape(self.broadcast) + beta.reshape(self.broadcast)

    def backward(self, grad):
        shape = grad.shape
        reduce_axes = (0,) + tuple(range(2, grad.ndim))
        normalized = self.normalized.reshape(shape)
        grad_gamma = (grad * normalized).sum(axis=reduce_axes)
        grad_beta = grad.sum(axis=reduce_axes)

        grad_norm = (grad * self.gamma.reshape(self.broadcast)).reshape(shape[0], self.groups, -1)
        count = grad_norm.shape[-1]
        grad_x = (self.rstd / count) * (
            count * grad_norm
            - grad_norm.sum(axis=-1, keepdims=True)
            - self.normalized * (grad_norm * self.normalized).sum(axis=-1, keepdims=True)
        )
        return grad_x.reshape(shape), grad_gamma, grad_beta


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


class SiLU(Function):
    name = 'silu'

    def forward(self, x):
        self.x = x
        self.sig = _sigmoid(x)
        return x * self.sig

    def backward(self, grad):
        return (grad * (self.sig + self.x * self.sig * (1.0 - self.sig)),)


class Sigmoid(Function):
    name = 'sigmoid'

    def forward(self, x):
        self.y = _sigmoid(x)
        return self.y

    def backward(self, grad):
        return (grad * self.y * (1.0 - self.y),)


class Tanh(Function):
    name = 'tanh'

    def forward(self, x):
        self.y = np.tanh(x)
        return self.y

    def backward(self, grad):
        return (grad * (1.0 - self.y * self.y),)


class Exp(Function):
    name = 'exp'

    def forward(self, x):
        self.y = np.exp(x)
        return self.y

    def backward(self, grad):
        return (grad * self.y,)


class Softmax(Function):
    name = 'softmax'

    def __init__(self, axis=-1):
        super().__init__()
        self.axis = axis

    def forward(self, x):
        shifted = np.exp(x - x.max(axis=self.axis, keepdims=True))
        self.y = shifted / shifted.sum(axis=self.axis, keepdims=True)
        return self.y

    def backward(self, grad):
        inner = (grad * self.y).sum(axis=self.axis, keepdims=True)
        return (self.y * (grad - inner),)


class UpsampleNearest2x(Function):
    name = 'upsample_nearest2x'

    def forward(self, x):
        return x.repeat(2, axis=-2).repeat(2, axis=-1)

    def backward(self, grad):
        *lead, height, width = grad.shape
        folded = grad.reshape(*lead, height // 2, 2, width // 2, 2)
        return (folded.sum(axis=(-3, -1)),)


class Concat(Function):
    name = 'concat'

    def __init__(self, axis=0):
        super().__init__()
        self.axis = axis

    def forward(self, *arrays):
        reference = arrays[0]
        for array in arrays[1:]:
            for axis in range(reference.ndim):
                if axis != self.axis % reference.ndim and array.shape[axis] != reference.shape[axis]:
                    raise ShapeError('concat operand', axis, reference.shape[axis], array.shape[axis])
        self.sizes = [array.shape[self.axis] for array in arrays]
        return np.concatenate(arrays, axis=self.axis)

    def backward(self, grad):
        bounds = np.cumsum(self.sizes)[:-1]
        return tuple(np.split(grad, bounds, axis=self.axis))


class Reshape(Function):
    name = 'reshape'

    def __init__(self, shape):
        super().__init__()
        self.shape = shape

    def forward(self, x):
        self.in_shape = x.shape
        return x.reshape(self.shape)

    def backward(self, grad):
        return (grad.reshape(self.in_shape),)


class Transpose(Function):
    name = 'transpose'

    def __init__(self, axes):
        super().__init__()
        self.axes = axes

    def forward(self, x):
        return np.ascontiguousarray(np.transpose(x, self.axes))

    def backward(self, grad):
        return (np.ascontiguousarray(np.transpose(grad, np.argsort(self.axes))),)


class Index(Function):
    """
    Basic slicing (ints, slices, Ellipsis)
    """
    name = 'index'

    def __init__(self, key):
        super().__init__()
        self.key = key

    def forward(self, x):
        self.in_shape = x.shape
        return np.ascontiguousarray(x[self.key])

    def backward(self, grad):
        grad_x = np.zeros(self.in_shape, dtype=grad.dtype)
        grad_x[self.key] += grad
        return (grad_x,)


class Sum(Function):
    name = 'sum'

    def __init__(self, axis=None, keepdims=False):
        super().__init__()
        self.axis = axis
        self.keepdims = keepdims

    def forward(self, x):
        self.in_shape = x.shape
        return np.asarray(x.sum(axis=self.axis, keepdims=self.keepdims))

    def backward(self, grad):
        if self.axis is not None and not self.keepdims:
            grad = np.expand_dims(grad, self.axis)
        return (np.broadcast_to(grad, self.in_shape).copy(),)


class Mean(Sum):
    name = 'mean'

    def forward(self, x):
        self.in_shape = x.shape
        self.count = x.size // max(np.asarray(x.sum(axis=self.axis, keepdims=True)).size, 1)
        return np.asarray(x.mean(axis=self.axis, keepdims=self.keepdims))

    def backward(self, grad):
        (grad_x,) = super().backward(grad)
        return (grad_x / self.count,)


class MeanSquaredError(Function):
    name = 'mse'

    def forward(self, prediction, target):
        if prediction.shape != target.shape:
            raise ShapeError('mse operands', 'all', prediction.shape, target.shape)
        self.diff = prediction - target
        return np.asarray(np.mean(self.diff * self.diff), dtype=prediction.dtype)

    def backward(self, grad):
        grad_prediction = grad * 2.0 * self.diff / self.diff.size
        return grad_prediction, -grad_prediction


# Functions #########################################################

@OPS.register('add', [(2, 3, 4), (3, 1)])
def add(a, b):
    a, b = _promote(a, b)
    return Add().apply(a, b)


@OPS.register('sub', [(2, 3, 4), (1, 4)])
def sub(a, b):
    a, b = _promote(a, b)
    return Sub().apply(a, b)


@OPS.register('mul', [(2, 3, 4), (2, 3, 4)])
def mul(a, b):
    a, b = _promote(a, b)
    return Mul().apply(a, b)


@OPS.register('scale', [(3, 5)], factor=0.7)
def scale(x, factor):
    return Scale(factor).apply(x)


@OPS.register('matmul', [(2, 3, 4), (2, 4, 5)])
def matmul(a, b):
    return MatMul().apply(a, b)


@OPS.register('linear', [(2, 3, 5), (4, 5), (4,)])
def linear(x, weight, bias=None):
    if bias is None:
        return Linear().apply(x, weight)
    return Linear().apply(x, weight, bias)


@OPS.register('conv2d', [(1, 2, 5, 5), (3, 2, 3, 3), (3,)], stride=1, padding=1)
def conv2d(x, weight, bias, stride=1, padding=0):
    return Conv2d(stride, padding).apply(x, weight, bias)


@OPS.register('group_norm', [(2, 8, 3, 3), (8,), (8,)], groups=4)
def group_norm(x, gamma, beta, groups=None, eps=NORM_EPS):
    if groups is None:
        groups = norm_groups(x.shape[1])
    return GroupNorm(groups, eps).apply(x, gamma, beta)


@OPS.register('silu', [(3, 7)])
def silu(x):
    return SiLU().apply(x)


@OPS.register('sigmoid', [(3, 7)])
def sigmoid(x):
    return Sigmoid().apply(x)


@OPS.register('tanh', [(3, 7)])
def tanh(x):
    return Tanh().apply(x)


@OPS.register('exp', [(3, 7)])
def exp(x):
    return Exp().apply(x)


@OPS.register('softmax', [(2, 3, 6)], axis=-1)
def softmax(x, axis=-1):
    return Softmax(axis).apply(x)


@OPS.register('upsample_nearest2x', [(1, 2, 3, 4)])
def upsample_nearest2x(x):
    return UpsampleNearest2x().apply(x)


@OPS.register('concat', [(2, 3, 4), (2, 5, 4)], axis=1)
def concat(*tensors, axis=0):
    return Concat(axis).apply(*tensors)


@OPS.register('reshape', [(2, 3, 4)], shape=(6, 4))
def reshape(x, shape):
    return Reshape(tuple(shape)).apply(x)


@OPS.register('transpose', [(2, 3, 4)], axes=(2, 0, 1))
def transpose(x, axes):
    return Transpose(tuple(axes)).apply(x)


@OPS.register('index', [(4, 5, 3)], key=(slice(1, 3), Ellipsis, slice(0, 2)))
def index(x, key):
    return Index(key).apply(x)


@OPS.register('sum', [(3, 4, 2)], axis=1)
def reduce_sum(x, axis=None, keepdims=False):
    return Sum(axis, keepdims).apply(x)


@OPS.register('mean', [(3, 4, 2)], axis=2)
def reduce_mean(x, axis=None, keepdims=False):
    return Mean(axis, keepdims).apply(x)


@OPS.register('mse', [(2, 3, 4), (2, 3, 4)])
def mse(prediction, target):
    return MeanSquaredError().apply(prediction, target)


@OPS.register('cross_attention', [(1, 3, 8), (1, 4, 8), (8, 8), (8, 8), (8, 8), (8, 8), (8,)], heads=2)
def cross_attention(queries, keys_values, wq, wk, wv, wo, bo=None, heads=1):
    """
    Multi-head attention of `queries` [B, Nq, C] over `keys_values` [B, Nk, Ckv]

    softmax(Q Kᵀ / √(C / heads)) V with Q = queries Wqᵀ, K = kv Wkᵀ, V = kv Wvᵀ,
    followed by the output projection Wo. Self-attention is keys_values = queries.
    """
    batch, num_queries, channels = queries.shape
    num_keys = keys_values.shape[1]
    if channels % heads:
        raise ConfigurationError('cross_attention: {} heads do not divide {} channels'.format(heads, channels))
    if keys_values.shape[0] != batch:
        raise ShapeError('cross_attention keys/values', 0, batch, keys_values.shape[0])
    head_dim = channels // heads

    q = transpose(reshape(linear(queries, wq), (batch, num_queries, heads, head_dim)), (0, 2, 1, 3))
    k = transpose(reshape(linear(keys_values, wk), (batch, num_keys, heads, head_dim)), (0, 2, 3, 1))
    v = transpose(reshape(linear(keys_values, wv), (batch, num_keys, heads, head_dim)), (0, 2, 1, 3))

    weights = softmax(scale(matmul(q, k), 1.0 / math.sqrt(head_dim)), axis=-1)
    attended = reshape(transpose(matmul(weights, v), (0, 2, 1, 3)), (batch, num_queries, channels))
    return linear(attended, wo, bo)


def _promote(a, b):
    """
    Wrap plain numbers/arrays with the dtype of the tensor operand
    """
    if isinstance(a, Tensor) and not isinstance(b, Tensor):
        return a, as_tensor(np.asarray(b, dtype=a.dtype))
    if isinstance(b, Tensor) and not isinstance(a, Tensor):
        return as_tensor(np.asarray(a, dtype=b.dtype)), b
    return as_tensor(a), as_tensor(b)
