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
Reverse-mode automatic differentiation over numpy arrays.

A `Tensor` wraps an ndarray. Differentiable operations are `Function`
subclasses with a forward rule and a backward rule; applying one records the
inputs on the output so `backward()` can walk the graph in reverse
topological order. Every operation the package uses is registered in `OPS`
so that the gradient checker can cover it.
"""

# Imports ###########################################################

import contextlib
import logging
from collections import namedtuple

import numpy as np

from .errors import NonFiniteError, OpLookupError, ShapeError

# Globals ###########################################################

log = logging.getLogger(__name__)

STANDARD = np.float32
EXTENDED = np.float64

_GRAD_MODE = {'enabled': True}


# Classes ###########################################################

class Tensor:
    """
    An n-dimensional array taking part in gradient computation
    """
    # ndarray operands defer to the reflected operators below
    __array_ufunc__ = None

    def __init__(self, data, requires_grad=False, dtype=None):
        array = np.asarray(data)
        if dtype is None:
            dtype = array.dtype if array.dtype in (STANDARD, EXTENDED) else STANDARD
        self.data = np.asarray(array, dtype=dtype)
        self.requires_grad = requires_grad
        self.grad = None
        self.creator = None

    def __repr__(self):
        return 'Tensor(shape={}, dtype={}, requires_grad={})'.format(
            self.shape, self.dtype.name, self.requires_grad)

    @property
    def shape(self):
        return self.data.shape

    @property
    def ndim(self):
        return self.data.ndim

    @property
    def size(self):
        return self.data.size

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self):
        return self.data

    def detach(self):
        return Tensor(self.data)

    def zero_grad(self):
        self.grad = None

    def backward(self, grad=None):
        backward(self, grad)

    def __add__(self, other):
        from .functional import add
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        from .functional import sub
        return sub(self, other)

    def __rsub__(self, other):
        from .functional import sub
        return sub(other, self)

    def __mul__(self, other):
        from .functional import mul, scale
        if np.isscalar(other):
            return scale(self, other)
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        from .functional import scale
        return scale(self, -1.0)

    def __matmul__(self, other):
        from .functional import matmul
        return matmul(self, other)

    def __getitem__(self, key):
        from .functional import index
        return index(self, key)

    def reshape(self, *shape):
        from .functional import reshape
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = shape[0]
        return reshape(self, tuple(shape))

    def transpose(self, *axes):
        from .functional import transpose
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = axes[0]
        return transpose(self, tuple(axes))

    def sum(self, axis=None, keepdims=False):
        from .functional import reduce_sum
        return reduce_sum(self, axis=axis, keepdims=keepdims)

    def mean(self, axis=None, keepdims=False):
        from .functional import reduce_mean
        return reduce_mean(self, axis=axis, keepdims=keepdims)


class Function:
    """
    A differentiable operation

    Subclasses implement `forward(*arrays)` returning one array and
    `backward(grad)` returning one gradient (or None) per input. A fresh
    instance is created for every application, so it may keep whatever the
    backward rule needs.
    """
    name = None

    def __init__(self):
        self.inputs = ()

    def apply(self, *inputs):
        tensors = [as_tensor(value) for value in inputs]
        output = self.forward(*[tensor.data for tensor in tensors])
        check_finite(output, self.name, 'forward')
        result = Tensor(output, dtype=output.dtype)
        if is_grad_enabled() and any(tensor.requires_grad for tensor in tensors):
            result.requires_grad = True
            result.creator = self
            self.inputs = tensors
        return result

    def forward(self, *arrays):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError


OpEntry = namedtuple('OpEntry', ['name', 'apply', 'sample_shapes', 'params'])


class OpRegistry:
    """
    Named differentiable operations, with the input shapes used to check them
    """

    def __init__(self):
        self._entries = {}

    def register(self, name, sample_shapes, **params):
        def decorator(fn):
            self._entries[name] = OpEntry(name, fn, tuple(tuple(shape) for shape in sample_shapes), params)
            return fn
        return decorator

    def get(self, name):
        try:
            return self._entries[name]
        except KeyError:
            raise OpLookupError('Unregistered operation: `{}`'.format(name))

    def names(self):
        return sorted(self._entries)

    def __contains__(self, name):
        return name in self._entries

    def __len__(self):
        return len(self._entries)


OPS = OpRegistry()


# Functions #########################################################

def is_grad_enabled():
    return _GRAD_MODE['enabled']


@contextlib.contextmanager
def no_grad():
    """
    Disable graph recording inside the block
    """
    previous = _GRAD_MODE['enabled']
    _GRAD_MODE['enabled'] = False
    try:
        yield
    finally:
        _GRAD_MODE['enabled'] = previous


def as_tensor(value, dtype=None):
    if isinstance(value, Tensor):
        return value
    return Tensor(value, dtype=dtype)


def check_finite(array, op_name, phase):
    if not np.all(np.isfinite(array)):
        raise NonFiniteError('Non-finite value produced by `{}` ({} pass)'.format(op_name, phase))


def _reverse_topological_order(root):
    order = []
    seen = set()
    stack = [(root, False)]
    while stack:
        node, expanded = stack.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack.append((node, True))
        if node.creator is not None:
            for parent in node.creator.inputs:
                if id(parent) not in seen:
                    stack.append((parent, False))
    order.reverse()
    return order


def backward(root, grad=None):
    """
    Propagate `grad` (ones for a single-element root) from `root` to every leaf
    with `requires_grad`, accumulating into the leaves' `.grad`
    """
    if grad is None:
        if root.size != 1:
            raise ShapeError('backward() without explicit gradient', 'all', 'one element', root.shape)
        grad = np.ones_like(root.data)
    grad = np.asarray(grad, dtype=root.dtype)
    if grad.shape != root.shape:
        raise ShapeError('root gradient', 'all', root.shape, grad.shape)

    pending = {id(root): grad}
    for node in _reverse_topological_order(root):
        node_grad = pending.pop(id(node), None)
        if node_grad is None:
            continue
        if node.creator is None:
            if node.requires_grad:
                node.grad = node_grad.copy() if node.grad is None else node.grad + node_grad
            continue

        function = node.creator
        input_grads = function.backward(node_grad)
        for tensor, tensor_grad in zip(function.inputs, input_grads):
            if tensor_grad is None or not tensor.requires_grad:
                continue
            check_finite(tensor_grad, function.name, 'backward')
            if tensor_grad.shape != tensor.shape:
                raise ShapeError('gradient of `{}`'.format(function.name), 'all', tensor.shape, tensor_grad.shape)
            key = id(tensor)
            if key in pending:
                pending[key] = pending[key] + tensor_grad
            else:
                pending[key] = tensor_grad
