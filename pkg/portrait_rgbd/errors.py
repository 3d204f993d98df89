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

# Classes ###########################################################

class PortraitRGBDError(Exception):
    """
    Base class of every error raised on purpose by the package
    """


class ConfigurationError(PortraitRGBDError, ValueError):
    pass


class ShapeError(PortraitRGBDError, ValueError):
    """
    A tensor does not have the expected extent along one axis
    """

    def __init__(self, what, axis, expected, actual):
        self.what = what
        self.axis = axis
        self.expected = expected
        self.actual = actual
        super().__init__('{}: axis {} should be {}, got {}'.format(what, axis, expected, actual))


class NonFiniteError(PortraitRGBDError, FloatingPointError):
    pass


class OpLookupError(PortraitRGBDError, LookupError):
    pass


class DegenerateAlignmentError(PortraitRGBDError, ValueError):
    pass


class EmptyMaskError(PortraitRGBDError, ValueError):
    pass


class CheckpointError(PortraitRGBDError):
    pass


class DivergenceError(PortraitRGBDError, FloatingPointError):
    pass


class DataError(PortraitRGBDError, OSError):
    """
    A file of the dataset or of an output directory could not be read or written
    """

    def __init__(self, path, reason):
        self.path = path
        super().__init__('{}: {}'.format(path, reason))


class LevelError(PortraitRGBDError, IndexError):
    """
    A diffusion level outside the schedule's range
    """


class MaskError(PortraitRGBDError, ValueError):
    pass
