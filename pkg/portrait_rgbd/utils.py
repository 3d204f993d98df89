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

# Imports ###########################################################

import logging
import os
from io import BytesIO

import matplotlib
import numpy as np
import unicodecsv

from .errors import DataError

matplotlib.use('Agg')
from matplotlib import pyplot  # noqa: E402  pylint: disable=wrong-import-position

# Globals ###########################################################

log = logging.getLogger(__name__)

OUTPUT_ROOT_ENV = 'PORTRAIT_RGBD_OUTPUT_ROOT'
CSV_FLOAT_FORMAT = '{:.8g}'


# Classes ###########################################################

class CSVLog:
    """
    Appends one CSV record per call to a file, writing the header first
    """

    def __init__(self, path, columns):
        self.path = path
        self.columns = list(columns)
        self.rows = []
        ensure_dir(os.path.dirname(path) or '.')
        self._write(csv_row(self.columns), 'wb')

    def _write(self, data, mode):
        try:
            with open(self.path, mode) as handle:
                handle.write(data)
        except OSError as error:
            raise DataError(self.path, error.strerror or str(error))

    def append(self, **values):
        row = [values.get(column, '') for column in self.columns]
        self.rows.append(row)
        self._write(csv_row(row), 'ab')

    def column(self, name):
        position = self.columns.index(name)
        return [row[position] for row in self.rows]


# Functions #########################################################

def csv_cell(value):
    if value is None:
        return ''
    if isinstance(value, (float, np.floating)):
        return CSV_FLOAT_FORMAT.format(float(value))
    return value


def csv_row(values):
    """
    One encoded CSV record; floats keep CSV_FLOAT_FORMAT significant digits
    """
    buffer = BytesIO()
    unicodecsv.writer(buffer, encoding='utf-8').writerow([csv_cell(value) for value in values])
    return buffer.getvalue()


def write_csv(path, header, rows):
    try:
        with open(path, 'wb') as handle:
            handle.write(csv_row(header))
            for row in rows:
                handle.write(csv_row(row))
    except OSError as error:
        raise DataError(path, error.strerror or str(error))


def read_csv(path):
    try:
        with open(path, 'rb') as handle:
            reader = unicodecsv.reader(handle, encoding='utf-8')
            return list(reader)
    except OSError as error:
        raise DataError(path, error.strerror or str(error))


def resolve_output_dir(path):
    """
    Relative output directories are placed under $PORTRAIT_RGBD_OUTPUT_ROOT
    when it is set
    """
    root = os.environ.get(OUTPUT_ROOT_ENV)
    if root and not os.path.isabs(path):
        return os.path.join(root, path)
    return path


def ensure_dir(path):
    try:
        os.makedirs(path, exist_ok=True)
    except OSError as error:
        raise DataError(path, error.strerror or str(error))
    return path


def save_loss_plot(path, steps, losses, title):
    figure, axes = pyplot.subplots(figsize=(6, 4))
    axes.plot(steps, losses, linewidth=1.0)
    axes.set_xlabel('step')
    axes.set_ylabel('loss')
    axes.set_yscale('log')
    axes.set_title(title)
    figure.tight_layout()
    try:
        figure.savefig(path, dpi=100)
    except OSError as error:
        raise DataError(path, error.strerror or str(error))
    finally:
        pyplot.close(figure)


def image_grid(images, columns):
    """
    Tile [N, 3, H, W] images in [-1, 1] into one [3, rows*H, columns*W] image
    """
    images = np.asarray(images)
    count, channels, height, width = images.shape
    rows = -(-count // columns)
    grid = np.full((channels, rows * height, columns * width), -1.0, dtype=images.dtype)
    for position, image in enumerate(images):
        row, column = divmod(position, columns)
        grid[:, row * height:(row + 1) * height, column * width:(column + 1) * width] = image
    return grid


def depth_to_rgb(normalized):
    """
    Gray three-channel view of normalized depth ([-1, 1], near is bright)
    """
    normalized = np.asarray(normalized)
    return np.repeat(-normalized[..., None, :, :], 3, axis=-3)
