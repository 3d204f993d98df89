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
from collections import namedtuple

import numpy as np

from . import functional  # noqa: F401 pylint: disable=unused-import
from .tensor import EXTENDED, OPS, Tensor, no_grad

# Globals ###########################################################

log = logging.getLogger(__name__)

STEP = 1e-5
MAX_CHECKED_ELEMENTS = 512
BOUND = 1e-4

GradCheckReport = namedtuple('GradCheckReport', ['op_name', 'seed', 'max_rel_err', 'checked', 'total', 'subsampled'])


# Functions #########################################################

def relative_error(analytic, numeric):
    """
    |a - n| / max(|a|, |n|, floor), the floor being 1e-3 of the largest numeric
    gradient so that near-zero entries compare on an absolute scale
    """
    floor = 1e-3 * np.max(np.abs(numeric)) + 1e-12
    denominator = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return np.abs(analytic - numeric) / denominator


def grad_check(op_name, input_shapes=None, seed=0, step=STEP, max_elements=MAX_CHECKED_ELEMENTS):
    """
    Compare the analytic gradients of a registered operation against central
    finite differences, in extended precision

    The scalar being differentiated is <op(inputs), r> for a random projection
    r, so every output element takes part. Inputs with more than
    `max_elements` elements are checked on a seeded random subset.
    """
    entry = OPS.get(op_name)
    shapes = input_shapes if input_shapes is not None else entry.sample_shapes
    rng = np.random.default_rng(seed)
    arrays = [rng.standard_normal(shape).astype(EXTENDED) for shape in shapes]

    def evaluate(values):
        return entry.apply(*[Tensor(value, dtype=EXTENDED) for value in values], **entry.params)

    inputs = [Tensor(array.copy(), requires_grad=True, dtype=EXTENDED) for array in arrays]
    output = entry.apply(*inputs, **entry.params)
    projection = rng.standard_normal(output.shape).astype(EXTENDED)
    output.backward(projection)

    worst = 0.0
    checked = 0
    total = 0
    subsampled = False
    with no_grad():
        for position, array in enumerate(arrays):
            total += array.size
            if array.size > max_elements:
                indices = np.sort(rng.choice(array.size, size=max_elements, replace=False))
                subsampled = True
            else:
                indices = np.arange(array.size)

            numeric = np.empty(len(indices), dtype=EXTENDED)
            for slot, flat_index in enumerate(indices):
                perturbed = [value.copy() for value in arrays]
                flat = perturbed[position].reshape(-1)
                flat[flat_index] = array.reshape(-1)[flat_index] + step
                plus = np.sum(evaluate(perturbed).data * projection)
                flat[flat_index] = array.reshape(-1)[flat_index] - step
                minus = np.sum(evaluate(perturbed).data * projection)
                numeric[slot] = (plus - minus) / (2.0 * step)

            grad = inputs[position].grad
            analytic = np.zeros(len(indices)) if grad is None else grad.reshape(-1)[indices]
            errors = relative_error(analytic, numeric)
            if errors.size:
                worst = max(worst, float(errors.max()))
            checked += len(indices)

    if subsampled:
        log.debug('grad_check(%s): checked %d of %d input elements', op_name, checked, total)
    return GradCheckReport(op_name, seed, worst, checked, total, subsampled)


def check_all(seeds=range(5), bound=BOUND):
    """
    Run `grad_check` on every registered operation for every seed

    Returns (reports, failures) where failures are the reports over `bound`.
    """
    reports = []
    for name in OPS.names():
        for seed in seeds:
            report = grad_check(name, seed=seed)
            log.info('grad_check %-20s seed=%d max_rel_err=%.3e', name, seed, report.max_rel_err)
            reports.append(report)
    failures = [report for report in reports if report.max_rel_err >= bound]
    return reports, failures
