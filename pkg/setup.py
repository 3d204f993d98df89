# -*- coding: utf-8 -*-
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

import os
from setuptools import setup


# Functions #########################################################

def package_data(pkg, root_list):
    """Generic function to find package_data for `pkg` under `root`."""
    data = []
    for root in root_list:
        for dirname, _, files in os.walk(os.path.join(pkg, root)):
            for fname in files:
                data.append(os.path.relpath(os.path.join(dirname, fname), pkg))

    return {pkg: data}


# Main ##############################################################

COMMANDS = [
    'portrait-rgbd = portrait_rgbd.cli:main',
]

setup(
    name='portrait-rgbd',
    version='0.1',
    description='Joint RGB and depth latent diffusion for portraits',
    packages=['portrait_rgbd'],
    python_requires='>=3.6',
    install_requires=[
        'lazy',
        'lxml',
        'matplotlib',
        'numpy',
        'pypng',
        'tqdm',
        'unicodecsv',
    ],
    entry_points={
        'console_scripts': COMMANDS,
    },
    package_data=package_data("portrait_rgbd", ["static"]),
)
