import os
import shutil
import tempfile
import unittest

import numpy as np

from portrait_rgbd.utils import CSVLog, csv_row, read_csv


class TestCSV(unittest.TestCase):
    def setUp(self):
        self.directory = tempfile.mkdtemp()

    def tearDown(self):
        shutil.rmtree(self.directory)

    def test_loss_record_encoding(self):
        row = csv_row([3, 'joint', 0.123456789123, np.float32(0.5), None])
        self.assertEqual(row, b'3,joint,0.12345679,0.5,\r\n')

    def test_log_appends_records_under_its_header(self):
        path = os.path.join(self.directory, 'logs', 'loss.csv')
        records = CSVLog(path, ['step', 'stage', 'loss'])
        records.append(step=1, stage='vae', loss=np.float64(2.0) / 3)
        records.append(step=2, stage='vae')
        self.assertEqual(read_csv(path), [['step', 'stage', 'loss'], ['1', 'vae', '0.66666667'], ['2', 'vae', '']])
        self.assertEqual(records.column('step'), [1, 2])
