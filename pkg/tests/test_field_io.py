import os
import sys
import tempfile
import unittest

import numpy as np
import pandas as pd
from numpy.testing import assert_allclose

SCRIPTS_DIR = os.path.abspath(os.path.join(os.path.dirname(__file__), "..", "scripts"))
if SCRIPTS_DIR not in sys.path:
    sys.path.insert(0, SCRIPTS_DIR)

from constants import FIELD_MAGIC
from errors import FormatError, InvalidInput, MissingInput
from field_io import (
    GridField,
    decode_field,
    encode_field,
    field_to_csv,
    load_subsolution,
    read_field,
    save_subsolution,
    write_field,
)
from subsolution_factory import DensityProfile, PressureLaw, periodic_pressure_subsolution


class TestEncoding(unittest.TestCase):
    def setUp(self):
        values = np.arange(16 ** 3, dtype=float).reshape(16, 16, 16) / 7.0
        self.field = GridField.scalar(values, 1.0 / 16)

    def test_header_layout(self):
        data = encode_field(self.field)
        self.assertTrue(data.startswith(FIELD_MAGIC))
        self.assertEqual(len(data), len(FIELD_MAGIC) + 12 + 3 * 8 + 8 + 8 * 16 ** 3)
        decoded = decode_field(data)
        self.assertEqual(decoded.shape, (16, 16, 16))
        self.assertEqual(decoded.spacing, 1.0 / 16)
        self.assertEqual(decoded.components, 1)

    def test_bad_magic(self):
        data = bytearray(encode_field(self.field))
        data[0] ^= 0xFF
        with self.assertRaises(FormatError):
            decode_field(bytes(data))

    def test_bad_version(self):
        data = bytearray(encode_field(self.field))
        data[len(FIELD_MAGIC)] = 99
        with self.assertRaises(FormatError):
            decode_field(bytes(data))

    def test_truncated(self):
        data = encode_field(self.field)
        with self.assertRaises(FormatError):
            decode_field(data[:-8])
        with self.assertRaises(FormatError):
            decode_field(data[: len(FIELD_MAGIC) + 4])

    def test_non_finite_samples(self):
        with self.assertRaises(InvalidInput):
            GridField.scalar(np.full((4, 4, 4), np.nan), 0.25)

    def test_symmetric_layout(self):
        rng = np.random.Generator(np.random.Philox(4))
        A = rng.standard_normal((16, 16, 16, 3, 3))
        A = A + np.swapaxes(A, -1, -2)
        field = GridField.symmetric(A, 1.0 / 16)
        self.assertEqual(field.components, 6)
        assert_allclose(field.as_symmetric(), A)


class TestFiles(unittest.TestCase):
    def test_missing_file(self):
        with self.assertRaises(MissingInput):
            read_field(os.path.join(tempfile.gettempdir(), "no_such_field.wf"))

    def test_subsolution_snapshot(self):
        profile = DensityProfile("sine", 1.0, amplitude=0.3)
        s = periodic_pressure_subsolution(profile, 0.5, 16, 3)
        with tempfile.TemporaryDirectory() as tmp_dir:
            paths = save_subsolution(tmp_dir, "stage_00", s)
            self.assertTrue(all(os.path.exists(path) for path in paths.values()))
            loaded = load_subsolution(tmp_dir, "stage_00", s.B, PressureLaw())
        assert_allclose(loaded.rho, s.rho, rtol=0.0, atol=0.0)
        assert_allclose(loaded.m, s.m, rtol=0.0, atol=0.0)
        assert_allclose(loaded.U, s.U, rtol=0.0, atol=0.0)
        self.assertTrue(bool(np.all(loaded.domain)))
        self.assertEqual(loaded.spacing, s.spacing)
        self.assertAlmostEqual(loaded.defect_integral(), s.defect_integral(), places=12)

    def test_mixed_shapes_are_rejected(self):
        s = periodic_pressure_subsolution(DensityProfile("constant", 1.0), 1.0, 16, 3)
        with tempfile.TemporaryDirectory() as tmp_dir:
            paths = save_subsolution(tmp_dir, "snap", s)
            write_field(paths["q"], GridField.scalar(np.ones((32, 32, 32)), 1.0 / 32))
            with self.assertRaises(FormatError):
                load_subsolution(tmp_dir, "snap", s.B)

    def test_field_to_csv(self):
        values = np.zeros((16, 16, 16, 3))
        values[1, 2, 3] = [1.0, 2.0, 3.0]
        with tempfile.TemporaryDirectory() as tmp_dir:
            path = os.path.join(tmp_dir, "m.wf")
            write_field(path, GridField.vector(values, 1.0 / 16))
            csv_path = os.path.join(tmp_dir, "m.csv")
            df = field_to_csv(path, csv_path)
            reread = pd.read_csv(csv_path)
        self.assertEqual(list(df.columns), ["i0", "i1", "i2", "c0", "c1", "c2"])
        self.assertEqual(len(reread), 16 ** 3)
        row = reread[(reread.i0 == 1) & (reread.i1 == 2) & (reread.i2 == 3)].iloc[0]
        self.assertEqual((row.c0, row.c1, row.c2), (1.0, 2.0, 3.0))


if __name__ == "__main__":
    unittest.main()
