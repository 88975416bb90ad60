"""Test the frame model: constants, index sets, offsets and constellations."""

import os
import sys
import tempfile
import unittest

import numpy as np

sys.path.insert(
    0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..", "src"))
)

from errors import FormatError
from frame_model import (
    CONSTELLATION_LABELS,
    FRAME_PERIOD_SAMPLES,
    FRAME_SAMPLES,
    build_frame_grid,
    channel_center,
    constellation,
    load_channel_table,
    subcarrier_offset,
)


class TestFrameGrid(unittest.TestCase):
    """Test index-set sizes, timing and the subcarrier offset map."""

    def setUp(self):
        """Build the grid for the default channel."""
        self.grid = build_frame_grid(11.325e9)

    def test_index_set_sizes(self):
        """Verify |K|, |Kl|, |Kp| and |Klnp|."""
        self.assertEqual(len(self.grid.K), 1024)
        self.assertEqual(len(self.grid.Kl), 1020)
        self.assertEqual(len(self.grid.Kp), 16)
        self.assertEqual(len(self.grid.Klnp), 1004)

    def test_averaging_cell_count(self):
        """Verify |I2| x |Kl| is the number of averaged cells."""
        self.assertEqual(len(self.grid.I2) * len(self.grid.Kl), 306000)

    def test_timing(self):
        """Verify subcarrier spacing, symbol interval and frame guard."""
        self.assertAlmostEqual(self.grid.F, 234375.0)
        self.assertAlmostEqual(self.grid.Tsym, 4.4e-6)
        self.assertAlmostEqual(self.grid.frame_guard, 1 / 750 - 302 * 4.4e-6)
        self.assertEqual(FRAME_SAMPLES, 318912)
        self.assertEqual(FRAME_PERIOD_SAMPLES, 320000)

    def test_sets_are_read_only(self):
        """Ensure index sets cannot be modified in place."""
        with self.assertRaises(ValueError):
            self.grid.Kl[0] = 5

    def test_positions_within_kl(self):
        """Verify Klnp and Kp positions index back into Kl."""
        np.testing.assert_array_equal(self.grid.Kl[self.grid.klnp_in_kl], self.grid.Klnp)
        np.testing.assert_array_equal(self.grid.Kl[self.grid.kp_in_kl], self.grid.Kp)

    def test_out_of_band_centre_raises(self):
        """Ensure a centre outside the Ku band raises ValueError."""
        with self.assertRaises(ValueError):
            build_frame_grid(2.4e9)

    # --- Offsets ----------------------------------------------------------

    def test_offset_branch_boundary(self):
        """Verify d[k] around the half-band boundary."""
        self.assertEqual(subcarrier_offset(0), 0)
        self.assertEqual(subcarrier_offset(511), 511)
        self.assertEqual(subcarrier_offset(512), -512)
        self.assertEqual(subcarrier_offset(1023), -1)

    def test_offset_out_of_range_raises(self):
        """Ensure indices outside 0..1023 raise ValueError."""
        with self.assertRaises(ValueError):
            subcarrier_offset(1024)
        with self.assertRaises(ValueError):
            subcarrier_offset(-1)


class TestChannelTable(unittest.TestCase):
    """Test loading the channel table."""

    def test_default_table_loads(self):
        """Verify the shipped table holds in-band centres."""
        table = load_channel_table()
        self.assertTrue(table)
        for centre in table.values():
            self.assertTrue(10.7e9 <= centre <= 12.7e9)

    def test_channel_center_lookup(self):
        """Verify lookups agree with the table and unknown channels raise."""
        table = load_channel_table()
        index = sorted(table)[0]
        self.assertEqual(channel_center(index), table[index])
        with self.assertRaises(ValueError):
            channel_center(max(table) + 100)

    def test_malformed_line_reports_line(self):
        """Ensure a malformed record raises FormatError naming the line."""
        with tempfile.NamedTemporaryFile("w", suffix=".txt", delete=False) as f:
            f.write("# comment\n1=11.325e9\nbroken\n")
            path = f.name
        try:
            with self.assertRaises(FormatError) as ctx:
                load_channel_table(path)
            self.assertEqual(ctx.exception.line, 3)
        finally:
            os.remove(path)


class TestConstellation(unittest.TestCase):
    """Test constellation normalisation and hard decisions."""

    def test_unit_power_zero_mean(self):
        """Verify every constellation has unit average power and zero mean."""
        for label in CONSTELLATION_LABELS:
            points = constellation(label).points
            self.assertAlmostEqual(np.mean(np.abs(points) ** 2), 1.0)
            self.assertAlmostEqual(abs(np.mean(points)), 0.0)

    def test_cardinalities(self):
        """Verify the number of points per label."""
        sizes = {label: constellation(label).cardinality for label in CONSTELLATION_LABELS}
        self.assertEqual(sizes, {"QPSK": 4, "4QAM": 4, "16QAM": 16, "32QAM": 32})

    def test_4qam_is_rotated_qpsk(self):
        """Verify 4QAM points sit at odd multiples of 45 degrees."""
        angles = np.angle(constellation("4QAM").points) % (np.pi / 2)
        np.testing.assert_allclose(angles, np.pi / 4)

    def test_decide_and_nearest(self):
        """Verify hard decisions map noisy values to the right point, NaN to -1."""
        qpsk = constellation("QPSK")
        values = np.array([0.9 + 0.1j, -0.1 + 1.2j, np.nan])
        np.testing.assert_array_equal(qpsk.decide(values), [0, 1, -1])
        nearest = qpsk.nearest(values)
        self.assertEqual(nearest[0], 1)
        self.assertTrue(np.isnan(nearest[2]))

    def test_decode_is_idempotent(self):
        """Ensure deciding an already-decided vector is the identity."""
        c = constellation("32QAM")
        rng = np.random.default_rng(3)
        values = c.points[rng.integers(0, 32, 200)]
        np.testing.assert_array_equal(c.nearest(values), values)

    def test_unknown_label_raises(self):
        """Ensure an unknown label raises ValueError."""
        with self.assertRaises(ValueError):
            constellation("64QAM")


if __name__ == "__main__":
    unittest.main()
