"""Test the pilot codebook: loading, digit extraction and the pilot matrix."""

import os
import sys
import tempfile
import unittest

import numpy as np

sys.path.insert(
    0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..", "src"))
)

from frame_model import NSF, PILOT_SUBCARRIERS, constellation
from pilot_codes import (
    DEFAULT_PATH,
    PilotCodebook,
    PilotCodeError,
    base4_digits,
    digit_symbol,
    load_default,
    pilot_digit,
)


class TestDigits(unittest.TestCase):
    """Test base-4 digit extraction on exact integers."""

    def test_last_symbol_uses_least_significant_digit(self):
        """Verify symbol 301 reads the lowest base-4 digit."""
        self.assertEqual(pilot_digit(0b1110, 301), 2)
        self.assertEqual(pilot_digit(0b1110, 300), 3)

    def test_digit_out_of_range_raises(self):
        """Ensure symbols before 2 or after 301 raise ValueError."""
        with self.assertRaises(ValueError):
            pilot_digit(5, 1)
        with self.assertRaises(ValueError):
            pilot_digit(5, 302)

    def test_expansion_consistency(self):
        """Verify the base-4 expansion reconstructs the integer."""
        book = load_default()
        for q in book.q.values():
            digits = base4_digits(q)
            self.assertEqual(len(digits), 300)
            value = 0
            for d in digits:
                value = value * 4 + d
            self.assertEqual(value, q)

    def test_digits_match_expansion(self):
        """Verify pilot_digit(q, i) is the (i - 2)th expansion digit for every k, i."""
        book = load_default()
        table = book.digits()
        for row, q in enumerate(book.q.values()):
            self.assertEqual(list(table[row]), base4_digits(q))

    def test_digit_symbol_alphabet(self):
        """Verify the four digits map onto the 4QAM points."""
        symbols = digit_symbol(np.arange(4))
        reference = constellation("4QAM").points
        for s in symbols:
            self.assertAlmostEqual(np.min(np.abs(reference - s)), 0.0)


class TestCodebook(unittest.TestCase):
    """Test loading the shipped constants and building the pilot matrix."""

    def setUp(self):
        """Load the default codebook."""
        self.book = load_default()

    def test_all_sixteen_constants_load(self):
        """Verify exactly the pilot subcarriers are present."""
        self.assertEqual(sorted(self.book.q), [int(k) for k in PILOT_SUBCARRIERS])

    def test_matrix_within_4qam(self):
        """Verify the 16 x 300 matrix only holds 4QAM points."""
        matrix = self.book.pilot_matrix()
        self.assertEqual(matrix.shape, (16, 300))
        reference = constellation("4QAM").points
        dist = np.abs(matrix[..., None] - reference).min(axis=-1)
        self.assertLess(dist.max(), 1e-12)

    def test_matrix_is_read_only(self):
        """Ensure callers cannot modify the cached matrix."""
        with self.assertRaises(ValueError):
            self.book.pilot_matrix()[0, 0] = 0

    def test_pilot_symbol_agrees_with_matrix(self):
        """Verify single lookups agree with the matrix."""
        matrix = self.book.pilot_matrix()
        self.assertEqual(self.book.pilot_symbol(2, 488), matrix[0, 0])
        self.assertEqual(self.book.pilot_symbol(301, 535), matrix[15, 299])

    def test_pilot_symbol_rejects_data_subcarrier(self):
        """Ensure a non-pilot subcarrier raises ValueError."""
        with self.assertRaises(ValueError):
            self.book.pilot_symbol(10, 100)

    def test_lookup_layout(self):
        """Verify the lookup holds pilots on Kp of symbols 2..301 and NaN elsewhere."""
        lookup = self.book.pilot_lookup()
        self.assertEqual(lookup.shape, (NSF, 1024))
        self.assertTrue(np.all(np.isnan(lookup[:2])))
        self.assertEqual(int(np.isfinite(lookup).sum()), 16 * 300)
        np.testing.assert_array_equal(lookup[2:, PILOT_SUBCARRIERS], self.book.pilot_matrix().T)

    def test_codebook_rejects_missing_key(self):
        """Ensure a codebook without every pilot subcarrier raises."""
        codes = dict(self.book.q)
        codes.pop(488)
        with self.assertRaises(ValueError):
            PilotCodebook(codes)

    # --- File validation --------------------------------------------------

    def _write(self, text):
        """Write text to a temporary file and return its path."""
        f = tempfile.NamedTemporaryFile("w", suffix=".txt", delete=False)
        f.write(text)
        f.close()
        self.addCleanup(os.remove, f.name)
        return f.name

    def test_short_constant_names_subcarrier(self):
        """Ensure a short constant raises PilotCodeError naming k."""
        with open(DEFAULT_PATH, "r", encoding="utf-8") as f:
            lines = f.read().splitlines()
        lines = [line for line in lines if line and not line.startswith("#")]
        k, digits = lines[0].split()
        lines[0] = f"{k} {digits[:-1]}"
        path = self._write("\n".join(lines) + "\n")
        with self.assertRaises(PilotCodeError) as ctx:
            PilotCodebook.from_file(path)
        self.assertIn(f"k={k}", str(ctx.exception))

    def test_non_hex_character_raises(self):
        """Ensure a non-hex digit raises PilotCodeError."""
        path = self._write("488 " + "G" * 150 + "\n")
        with self.assertRaises(PilotCodeError):
            PilotCodebook.from_file(path)


if __name__ == "__main__":
    unittest.main()
