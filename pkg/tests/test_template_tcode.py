"""Test the reference template, deviations, T-code tiling and header boundaries."""

import os
import sys
import unittest

import numpy as np

sys.path.insert(
    0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..", "src"))
)

from demod import DecodedFrame
from frame_model import NS, NSF, constellation
from template_tcode import (
    KLNP,
    N_RANKS,
    N_ROWS,
    HeaderBoundary,
    ReferenceTemplate,
    TCode,
    TCodeError,
    build_reference_template,
    deviation,
    detect_header_boundary,
    extract_tcode,
    pairwise_correlation,
    qpsk_columns,
    qpsk_ratio,
    synthesize_tcode_region,
    tcode_columns,
)

QPSK = constellation("QPSK").points


def random_code(rng):
    """Return 60 random +1/-1 values."""
    return rng.choice([-1, 1], 60)


def make_frame(rows, labels=None, m=0):
    """Wrap a (300, 1004) block of symbols over Klnp as a decoded frame."""
    X = np.full((NSF, NS), np.nan, dtype=complex)
    X[2:, KLNP] = rows
    if labels is None:
        labels = ["PSS", "SSS"] + ["QPSK"] * N_ROWS
    return DecodedFrame(m, X, labels)


def tcode_frame(template, code, i_hm, rng):
    """Random QPSK header up to i_hm, then the template flipped by the tiled code."""
    rows = QPSK[rng.integers(0, 4, (N_ROWS, N_RANKS))]
    columns = list(range(i_hm + 1, NSF))
    region = synthesize_tcode_region(code, columns)
    tail = np.asarray(columns) - 2
    rows[tail] = template[tail] * region.values[tail]
    return make_frame(rows)


class TestTCodeTiling(unittest.TestCase):
    """Test code synthesis and extraction."""

    def setUp(self):
        """Seed a generator."""
        self.rng = np.random.default_rng(10)

    def test_round_trip_for_random_codes(self):
        """Verify synthesize then extract returns the code for 100 codes."""
        for _ in range(100):
            code = TCode(random_code(self.rng))
            D = synthesize_tcode_region(code, range(2, NSF))
            self.assertEqual(extract_tcode(D, 1), code)

    def test_extracted_phase_and_reference(self):
        """Verify phase is 16 * i_ref mod 60 at the first T-code column."""
        code = TCode(random_code(self.rng))
        D = synthesize_tcode_region(code, range(9, NSF))
        found = extract_tcode(D, 8)
        self.assertEqual(found.i_ref, 9)
        self.assertEqual(found.phase, (16 * 9) % 60)
        self.assertEqual(found.agreement, 1.0)

    def test_tiling_period(self):
        """Verify cell (i, r) equals code[(r - 16 i) mod 60]."""
        code = TCode(random_code(self.rng))
        D = synthesize_tcode_region(code, [5])
        r = np.arange(N_RANKS)
        np.testing.assert_array_equal(D.values[3], code.code[(r - 16 * 5) % 60])
        np.testing.assert_array_equal(code.at(5)[:60], code.code[(np.arange(60) - 80) % 60])

    def test_extraction_survives_flips(self):
        """Verify 10% independent cell flips never change the extracted code."""
        for _ in range(50):
            code = TCode(random_code(self.rng))
            D = synthesize_tcode_region(code, range(2, NSF))
            flips = self.rng.random(D.values.shape) < 0.1
            D.values[flips] *= -1
            self.assertEqual(extract_tcode(D, 1), code)

    def test_extract_without_columns_raises(self):
        """Ensure a boundary after the last column raises TCodeError."""
        D = synthesize_tcode_region(np.ones(60), range(2, 20))
        with self.assertRaises(TCodeError):
            extract_tcode(D, 30)

    def test_code_validation(self):
        """Ensure wrong length or values raise TCodeError."""
        with self.assertRaises(TCodeError):
            TCode(np.ones(59))
        with self.assertRaises(TCodeError):
            TCode(np.zeros(60))

    def test_codes_compare_by_value(self):
        """Verify equal codes are equal and hash alike."""
        values = random_code(self.rng)
        self.assertEqual(TCode(values, phase=4), TCode(values))
        self.assertEqual(len({TCode(values), TCode(values.copy())}), 1)

    def test_columns_out_of_range_raise(self):
        """Ensure columns outside I2 raise ValueError."""
        with self.assertRaises(ValueError):
            synthesize_tcode_region(np.ones(60), [1, 2])


class TestTemplate(unittest.TestCase):
    """Test template construction and deviations."""

    def setUp(self):
        """Draw a random QPSK template."""
        self.rng = np.random.default_rng(11)
        self.indices = self.rng.integers(0, 4, (N_ROWS, N_RANKS))
        self.template = QPSK[self.indices]

    def test_template_recovered_under_flips(self):
        """Verify the mode over 51 frames with 5% flips equals the template."""
        frames = []
        for m in range(51):
            idx = self.indices.copy()
            flips = self.rng.random(idx.shape) < 0.05
            idx[flips] = (idx[flips] + self.rng.integers(1, 4, int(flips.sum()))) % 4
            frames.append(make_frame(QPSK[idx], m=m))
        template = build_reference_template(frames)
        np.testing.assert_array_equal(template.indices(), self.indices)
        self.assertEqual(template.frame_count, 51)

    def test_template_skips_mixed_frames(self):
        """Verify frames that are not pure QPSK do not vote."""
        labels = ["PSS", "SSS"] + ["QPSK"] * (N_ROWS - 1) + ["16QAM"]
        mixed = make_frame(QPSK[np.zeros((N_ROWS, N_RANKS), int)], labels)
        pure = make_frame(self.template)
        template = build_reference_template([mixed, pure])
        self.assertEqual(template.frame_count, 1)
        with self.assertRaises(ValueError):
            build_reference_template([mixed])

    def test_from_indices_validation(self):
        """Ensure malformed index matrices raise ValueError."""
        with self.assertRaises(ValueError):
            ReferenceTemplate.from_indices(np.zeros((10, 10), int))
        with self.assertRaises(ValueError):
            ReferenceTemplate.from_indices(np.full((N_ROWS, N_RANKS), 4))

    def test_self_deviation_is_all_plus_one(self):
        """Verify the deviation of the template against itself."""
        template = ReferenceTemplate.from_indices(self.indices)
        D = deviation(make_frame(self.template), template)
        self.assertTrue(np.all(D.values == 1))
        self.assertFalse(D.mask.any())

    def test_deviation_flags_non_bpsk(self):
        """Verify quarter-turn products are flagged and masked."""
        rows = self.template.copy()
        rows[0, 0] *= 1j
        D = deviation(make_frame(rows), ReferenceTemplate.from_indices(self.indices))
        self.assertTrue(D.flagged[0, 0])
        self.assertTrue(D.mask[0, 0])
        self.assertEqual(int(D.flagged.sum()), 1)


class TestHeaderBoundary(unittest.TestCase):
    """Test header-boundary detection on synthetic frames."""

    def setUp(self):
        """Draw a template and a code."""
        self.rng = np.random.default_rng(12)
        self.indices = self.rng.integers(0, 4, (N_ROWS, N_RANKS))
        self.template = ReferenceTemplate.from_indices(self.indices)
        self.code = TCode(random_code(self.rng))

    def test_boundary_exact(self):
        """Verify the detected boundary equals the synthesized one."""
        for i_hm in (3, 7, 15):
            frame = tcode_frame(self.template.T, self.code, i_hm, self.rng)
            D = deviation(frame, self.template)
            result = detect_header_boundary(D)
            self.assertIsInstance(result, HeaderBoundary)
            self.assertEqual(result.i_hm, i_hm)
            self.assertEqual(result.tcode, self.code)
            self.assertEqual(tcode_columns(D, i_hm), list(range(i_hm + 1, NSF)))

    def test_random_frame_has_no_tcode(self):
        """Verify a frame of random QPSK has no T-code region."""
        frame = make_frame(QPSK[self.rng.integers(0, 4, (N_ROWS, N_RANKS))])
        result = detect_header_boundary(deviation(frame, self.template))
        self.assertIsNone(result.i_hm)
        self.assertIsNone(result.tcode)

    def test_no_header(self):
        """Verify a frame tiled from symbol 2 onward reports i_hm = 1."""
        frame = tcode_frame(self.template.T, self.code, 1, self.rng)
        result = detect_header_boundary(deviation(frame, self.template))
        self.assertEqual(result.i_hm, 1)


class TestCorpusStatistics(unittest.TestCase):
    """Test QPSK ratios and pairwise correlation."""

    def test_ratio_and_correlation(self):
        """Verify ratio counts QPSK columns and identical frames correlate fully."""
        rng = np.random.default_rng(13)
        rows = QPSK[rng.integers(0, 4, (N_ROWS, N_RANKS))]
        labels = ["PSS", "SSS"] + ["QPSK"] * 150 + ["16QAM"] * 150
        frame = make_frame(rows, labels)
        self.assertEqual(len(qpsk_columns(frame)), 150)
        self.assertEqual(qpsk_ratio(frame), 0.5)
        R, rho = pairwise_correlation(frame, frame)
        self.assertAlmostEqual(R, 150 * N_RANKS)
        self.assertEqual(rho, 0.5)


if __name__ == "__main__":
    unittest.main()
