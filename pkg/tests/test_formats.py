"""Test the text formats for decoded frames, templates, T-codes and averages."""

import os
import sys
import tempfile
import unittest

import numpy as np

sys.path.insert(
    0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..", "src"))
)

from analysis import AveragingResult
from demod import DecodedFrame, SyncEstimate
from errors import FormatError
from formats import (
    decode_indices,
    decode_symbols,
    encode_indices,
    encode_symbols,
    read_averages,
    read_decoded_frames,
    read_template,
    read_tcodes,
    tcode_string,
    write_averages,
    write_decoded_frames,
    write_template,
    write_tcodes,
)
from frame_model import NS, NSF, build_frame_grid, constellation
from template_tcode import N_RANKS, N_ROWS, ReferenceTemplate, TCode

KL = build_frame_grid(11.325e9).Kl


def decoded_frame(rng, m=3):
    """A frame mixing QPSK, 4QAM, 16QAM, 32QAM and one composite symbol."""
    X = np.full((NSF, NS), np.nan, dtype=complex)
    labels = ["PSS", "SSS"]
    names = ["QPSK", "4QAM", "16QAM", "32QAM"]
    for i in range(2, NSF):
        label = "composite" if i == 10 else names[i % 4]
        labels.append(label)
        if label != "composite":
            points = constellation(label).points
            X[i, KL] = points[rng.integers(0, len(points), len(KL))]
    X[5, KL[:7]] = np.nan
    sync = SyncEstimate(0.25, 3e-8, 1.5e-9, -2e-8)
    return DecodedFrame(m, X, labels, 13.8, sync)


class TestRowCodec(unittest.TestCase):
    """Test the character row codec."""

    def test_indices_round_trip_with_mask(self):
        """Verify indices and masked cells survive encoding."""
        idx = np.array([0, 9, 10, 31, -1])
        row = encode_indices(idx)
        self.assertEqual(row, "09av-")
        np.testing.assert_array_equal(decode_indices(row), idx)

    def test_invalid_character_raises(self):
        """Ensure characters outside the alphabet raise ValueError."""
        with self.assertRaises(ValueError):
            decode_indices("0z")

    def test_symbols_decode_to_points(self):
        """Verify symbol rows decode to constellation points, NaN when masked."""
        points = constellation("16QAM").points
        values = np.array([points[3], points[15], np.nan])
        back = decode_symbols(encode_symbols(values, "16QAM"), "16QAM")
        np.testing.assert_array_equal(back[:2], values[:2])
        self.assertTrue(np.isnan(back[2]))

    def test_index_beyond_constellation_raises(self):
        """Ensure an index past the constellation size raises ValueError."""
        with self.assertRaises(ValueError):
            decode_symbols("v", "QPSK")


class TestFiles(unittest.TestCase):
    """Test whole-file round trips and diagnostics."""

    def setUp(self):
        """Create a temporary directory and generator."""
        self.tmp = tempfile.TemporaryDirectory()
        self.addCleanup(self.tmp.cleanup)
        self.rng = np.random.default_rng(20)

    def path(self, name):
        """Return a path inside the temporary directory."""
        return os.path.join(self.tmp.name, name)

    def test_decoded_frames_round_trip(self):
        """Verify symbols, labels and sync parameters survive a round trip."""
        frames = [decoded_frame(self.rng, 3), decoded_frame(self.rng, 4)]
        write_decoded_frames(self.path("frames.txt"), frames)
        back = read_decoded_frames(self.path("frames.txt"))
        self.assertEqual(len(back), 2)
        for original, loaded in zip(frames, back):
            self.assertEqual(loaded.m, original.m)
            self.assertEqual(loaded.retained(), original.retained())
            self.assertIsNone(loaded.labels[10])
            for i in original.retained():
                np.testing.assert_array_equal(loaded.X_hat[i, KL], original.X_hat[i, KL])
            self.assertEqual(loaded.sync.dbeta_c, original.sync.dbeta_c)
            self.assertEqual(loaded.snr_pre_est, original.snr_pre_est)

    def test_bad_magic_reports_line_one(self):
        """Ensure a wrong header raises FormatError on line 1."""
        with open(self.path("bad.txt"), "w", encoding="utf-8") as f:
            f.write("# KUTEMPLATE 1\n")
        with self.assertRaises(FormatError) as ctx:
            read_decoded_frames(self.path("bad.txt"))
        self.assertEqual(ctx.exception.line, 1)

    def test_unsupported_version(self):
        """Ensure an unknown version raises FormatError."""
        with open(self.path("v.txt"), "w", encoding="utf-8") as f:
            f.write("# KUFRAME 9\n")
        with self.assertRaises(FormatError):
            read_decoded_frames(self.path("v.txt"))

    def test_corrupt_symbol_line_reports_line(self):
        """Ensure a short symbol row raises FormatError naming its line."""
        write_decoded_frames(self.path("frames.txt"), [decoded_frame(self.rng)])
        with open(self.path("frames.txt"), "r", encoding="utf-8") as f:
            lines = f.read().splitlines()
        lines[3] = lines[3][:-5]
        with open(self.path("frames.txt"), "w", encoding="utf-8") as f:
            f.write("\n".join(lines) + "\n")
        with self.assertRaises(FormatError) as ctx:
            read_decoded_frames(self.path("frames.txt"))
        self.assertEqual(ctx.exception.line, 4)

    def test_template_round_trip(self):
        """Verify template indices and frame count survive a round trip."""
        indices = self.rng.integers(0, 4, (N_ROWS, N_RANKS))
        template = ReferenceTemplate.from_indices(indices, 7)
        write_template(self.path("template.txt"), template)
        back = read_template(self.path("template.txt"))
        np.testing.assert_array_equal(back.indices(), indices)
        self.assertEqual(back.frame_count, 7)

    def test_template_wrong_row_count(self):
        """Ensure a truncated template raises FormatError."""
        template = ReferenceTemplate.from_indices(np.zeros((N_ROWS, N_RANKS), int))
        write_template(self.path("template.txt"), template)
        with open(self.path("template.txt"), "r", encoding="utf-8") as f:
            lines = f.read().splitlines()
        with open(self.path("template.txt"), "w", encoding="utf-8") as f:
            f.write("\n".join(lines[:-1]) + "\n")
        with self.assertRaises(FormatError):
            read_template(self.path("template.txt"))

    def test_tcodes_round_trip(self):
        """Verify codes, phases and frame indices survive a round trip."""
        codes = [
            (0, TCode(self.rng.choice([-1, 1], 60), 32, 0.99, 2)),
            (None, TCode(self.rng.choice([-1, 1], 60), 4, 1.0, 19)),
        ]
        write_tcodes(self.path("codes.txt"), codes)
        back = read_tcodes(self.path("codes.txt"))
        self.assertEqual([m for m, _ in back], [0, None])
        for (_, a), (_, b) in zip(codes, back):
            self.assertEqual(a, b)
            self.assertEqual((a.phase, a.agreement, a.i_ref), (b.phase, b.agreement, b.i_ref))
        self.assertEqual(len(tcode_string(codes[0][1])), 60)

    def test_tcode_bad_string(self):
        """Ensure a code line with a wrong character raises FormatError."""
        with open(self.path("codes.txt"), "w", encoding="utf-8") as f:
            f.write("# KUTCODE 1\ncode m=0 phase=0 agreement=1.0 i_ref=0\n" + "+" * 59 + "x\n")
        with self.assertRaises(FormatError) as ctx:
            read_tcodes(self.path("codes.txt"))
        self.assertEqual(ctx.exception.line, 3)

    def test_averages_round_trip(self):
        """Verify averages and flags survive a round trip."""
        averages = self.rng.standard_normal((3, 4)) + 1j * self.rng.standard_normal((3, 4))
        flags = np.abs(averages) > 1
        result = AveragingResult(
            averages, flags, np.array([2, 3, 4]), np.array([2, 3, 4, 5]), 12, 0.5, 0.08
        )
        write_averages(self.path("avg.txt"), result)
        back = read_averages(self.path("avg.txt"))
        np.testing.assert_allclose(back.averages, averages, rtol=1e-8)
        np.testing.assert_array_equal(back.flags, flags)
        np.testing.assert_array_equal(back.subcarriers, [2, 3, 4, 5])
        self.assertEqual(back.frame_count, 12)
        self.assertEqual(back.threshold, 0.5)


if __name__ == "__main__":
    unittest.main()
