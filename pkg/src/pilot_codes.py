"""Pilot codes module.

Generates the edge-pilot symbol matrix from the 150-digit hexadecimal
constants shipped in ``pilot_codes.txt``. Digit extraction uses exact
integer arithmetic only.
"""

from __future__ import annotations

import logging
import os
import string
from typing import Dict, List, Optional

import numpy as np

from errors import FormatError
from frame_model import NS, NSF, PILOT_SUBCARRIERS

logger = logging.getLogger(__name__)

DEFAULT_PATH = os.path.join(os.path.dirname(__file__), "pilot_codes.txt")
HEX_DIGITS = 150
FIRST_SYMBOL = 2
LAST_SYMBOL = NSF - 1
_HEX = set(string.hexdigits.upper())


class PilotCodeError(FormatError):
    """A pilot constant is missing or malformed."""


def pilot_digit(q: int, i: int) -> int:
    """Return the base-4 digit of ``q`` that drives symbol ``i``.

    Args:
        q (int): Pilot constant as an unsigned integer.
        i (int): OFDM symbol index in 2..301.

    Returns:
        int: floor(q / 4**(301 - i)) mod 4.

    Raises:
        ValueError: If i is not a post-SSS symbol index.
    """
    if int(i) != i or not FIRST_SYMBOL <= i <= LAST_SYMBOL:
        raise ValueError(
            f"Symbol index {i} outside {FIRST_SYMBOL}..{LAST_SYMBOL}."
        )
    return (q >> (2 * (LAST_SYMBOL - int(i)))) & 3


def base4_digits(q: int, width: int = 2 * HEX_DIGITS) -> List[int]:
    """Most-significant-first base-4 expansion of ``q`` padded to ``width``."""
    digits = []
    for _ in range(width):
        digits.append(q & 3)
        q >>= 2
    return digits[::-1]


def digit_symbol(s) -> complex:
    """Map base-4 digit(s) onto the 4QAM pilot alphabet."""
    return np.exp(1j * (np.pi / 2) * (np.asarray(s) + 0.5))


class PilotCodebook:
    """The sixteen edge-pilot constants, keyed by subcarrier index."""

    def __init__(self, codes: Dict[int, int]):
        """Build a codebook from already-parsed integers.

        Args:
            codes (dict): Subcarrier index to 600-bit unsigned integer.

        Raises:
            ValueError: If the keys are not exactly the pilot subcarriers.
        """
        expected = set(int(k) for k in PILOT_SUBCARRIERS)
        if set(codes) != expected:
            missing = sorted(expected - set(codes))
            extra = sorted(set(codes) - expected)
            raise ValueError(f"Pilot codebook mismatch: missing {missing}, extra {extra}.")
        self.q = dict(sorted(codes.items()))
        self._matrix: Optional[np.ndarray] = None

    @classmethod
    def from_file(cls, path: str = DEFAULT_PATH) -> "PilotCodebook":
        """Load and validate a ``k <150 hex digits>`` file.

        Raises:
            PilotCodeError: On a malformed record, naming the subcarrier.
        """
        codes: Dict[int, int] = {}
        with open(path, "r", encoding="utf-8") as f:
            for lineno, raw in enumerate(f, start=1):
                line = raw.strip()
                if not line or line.startswith("#"):
                    continue
                parts = line.split()
                if len(parts) != 2 or not parts[0].isdigit():
                    raise PilotCodeError("expected 'k <hex>'", path=path, line=lineno)
                k, digits = int(parts[0]), parts[1]
                if len(digits) != HEX_DIGITS:
                    raise PilotCodeError(
                        f"pilot k={k} has {len(digits)} hex digits, expected {HEX_DIGITS}",
                        path=path,
                        line=lineno,
                    )
                bad = sorted(set(digits) - _HEX)
                if bad or digits != digits.upper():
                    raise PilotCodeError(
                        f"pilot k={k} contains non-hex or lowercase characters {bad}",
                        path=path,
                        line=lineno,
                    )
                if k in codes:
                    raise PilotCodeError(f"pilot k={k} listed twice", path=path, line=lineno)
                codes[k] = int(digits, 16)
        try:
            book = cls(codes)
        except ValueError as exc:
            raise PilotCodeError(str(exc), path=path) from exc
        logger.debug("Loaded %d pilot constants from %s", len(codes), path)
        return book

    def pilot_symbol(self, i: int, k: int) -> complex:
        """Return the pilot value on subcarrier ``k`` of symbol ``i``.

        Raises:
            ValueError: If k is not a pilot subcarrier or i is out of range.
        """
        if k not in self.q:
            raise ValueError(f"Subcarrier {k} is not a pilot subcarrier.")
        return complex(digit_symbol(pilot_digit(self.q[k], i)))

    def digits(self) -> np.ndarray:
        """Base-4 digit matrix, one row per pilot subcarrier, one column per i in 2..301."""
        rows = [
            [pilot_digit(q, i) for i in range(FIRST_SYMBOL, LAST_SYMBOL + 1)]
            for q in self.q.values()
        ]
        return np.array(rows, dtype=np.int8)

    def pilot_matrix(self) -> np.ndarray:
        """Return the 16 x 300 complex pilot matrix (rows in subcarrier order)."""
        if self._matrix is None:
            matrix = digit_symbol(self.digits())
            matrix.setflags(write=False)
            self._matrix = matrix
        return self._matrix

    def pilot_lookup(self) -> np.ndarray:
        """Known pilots laid out as a (302, 1024) array, NaN where nothing is known."""
        lookup = np.full((NSF, NS), np.nan, dtype=complex)
        lookup[FIRST_SYMBOL:, list(self.q)] = self.pilot_matrix().T
        return lookup


def load_default() -> PilotCodebook:
    """Load the shipped pilot constants."""
    return PilotCodebook.from_file(DEFAULT_PATH)
