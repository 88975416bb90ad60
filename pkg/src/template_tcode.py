"""Reference template and T-code module.

Works on decoded frames (anything exposing ``X_hat`` as a (302, 1024) symbol
matrix with NaN for unknown cells and ``labels`` as one constellation label
per OFDM symbol). Deviation matrices are laid out as (|I2|, |Klnp|): row
``i - 2`` holds OFDM symbol ``i``, column ``r`` is the rank of the subcarrier
within Klnp in ascending order.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Iterable, List, Optional, Sequence, Tuple

import numpy as np

from frame_model import NSF, build_frame_grid, constellation

logger = logging.getLogger(__name__)

N_T = 60
D_T = 16
FIRST_ROW = 2
N_ROWS = NSF - FIRST_ROW
DEFAULT_THRESHOLD = 0.95

_GRID = build_frame_grid(11.325e9)
KLNP = _GRID.Klnp
N_RANKS = len(KLNP)
_QPSK = constellation("QPSK")


class TCodeError(ValueError):
    """Raised when a T-code cannot be determined from the available cells."""


def qpsk_columns(frame) -> np.ndarray:
    """Absolute indices i in I2 whose label is QPSK (the set I_Qm)."""
    labels = frame.labels
    return np.array(
        [i for i in range(FIRST_ROW, NSF) if labels[i] == "QPSK"], dtype=int
    )


def qpsk_ratio(frame) -> float:
    """Fraction of post-SSS symbols labelled QPSK."""
    return len(qpsk_columns(frame)) / N_ROWS


def pairwise_correlation(frame_m, frame_n) -> Tuple[complex, float]:
    """Cross-correlate two frames over their shared QPSK symbols.

    Returns:
        tuple: (R_mn, rho_mn) with R_mn summed over Klnp.
    """
    shared = np.intersect1d(qpsk_columns(frame_m), qpsk_columns(frame_n))
    if shared.size == 0:
        return 0j, 0.0
    xm = frame_m.X_hat[np.ix_(shared, KLNP)]
    xn = frame_n.X_hat[np.ix_(shared, KLNP)]
    R = complex(np.nansum(np.conj(xm) * xn))
    return R, len(shared) / N_ROWS


# ---- Reference template ----


@dataclass
class ReferenceTemplate:
    """Element-wise QPSK mode over a set of pure-QPSK frames.

    Attributes:
        T (np.ndarray): (|I2|, |Klnp|) template symbols.
        tallies (np.ndarray): (|I2|, |Klnp|, 4) votes per QPSK point.
        ties (np.ndarray): True where the mode was decided by point order.
        frame_count (int): Number of frames that voted.
    """

    T: np.ndarray
    tallies: np.ndarray = field(repr=False)
    ties: np.ndarray = field(repr=False)
    frame_count: int = 0

    @classmethod
    def from_indices(cls, indices: np.ndarray, frame_count: int = 1) -> "ReferenceTemplate":
        """Wrap a matrix of QPSK point indices, e.g. one read back from disk."""
        indices = np.asarray(indices, dtype=int)
        if indices.shape != (N_ROWS, N_RANKS):
            raise ValueError(f"Template must be {N_ROWS} x {N_RANKS}, got {indices.shape}.")
        if indices.min() < 0 or indices.max() > 3:
            raise ValueError("Template indices must lie in 0..3.")
        tallies = np.zeros((N_ROWS, N_RANKS, 4), dtype=int)
        np.put_along_axis(tallies, indices[..., None], frame_count, axis=-1)
        return cls(_QPSK.points[indices], tallies, np.zeros(indices.shape, bool), frame_count)

    def indices(self) -> np.ndarray:
        """QPSK point index of every template element."""
        return _QPSK.decide(self.T)


def build_reference_template(frames: Sequence) -> ReferenceTemplate:
    """Build the reference template from the pure-QPSK frames in ``frames``.

    Frames with a QPSK ratio below one are skipped.

    Raises:
        ValueError: If no pure-QPSK frame is supplied.
    """
    pure = [f for f in frames if qpsk_ratio(f) == 1.0]
    if len(pure) < len(frames):
        logger.info("Template skips %d frames that are not pure QPSK", len(frames) - len(pure))
    if not pure:
        raise ValueError("No pure-QPSK frames to build a template from.")
    tallies = np.zeros((N_ROWS, N_RANKS, 4), dtype=int)
    for frame in pure:
        idx = _QPSK.decide(frame.X_hat[FIRST_ROW:, KLNP])
        for p in range(4):
            tallies[..., p] += idx == p
    best = tallies.max(axis=-1)
    ties = (tallies == best[..., None]).sum(axis=-1) > 1
    T = _QPSK.points[np.argmax(tallies, axis=-1)]
    logger.debug("Template from %d frames, %d tied cells", len(pure), int(ties.sum()))
    return ReferenceTemplate(T, tallies, ties, len(pure))


# ---- Deviations ----


@dataclass
class DeviationMatrix:
    """BPSK deviations of one frame from the template.

    ``values`` holds +1/-1 on known cells and 0 elsewhere; ``mask`` is True for
    cells outside I_Qm or flagged; ``flagged`` marks products that were not ±1.
    """

    values: np.ndarray
    mask: np.ndarray
    flagged: np.ndarray
    columns: np.ndarray
    m: Optional[int] = None

    def rows(self, columns: Iterable[int]) -> np.ndarray:
        """Row positions for absolute symbol indices."""
        return np.asarray(list(columns), dtype=int) - FIRST_ROW


def deviation(frame, template: ReferenceTemplate, tol: float = 1e-6) -> DeviationMatrix:
    """Element-wise product of a frame's QPSK columns with the conjugate template.

    Raises:
        ValueError: If the frame or template has the wrong shape.
    """
    X = np.asarray(frame.X_hat)
    if X.shape[0] != NSF or template.T.shape != (N_ROWS, N_RANKS):
        raise ValueError(
            f"Shape mismatch: frame {X.shape}, template {template.T.shape}."
        )
    columns = qpsk_columns(frame)
    rows = columns - FIRST_ROW
    product = X[FIRST_ROW:, KLNP] * np.conj(template.T)
    values = np.zeros((N_ROWS, N_RANKS), dtype=np.int8)
    mask = np.ones((N_ROWS, N_RANKS), dtype=bool)
    flagged = np.zeros((N_ROWS, N_RANKS), dtype=bool)
    sub = product[rows]
    plus = np.abs(sub - 1) < tol
    minus = np.abs(sub + 1) < tol
    values[rows] = np.where(plus, 1, np.where(minus, -1, 0))
    flagged[rows] = ~(plus | minus)
    mask[rows] = flagged[rows]
    if flagged.any():
        logger.warning("Frame %s has %d non-BPSK deviations", getattr(frame, "m", None), int(flagged.sum()))
    return DeviationMatrix(values, mask, flagged, columns, getattr(frame, "m", None))


# ---- T-codes ----


@dataclass(frozen=True)
class TCode:
    """A 60-element ±1 code as seen at OFDM symbol 0.

    ``phase`` is the code shift at the reference column ``i_ref``
    (16 * i_ref mod 60); ``agreement`` is the matched-cell fraction.
    """

    code: np.ndarray
    phase: int = 0
    agreement: float = 1.0
    i_ref: int = 0

    def __post_init__(self):
        code = np.asarray(self.code, dtype=np.int8)
        if code.shape != (N_T,) or not np.all(np.abs(code) == 1):
            raise TCodeError(f"T-code must be {N_T} values of +1/-1.")
        code.setflags(write=False)
        object.__setattr__(self, "code", code)

    def at(self, i: int) -> np.ndarray:
        """The code rotated to symbol ``i`` (element r is the value at rank r)."""
        return np.roll(self.code, D_T * i)

    def __eq__(self, other):
        return isinstance(other, TCode) and np.array_equal(self.code, other.code)

    def __hash__(self):
        return hash(self.code.tobytes())


def _positions(columns: np.ndarray) -> np.ndarray:
    ranks = np.arange(N_RANKS)
    return (ranks[None, :] - D_T * np.asarray(columns)[:, None]) % N_T


def synthesize_tcode_region(code, columns: Iterable[int]) -> DeviationMatrix:
    """Tile ``code`` over the given symbol columns.

    Args:
        code (TCode or sequence): The 60-element code.
        columns: Absolute symbol indices in I2.
    """
    tcode = code if isinstance(code, TCode) else TCode(code)
    columns = np.asarray(sorted(set(int(i) for i in columns)), dtype=int)
    if columns.size and (columns.min() < FIRST_ROW or columns.max() >= NSF):
        raise ValueError(f"Columns must lie in {FIRST_ROW}..{NSF - 1}.")
    values = np.zeros((N_ROWS, N_RANKS), dtype=np.int8)
    mask = np.ones((N_ROWS, N_RANKS), dtype=bool)
    rows = columns - FIRST_ROW
    values[rows] = tcode.code[_positions(columns)]
    mask[rows] = False
    return DeviationMatrix(values, mask, np.zeros_like(mask), columns)


def _agreements(D: DeviationMatrix, columns: np.ndarray, code: np.ndarray) -> Tuple[np.ndarray, int, int]:
    rows = columns - FIRST_ROW
    model = code[_positions(columns)]
    known = ~D.mask[rows]
    match = (D.values[rows] == model) & known
    per_column = match.sum(axis=1) / np.maximum(known.sum(axis=1), 1)
    return per_column, int(match.sum()), int(known.sum())


def _vote(D: DeviationMatrix, columns: np.ndarray) -> np.ndarray:
    rows = columns - FIRST_ROW
    pos = _positions(columns)
    known = ~D.mask[rows]
    weights = D.values[rows].astype(float)
    votes = np.bincount(pos[known], weights=weights[known], minlength=N_T)
    counts = np.bincount(pos[known], minlength=N_T)
    if np.any(counts == 0):
        raise TCodeError(
            f"Only {int(np.count_nonzero(counts))} of {N_T} code positions are covered."
        )
    return np.where(votes >= 0, 1, -1).astype(np.int8)


def extract_tcode(D: DeviationMatrix, i_hm: int) -> TCode:
    """Majority-vote the T-code from the QPSK columns after the header.

    Raises:
        TCodeError: If no column follows the header or a position is uncovered.
    """
    columns = D.columns[D.columns > i_hm]
    if columns.size == 0:
        raise TCodeError(f"No QPSK columns after header boundary {i_hm}.")
    code = _vote(D, columns)
    _, matched, total = _agreements(D, columns, code)
    i_ref = int(columns[0])
    return TCode(code, (D_T * i_ref) % N_T, matched / max(total, 1), i_ref)


@dataclass(frozen=True)
class HeaderBoundary:
    """Result of header-boundary detection; ``i_hm`` is None without a T-code region."""

    i_hm: Optional[int]
    agreement: float
    tcode: Optional[TCode] = None


def detect_header_boundary(
    D: DeviationMatrix,
    threshold: float = DEFAULT_THRESHOLD,
    min_columns: int = 1,
) -> HeaderBoundary:
    """Find the last header symbol i_hm.

    The code is seeded from the final QPSK column and refitted on the passing
    tail until every column after the boundary agrees with the tiled model at
    ``threshold`` or better.
    """
    columns = D.columns
    if columns.size < min_columns:
        return HeaderBoundary(None, 0.0)
    start = columns.size - 1
    for _ in range(columns.size):
        try:
            code = _vote(D, columns[start:])
        except TCodeError:
            return HeaderBoundary(None, 0.0)
        per_column, _, _ = _agreements(D, columns, code)
        failing = np.flatnonzero(per_column < threshold)
        if failing.size and failing[-1] == columns.size - 1:
            logger.debug("Final column agreement %.3f, no T-code region", per_column[-1])
            return HeaderBoundary(None, float(per_column[-1]))
        first = int(failing[-1]) + 1 if failing.size else 0
        if columns.size - first < min_columns:
            return HeaderBoundary(None, float(per_column[first:].mean()))
        if first == start:
            break
        start = first
    tail = columns[start:]
    tcode = extract_tcode(D, int(tail[0]) - 1)
    header = columns[:start]
    i_hm = int(header[-1]) if header.size else FIRST_ROW - 1
    logger.debug("Header boundary %d, agreement %.4f", i_hm, tcode.agreement)
    return HeaderBoundary(i_hm, tcode.agreement, tcode)


def tcode_columns(D: DeviationMatrix, i_hm: int) -> List[int]:
    """The T-code column set I_Tm for boundary ``i_hm``."""
    return [int(i) for i in D.columns if i > i_hm]
