"""Versioned text formats for decoded frames, templates, T-codes and averages.

Every file opens with a ``# <MAGIC> <version>`` line. Symbol rows are written
as one character per subcarrier: the constellation point index in base 32
(``0-9a-v``), ``-`` for a masked cell.
"""

from __future__ import annotations

import logging
import math
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from errors import FormatError
from frame_model import CONSTELLATION_LABELS, NS, NSF, build_frame_grid, constellation
from template_tcode import N_RANKS, N_ROWS, N_T, ReferenceTemplate, TCode

logger = logging.getLogger(__name__)

VERSION = 1
ALPHABET = "0123456789abcdefghijklmnopqrstuv"
MASKED = "-"
FRAME_MAGIC = "KUFRAME"
TEMPLATE_MAGIC = "KUTEMPLATE"
TCODE_MAGIC = "KUTCODE"
AVERAGE_MAGIC = "KUAVERAGE"

_KL = build_frame_grid(11.325e9).Kl
_LOOKUP = {c: n for n, c in enumerate(ALPHABET)}


def encode_indices(indices: Sequence[int]) -> str:
    """Render point indices as a character row; negative entries are masked."""
    return "".join(ALPHABET[i] if i >= 0 else MASKED for i in np.asarray(indices, dtype=int))


def decode_indices(row: str) -> np.ndarray:
    """Inverse of :func:`encode_indices`.

    Raises:
        ValueError: On a character outside the alphabet.
    """
    try:
        return np.array([-1 if c == MASKED else _LOOKUP[c] for c in row], dtype=int)
    except KeyError as exc:
        raise ValueError(f"invalid symbol character {exc.args[0]!r}") from exc


def encode_symbols(values: np.ndarray, label: str) -> str:
    """Hard-decide ``values`` against ``label`` and render the indices."""
    return encode_indices(constellation(label).decide(values))


def decode_symbols(row: str, label: str) -> np.ndarray:
    """Map a character row back to constellation points, NaN where masked."""
    points = constellation(label).points
    idx = decode_indices(row)
    if idx.max(initial=-1) >= len(points):
        raise ValueError(f"index {idx.max()} outside {label}")
    out = points[np.clip(idx, 0, None)].astype(complex)
    out[idx < 0] = np.nan
    return out


def _read_lines(path: str, magic: str) -> Tuple[List[str], List[str]]:
    with open(path, "r", encoding="utf-8") as f:
        lines = f.read().splitlines()
    if not lines:
        raise FormatError("empty file", path=path, line=1)
    head = lines[0].split()
    if len(head) < 3 or head[0] != "#" or head[1] != magic:
        raise FormatError(f"expected '# {magic} <version>' header", path=path, line=1)
    if head[2] != str(VERSION):
        raise FormatError(f"unsupported version {head[2]}", path=path, line=1)
    return head[3:], lines[1:]


def _fields(tokens: Sequence[str], path: str, lineno: int) -> Dict[str, str]:
    out = {}
    for token in tokens:
        key, sep, value = token.partition("=")
        if not sep:
            raise FormatError(f"expected key=value, got {token!r}", path=path, line=lineno)
        out[key] = value
    return out


# ---- Decoded frames ----


def write_decoded_frames(path: str, frames: Sequence) -> None:
    """Write decoded frames, one block per frame."""
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"# {FRAME_MAGIC} {VERSION}\n")
        for frame in frames:
            sync = frame.sync
            retained = frame.retained()
            f.write(
                f"frame m={frame.m} snr={frame.snr_pre_est!r} "
                f"phi0={sync.phi_m0!r} dbeta_c={sync.dbeta_c!r} "
                f"tau0={sync.tau_m0!r} dbeta_s={sync.dbeta_s!r} retained={len(retained)}\n"
            )
            for i in retained:
                label = frame.labels[i]
                f.write(f"{i} {label} {encode_symbols(frame.X_hat[i, _KL], label)}\n")
    logger.info("Wrote %d decoded frames to %s", len(frames), path)


def read_decoded_frames(path: str) -> List:
    """Read frames written by :func:`write_decoded_frames`.

    Raises:
        FormatError: On any malformed line.
    """
    from demod import DecodedFrame, SyncEstimate

    _, lines = _read_lines(path, FRAME_MAGIC)
    frames = []
    current = None
    expected = 0
    for lineno, line in enumerate(lines, start=2):
        parts = line.split()
        if not parts:
            continue
        try:
            if parts[0] == "frame":
                if current is not None and expected:
                    raise ValueError(f"frame {current.m} is missing {expected} symbols")
                meta = _fields(parts[1:], path, lineno)
                sync = SyncEstimate(
                    float(meta["phi0"]),
                    float(meta["dbeta_c"]),
                    float(meta["tau0"]),
                    float(meta["dbeta_s"]),
                )
                X = np.full((NSF, NS), np.nan, dtype=complex)
                labels: List[Optional[str]] = [None] * NSF
                m = None if meta["m"] == "None" else int(meta["m"])
                current = DecodedFrame(m, X, labels, float(meta["snr"]), sync)
                expected = int(meta["retained"])
                frames.append(current)
                continue
            if current is None:
                raise ValueError("symbol line before any frame header")
            if len(parts) != 3:
                raise ValueError("expected '<i> <label> <symbols>'")
            i, label, row = int(parts[0]), parts[1], parts[2]
            if label not in CONSTELLATION_LABELS:
                raise ValueError(f"unknown label {label!r}")
            if not 0 <= i < NSF or len(row) != len(_KL):
                raise ValueError(f"symbol {i} has {len(row)} cells, expected {len(_KL)}")
            current.X_hat[i, _KL] = decode_symbols(row, label)
            current.labels[i] = label
            expected -= 1
        except (KeyError, ValueError) as exc:
            if isinstance(exc, FormatError):
                raise
            raise FormatError(str(exc), path=path, line=lineno) from exc
    if current is not None and expected:
        raise FormatError(f"frame {current.m} is missing {expected} symbols", path=path)
    return frames


# ---- Templates ----


def write_template(path: str, template: ReferenceTemplate) -> None:
    """Write one row per Klnp rank, one QPSK index per OFDM symbol in I2."""
    indices = template.indices()
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"# {TEMPLATE_MAGIC} {VERSION} frames={template.frame_count}\n")
        for r in range(N_RANKS):
            f.write(encode_indices(indices[:, r]) + "\n")


def read_template(path: str) -> ReferenceTemplate:
    """Read a template written by :func:`write_template`."""
    extra, lines = _read_lines(path, TEMPLATE_MAGIC)
    meta = _fields(extra, path, 1)
    rows = [line for line in lines if line.strip()]
    if len(rows) != N_RANKS:
        raise FormatError(f"expected {N_RANKS} rows, found {len(rows)}", path=path)
    indices = np.empty((N_ROWS, N_RANKS), dtype=int)
    for r, row in enumerate(rows):
        try:
            values = decode_indices(row.strip())
            if len(values) != N_ROWS or values.min() < 0 or values.max() > 3:
                raise ValueError(f"row must hold {N_ROWS} indices in 0..3")
        except ValueError as exc:
            raise FormatError(str(exc), path=path, line=r + 2) from exc
        indices[:, r] = values
    return ReferenceTemplate.from_indices(indices, int(meta.get("frames", 1)))


# ---- T-codes ----


def tcode_string(code: TCode) -> str:
    """Render a code as 60 ``+``/``-`` characters."""
    return "".join("+" if v > 0 else "-" for v in code.code)


def write_tcodes(path: str, codes: Sequence[Tuple[Optional[int], TCode]]) -> None:
    """Write ``(frame index, code)`` pairs, a header line then the code string."""
    with open(path, "w", encoding="utf-8") as f:
        f.write(f"# {TCODE_MAGIC} {VERSION}\n")
        for m, code in codes:
            f.write(
                f"code m={m} phase={code.phase} agreement={code.agreement!r} i_ref={code.i_ref}\n"
            )
            f.write(tcode_string(code) + "\n")


def read_tcodes(path: str) -> List[Tuple[Optional[int], TCode]]:
    """Read codes written by :func:`write_tcodes`."""
    _, lines = _read_lines(path, TCODE_MAGIC)
    out = []
    pending = None
    for lineno, line in enumerate(lines, start=2):
        line = line.strip()
        if not line:
            continue
        try:
            if line.startswith("code"):
                pending = _fields(line.split()[1:], path, lineno)
                continue
            if pending is None:
                raise ValueError("code string without header line")
            if len(line) != N_T or set(line) - {"+", "-"}:
                raise ValueError(f"expected {N_T} '+'/'-' characters")
            code = TCode(
                [1 if c == "+" else -1 for c in line],
                int(pending["phase"]),
                float(pending["agreement"]),
                int(pending["i_ref"]),
            )
            m = None if pending["m"] == "None" else int(pending["m"])
            out.append((m, code))
            pending = None
        except (KeyError, ValueError) as exc:
            if isinstance(exc, FormatError):
                raise
            raise FormatError(str(exc), path=path, line=lineno) from exc
    return out


# ---- Averaging results ----


def write_averages(path: str, result) -> None:
    """Write an averaging result: every (i, k) cell with its mean and flag."""
    i, k = np.meshgrid(result.symbols, result.subcarriers, indexing="ij")
    table = np.column_stack(
        [
            i.ravel(),
            k.ravel(),
            result.averages.real.ravel(),
            result.averages.imag.ravel(),
            result.flags.ravel().astype(int),
        ]
    )
    header = (
        f"# {AVERAGE_MAGIC} {VERSION} frames={result.frame_count} "
        f"threshold={result.threshold!r} noise_floor={result.noise_floor!r}"
    )
    with open(path, "w", encoding="utf-8") as f:
        f.write(header + "\n")
        np.savetxt(f, table, fmt=["%d", "%d", "%.9e", "%.9e", "%d"])


def read_averages(path: str):
    """Read a file written by :func:`write_averages`."""
    from analysis import AveragingResult

    extra, _ = _read_lines(path, AVERAGE_MAGIC)
    meta = _fields(extra, path, 1)
    try:
        table = np.loadtxt(path, comments="#", ndmin=2)
    except ValueError as exc:
        raise FormatError(str(exc), path=path) from exc
    symbols = np.unique(table[:, 0]).astype(int)
    subcarriers = np.unique(table[:, 1]).astype(int)
    shape = (len(symbols), len(subcarriers))
    if table.shape != (math.prod(shape), 5):
        raise FormatError("cell table is not a full symbol x subcarrier grid", path=path)
    averages = (table[:, 2] + 1j * table[:, 3]).reshape(shape)
    flags = table[:, 4].astype(bool).reshape(shape)
    return AveragingResult(
        averages,
        flags,
        symbols,
        subcarriers,
        int(meta["frames"]),
        float(meta["threshold"]),
        float(meta["noise_floor"]),
    )
