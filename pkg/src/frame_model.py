"""Frame model module.

Structural constants of a Ku-band downlink frame, the subcarrier index sets,
the index-to-frequency map and the modulation constellations shared by every
other module.
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from typing import Dict

import numpy as np

from errors import FormatError

logger = logging.getLogger(__name__)

NS = 1024
NG = 32
NSF = 302
FS = 240e6
FRAME_INTERVAL = 1.0 / 750.0
SLOT_SAMPLES = NS + NG
FRAME_SAMPLES = NSF * SLOT_SAMPLES
FRAME_PERIOD_SAMPLES = int(round(FS * FRAME_INTERVAL))
BAND_HZ = (10.7e9, 12.7e9)

GUTTER = np.array([0, 1, 1022, 1023])
PILOT_SUBCARRIERS = np.concatenate([np.arange(488, 496), np.arange(528, 536)])

DEFAULT_CHANNEL_TABLE = os.path.join(os.path.dirname(__file__), "channels.txt")


def subcarrier_offset(k: int) -> int:
    """Return the signed frequency offset d[k] of subcarrier k.

    Args:
        k (int): Subcarrier index in 0..1023.

    Returns:
        int: k for the lower half, k - 1024 for the upper half.

    Raises:
        ValueError: If k is outside the subcarrier range.
    """
    if not 0 <= int(k) < NS or int(k) != k:
        raise ValueError(f"Subcarrier index {k} outside 0..{NS - 1}.")
    k = int(k)
    return k if k <= NS // 2 - 1 else k - NS


OFFSETS = np.array([subcarrier_offset(k) for k in range(NS)])


@dataclass(frozen=True)
class FrameGrid:
    """Frame structure for one channel centre frequency.

    Index sets are numpy arrays in ascending subcarrier / symbol order.
    """

    fc: float
    ns: int = NS
    ng: int = NG
    nsf: int = NSF
    fs: float = FS
    tf: float = FRAME_INTERVAL
    K: np.ndarray = field(init=False, repr=False, compare=False)
    Kg: np.ndarray = field(init=False, repr=False, compare=False)
    Kl: np.ndarray = field(init=False, repr=False, compare=False)
    Kp: np.ndarray = field(init=False, repr=False, compare=False)
    Klnp: np.ndarray = field(init=False, repr=False, compare=False)
    I: np.ndarray = field(init=False, repr=False, compare=False)
    I1: np.ndarray = field(init=False, repr=False, compare=False)
    I2: np.ndarray = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        K = np.arange(self.ns)
        Kl = np.setdiff1d(K, GUTTER)
        sets = {
            "K": K,
            "Kg": GUTTER.copy(),
            "Kl": Kl,
            "Kp": PILOT_SUBCARRIERS.copy(),
            "Klnp": np.setdiff1d(Kl, PILOT_SUBCARRIERS),
            "I": np.arange(self.nsf),
            "I1": np.arange(1, self.nsf),
            "I2": np.arange(2, self.nsf),
        }
        for name, values in sets.items():
            values.setflags(write=False)
            object.__setattr__(self, name, values)

    # ---- Derived timing ----

    @property
    def F(self) -> float:
        """Subcarrier spacing in Hz."""
        return self.fs / self.ns

    @property
    def T(self) -> float:
        """Useful symbol interval in seconds."""
        return self.ns / self.fs

    @property
    def Tg(self) -> float:
        """Cyclic prefix interval in seconds."""
        return self.ng / self.fs

    @property
    def Tsym(self) -> float:
        """Full OFDM symbol interval in seconds."""
        return (self.ns + self.ng) / self.fs

    @property
    def Ts(self) -> float:
        """Sample period in seconds."""
        return 1.0 / self.fs

    @property
    def frame_guard(self) -> float:
        """Silent interval between the end of a frame and the next frame slot."""
        return self.tf - self.nsf * self.Tsym

    @property
    def offsets(self) -> np.ndarray:
        """d[k] for every subcarrier."""
        return OFFSETS

    @property
    def klnp_in_kl(self) -> np.ndarray:
        """Positions of the loaded non-pilot subcarriers within Kl."""
        return np.searchsorted(self.Kl, self.Klnp)

    @property
    def kp_in_kl(self) -> np.ndarray:
        """Positions of the pilot subcarriers within Kl."""
        return np.searchsorted(self.Kl, self.Kp)


def build_frame_grid(channel_center_hz: float) -> FrameGrid:
    """Build the frame grid for a channel centre frequency.

    Raises:
        ValueError: If the centre frequency is outside the Ku downlink band.
    """
    if not BAND_HZ[0] <= channel_center_hz <= BAND_HZ[1]:
        raise ValueError(
            f"Centre frequency {channel_center_hz:.6g} Hz outside "
            f"{BAND_HZ[0]:.4g}-{BAND_HZ[1]:.4g} Hz."
        )
    return FrameGrid(fc=float(channel_center_hz))


def load_channel_table(path: str = DEFAULT_CHANNEL_TABLE) -> Dict[int, float]:
    """Read a ``channel=centre_hz`` table.

    Blank lines and ``#`` comments are ignored.

    Raises:
        FormatError: On a malformed line or an out-of-band frequency.
    """
    table: Dict[int, float] = {}
    with open(path, "r", encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            try:
                if not sep:
                    raise ValueError("missing '='")
                channel = int(key.strip())
                centre = float(value.strip())
                build_frame_grid(centre)
            except ValueError as exc:
                raise FormatError(str(exc), path=path, line=lineno) from exc
            table[channel] = centre
    logger.debug("Loaded %d channels from %s", len(table), path)
    return table


def channel_center(index: int, path: str = DEFAULT_CHANNEL_TABLE) -> float:
    """Return the centre frequency of a channel from the table."""
    table = load_channel_table(path)
    if index not in table:
        raise ValueError(f"Channel {index} not in {path}.")
    return table[index]


# ---- Constellations ----


def _square_16qam() -> np.ndarray:
    levels = np.array([-3, -1, 1, 3])
    points = (levels[:, None] + 1j * levels[None, :]).ravel()
    return points / np.sqrt(10.0)


def _cross_32qam() -> np.ndarray:
    levels = np.array([-5, -3, -1, 1, 3, 5])
    grid = (levels[:, None] + 1j * levels[None, :]).ravel()
    corners = (np.abs(grid.real) == 5) & (np.abs(grid.imag) == 5)
    return grid[~corners] / np.sqrt(20.0)


_QPSK = np.array([1, 1j, -1, -1j], dtype=complex)

_POINTS = {
    "QPSK": _QPSK,
    "4QAM": _QPSK * np.exp(1j * np.pi / 4),
    "16QAM": _square_16qam(),
    "32QAM": _cross_32qam(),
}


@dataclass(frozen=True)
class Constellation:
    """A normalised, zero-mean modulation point set."""

    label: str
    points: np.ndarray = field(repr=False, compare=False)

    @property
    def cardinality(self) -> int:
        """Number of points."""
        return len(self.points)

    @property
    def min_distance(self) -> float:
        """Smallest distance between two distinct points."""
        diff = np.abs(self.points[:, None] - self.points[None, :])
        return float(diff[diff > 0].min())

    def decide(self, values: np.ndarray) -> np.ndarray:
        """Return the index of the nearest point for every value.

        NaN inputs map to -1.
        """
        values = np.asarray(values)
        dist = np.abs(values[..., None] - self.points)
        idx = np.argmin(np.nan_to_num(dist, nan=np.inf), axis=-1)
        return np.where(np.isnan(values), -1, idx)

    def nearest(self, values: np.ndarray) -> np.ndarray:
        """Map every value to its nearest point, keeping NaN as NaN."""
        values = np.asarray(values)
        idx = self.decide(values)
        out = self.points[np.clip(idx, 0, None)].astype(complex)
        out[idx < 0] = np.nan
        return out


def constellation(label: str) -> Constellation:
    """Return the constellation for ``label`` (QPSK, 4QAM, 16QAM or 32QAM).

    Raises:
        ValueError: If the label is unknown.
    """
    if label not in _POINTS:
        raise ValueError(
            f"Unknown constellation '{label}'. Choose one of {sorted(_POINTS)}."
        )
    points = _POINTS[label].copy()
    points.setflags(write=False)
    return Constellation(label=label, points=points)


CONSTELLATION_LABELS = tuple(_POINTS)
