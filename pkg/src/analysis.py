"""Analysis module.

Processing-gain arithmetic, T-code bit-error statistics, invariant-symbol
averaging for pilot discovery, and single-frame TOA precision bounds (CRB and
Ziv-Zakai) for replicas built from the known parts of a frame.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from typing import Dict, Iterable, List, Optional, Sequence, Tuple

import numpy as np
from scipy import integrate, special

from frame_model import FS, NS, NSF, OFFSETS, SLOT_SAMPLES, build_frame_grid, constellation
from template_tcode import FIRST_ROW, N_T, pairwise_correlation

logger = logging.getLogger(__name__)

_GRID = build_frame_grid(11.325e9)
KL = _GRID.Kl
KP = _GRID.Kp
KLNP = _GRID.Klnp
F_SUB = FS / NS
T_USEFUL = NS / FS
TSYM = SLOT_SAMPLES / FS

SYNC_SAMPLES = 2 * SLOT_SAMPLES
PILOT_SYMBOLS = len(KP) * (NSF - FIRST_ROW)
LEE_TCODE_SYMBOLS = 69500 - SYNC_SAMPLES - PILOT_SYMBOLS
REPLICA_KINDS = ("pss-sss", "pss-sss-ep", "lee", "full")
MIN_FRAMES = 10


def _db(x):
    return 10 * np.log10(x)


# ---- Processing gain ----


@dataclass(frozen=True)
class GainParams:
    """Correlation parameters of one accumulation.

    Attributes:
        N (float): Accumulation length.
        mu (float): |E[l* x]|.
        alpha (float): E[|x|^2 |l|^2].
        rho (float): E[|l|^2].
    """

    N: float
    mu: float
    alpha: float = 1.0
    rho: float = 1.0

    def __post_init__(self):
        if self.N < 1:
            raise ValueError(f"Accumulation length must be at least 1, got {self.N}.")
        if not 0 <= abs(self.mu) <= 1:
            raise ValueError(f"|mu| must lie in [0, 1], got {self.mu}.")

    @property
    def gain(self) -> float:
        return 1 + (self.N - 1) * abs(self.mu) ** 2

    @property
    def gain_db(self) -> float:
        return float(_db(self.gain))


def processing_gain(N: float, mu: float) -> Tuple[float, float]:
    """L = 1 + (N - 1)|mu|^2 for constant-modulus symbols and replica.

    Returns:
        tuple: (L linear, L in dB).

    Raises:
        ValueError: If |mu| > 1 or N < 1.
    """
    params = GainParams(N, mu)
    return params.gain, params.gain_db


def empirical_gain(
    N: int,
    mu: float = 1.0,
    trials: int = 10000,
    snr_db: float = 0.0,
    label: str = "QPSK",
    policy: Optional[str] = None,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """Monte-Carlo ratio of post- to pre-correlation SNR.

    The replica is the transmitted symbol sequence (``"known"``), an
    independent draw from the same constellation (``"random"``) or the
    transmitted sequence with each element sign-flipped with probability
    (1 - mu) / 2 (``"flips"``). Without a policy it follows from ``mu``.

    Returns:
        float: Measured L, linear.
    """
    if policy is None:
        policy = "known" if mu == 1 else "random" if mu == 0 else "flips"
    if policy not in ("known", "random", "flips"):
        raise ValueError(f"Unknown replica policy {policy!r}.")
    rng = rng or np.random.default_rng(0)
    points = constellation(label).points
    power = float(np.mean(np.abs(points) ** 2))
    noise_var = power / 10 ** (snr_db / 10)
    chunk = max(1, min(trials, 2_000_000 // max(N, 1)))
    signal_energy = 0.0
    noise_energy = 0.0
    done = 0
    while done < trials:
        n = min(chunk, trials - done)
        x = points[rng.integers(0, len(points), (n, N))]
        if policy == "known":
            replica = x
        elif policy == "random":
            replica = points[rng.integers(0, len(points), (n, N))]
        else:
            flips = rng.random((n, N)) < (1 - abs(mu)) / 2
            replica = np.where(flips, -x, x)
        noise = np.sqrt(noise_var / 2) * (rng.standard_normal((n, N)) + 1j * rng.standard_normal((n, N)))
        signal_energy += float(np.sum(np.abs(np.sum(x * np.conj(replica), axis=1)) ** 2))
        noise_energy += float(np.sum(np.abs(np.sum(noise * np.conj(replica), axis=1)) ** 2))
        done += n
    snr_post = signal_energy / noise_energy
    gain = snr_post * noise_var / power
    logger.debug("Empirical gain N=%d policy=%s: %.2f dB", N, policy, _db(gain))
    return gain


def tcode_error_rate(M_bar: float, snr_pre: float) -> Tuple[float, float]:
    """BPSK bit-error probability of a stacked T-code bit and the resulting |mu|.

    Args:
        M_bar (float): Stacking factor, cells voting per code bit.
        snr_pre (float): Pre-correlation SNR, linear.
    """
    if M_bar < 1:
        raise ValueError(f"Stacking factor must be at least 1, got {M_bar}.")
    if snr_pre <= 0:
        raise ValueError(f"SNR must be positive, got {snr_pre}.")
    p_e = 0.5 * float(special.erfc(math.sqrt(M_bar * snr_pre)))
    return p_e, abs(1 - 2 * p_e)


def weighted_tcode_error_rate(
    stacking: Sequence[float],
    snr_pre: float,
    known: float = SYNC_SAMPLES + PILOT_SYMBOLS,
) -> Tuple[float, float]:
    """|mu| averaged over every exploitable symbol of a corpus.

    Frame m contributes ``known`` exact symbols and M_m * N_T T-code symbols
    at |1 - 2 p_e(M_m)|, so frames with more T-code columns weigh more and
    frames without T-codes (M_m = 0) count with |mu| = 1.

    Args:
        stacking (sequence): Stacking factor M_m of each frame.
        snr_pre (float): Pre-correlation SNR, linear.
        known (float): Fully known symbols per frame.

    Returns:
        tuple: (mu_bar, M_bar).

    Raises:
        ValueError: On an empty corpus or a non-zero stacking factor below one.
    """
    stacking = [float(M) for M in stacking]
    if not stacking:
        raise ValueError("Cannot average |mu| over an empty corpus.")
    total = 0.0
    weighted = 0.0
    for M in stacking:
        total += known + M * N_T
        weighted += known
        if M > 0:
            weighted += M * N_T * tcode_error_rate(M, snr_pre)[1]
    return weighted / total, float(np.mean(stacking))


@dataclass(frozen=True)
class FrameStats:
    """Known-symbol counts of one frame."""

    tcode_columns: int = 0
    pilot_symbols: int = PILOT_SYMBOLS
    sync_samples: int = SYNC_SAMPLES

    @property
    def tcode_symbols(self) -> int:
        return self.tcode_columns * len(KLNP)

    @property
    def stacking_factor(self) -> float:
        return self.tcode_columns * len(KLNP) / N_T

    @property
    def known(self) -> int:
        return self.sync_samples + self.pilot_symbols + self.tcode_symbols

    @classmethod
    def from_boundary(cls, D, i_hm: Optional[int]) -> "FrameStats":
        """Counts for a frame whose deviation matrix ``D`` has boundary ``i_hm``."""
        if i_hm is None:
            return cls(0)
        return cls(int(np.count_nonzero(D.columns > i_hm)))


@dataclass(frozen=True)
class GainEstimate:
    """Frame-averaged processing gain with its per-class breakdown."""

    N_bar: float
    M_bar: float
    mu_bar: float
    mu_tcode: float
    gain: float
    gain_db: float
    breakdown: Dict[str, float] = field(default_factory=dict)


def frame_gain_estimate(stats: Sequence[FrameStats], snr_pre_db: Optional[float] = None) -> GainEstimate:
    """Average processing gain over a corpus of frames.

    PSS and SSS count with their cyclic prefixes, pilots and T-code symbols
    without. Header and data symbols are treated as unknown. T-code symbols
    enter with |mu| = |1 - 2 p_e| at the corpus-mean stacking factor; without
    an SNR they are taken as exact.

    Raises:
        ValueError: If ``stats`` is empty.
    """
    stats = list(stats)
    if not stats:
        raise ValueError("Cannot estimate processing gain from an empty corpus.")
    sync = float(np.mean([s.sync_samples for s in stats]))
    pilots = float(np.mean([s.pilot_symbols for s in stats]))
    tcode = float(np.mean([s.tcode_symbols for s in stats]))
    M_bar = float(np.mean([s.stacking_factor for s in stats]))
    mu_tcode = 1.0
    if snr_pre_db is not None and M_bar > 0:
        _, mu_tcode = tcode_error_rate(max(M_bar, 1.0), 10 ** (snr_pre_db / 10))
    N_bar = sync + pilots + tcode
    mu_bar = (sync + pilots + tcode * mu_tcode) / N_bar
    gain, gain_db = processing_gain(N_bar, mu_bar)
    logger.info("N_bar %.0f, M_bar %.1f, mu_bar %.4f, L_bar %.2f dB", N_bar, M_bar, mu_bar, gain_db)
    return GainEstimate(
        N_bar,
        M_bar,
        mu_bar,
        mu_tcode,
        gain,
        gain_db,
        {"sync_samples": sync, "pilot_symbols": pilots, "tcode_symbols": tcode},
    )


# ---- Invariant-symbol averaging ----


@dataclass
class AveragingResult:
    """Per-cell means over a corpus of phase-aligned frames.

    ``averages`` and ``flags`` are (|I2|, |Kl|), indexed by ``symbols`` and
    ``subcarriers``. ``threshold`` applies to |average|.
    """

    averages: np.ndarray
    flags: np.ndarray
    symbols: np.ndarray
    subcarriers: np.ndarray
    frame_count: int
    threshold: float
    noise_floor: float

    @property
    def low_confidence(self) -> bool:
        return self.frame_count < MIN_FRAMES

    def flagged_cells(self) -> List[Tuple[int, int]]:
        """(i, k) of every flagged cell."""
        rows, cols = np.nonzero(self.flags)
        return [(int(self.symbols[r]), int(self.subcarriers[c])) for r, c in zip(rows, cols)]

    def flagged_subcarriers(self, min_fraction: float = 0.5) -> np.ndarray:
        """Subcarriers flagged in at least ``min_fraction`` of the symbols."""
        share = self.flags.mean(axis=0)
        return self.subcarriers[share >= min_fraction]


def invariant_symbol_average(
    frames: Iterable,
    threshold: Optional[float] = None,
    sigmas: float = 6.0,
) -> AveragingResult:
    """Average every (i, k) cell, i in I2 and k in Kl, over the corpus.

    Frames are anything with a phase-aligned ``Y`` (302, 1024) matrix, or the
    matrices themselves; NaN cells are skipped. The noise floor is estimated
    from the median cell power, and without an explicit ``threshold`` cells
    whose |average| exceeds ``sigmas`` per-component standard deviations are
    flagged.

    Raises:
        ValueError: If the corpus is empty.
    """
    total = np.zeros((NSF - FIRST_ROW, len(KL)), dtype=complex)
    counts = np.zeros(total.shape, dtype=int)
    frame_count = 0
    for frame in frames:
        Y = np.asarray(getattr(frame, "Y", frame))
        if Y is None or Y.shape != (NSF, NS):
            raise ValueError(f"Expected a ({NSF}, {NS}) symbol matrix.")
        cells = Y[FIRST_ROW:][:, KL]
        valid = np.isfinite(cells)
        total += np.where(valid, cells, 0)
        counts += valid
        frame_count += 1
    if frame_count == 0:
        raise ValueError("Cannot average an empty corpus.")
    if frame_count < MIN_FRAMES:
        logger.warning("Only %d frames averaged; results are low-confidence", frame_count)
    with np.errstate(invalid="ignore", divide="ignore"):
        averages = np.where(counts > 0, total / np.maximum(counts, 1), np.nan)
    magnitude = np.abs(averages)
    power = float(np.nanmedian(magnitude**2) / np.log(2))
    noise_floor = math.sqrt(power / 2)
    if threshold is None:
        threshold = sigmas * noise_floor
    flags = np.nan_to_num(magnitude, nan=0.0) > threshold
    logger.info(
        "Averaged %d frames: noise floor %.4f, threshold %.4f, %d cells flagged",
        frame_count, noise_floor, threshold, int(flags.sum()),
    )
    return AveragingResult(
        averages,
        flags,
        np.arange(FIRST_ROW, NSF),
        np.asarray(KL),
        frame_count,
        float(threshold),
        noise_floor,
    )


# ---- Corpus statistics ----


def qpsk_ratio_matrix(frames: Sequence) -> Tuple[np.ndarray, np.ndarray]:
    """Pairwise |R_mn| and shared QPSK ratios rho_mn for a decoded corpus."""
    n = len(frames)
    R = np.zeros((n, n))
    rho = np.zeros((n, n))
    for a in range(n):
        for b in range(a, n):
            value, ratio = pairwise_correlation(frames[a], frames[b])
            R[a, b] = R[b, a] = abs(value)
            rho[a, b] = rho[b, a] = ratio
    return R, rho


class HeaderHistogram:
    """Text histogram of header boundaries across a corpus."""

    def __init__(self, scale=1):
        """
        Args:
            scale (int): Frames per ``*``.
        """
        if scale < 1:
            raise ValueError(f"Scale must be at least 1, got {scale}.")
        self.scale = scale

    def generate(self, boundaries: Iterable[Optional[int]]) -> List[str]:
        """One line per header length, in ascending order.

        Frames without a T-code region are counted on a ``none`` line.
        """
        boundaries = list(boundaries)
        lengths = [b - FIRST_ROW + 1 for b in boundaries if b is not None]
        missing = len(boundaries) - len(lengths)
        lines = []
        values, counts = np.unique(lengths, return_counts=True) if lengths else ([], [])
        for value, count in zip(values, counts):
            bar = "*" * int(count / self.scale)
            lines.append(f"{int(value):^6} | {int(count):^6} | {bar}")
        if missing:
            lines.append(f"{'none':^6} | {missing:^6} | {'*' * int(missing / self.scale)}")
        return lines

    def key(self) -> List[str]:
        """Legend for :meth:`generate`."""
        return [
            "------------ KEY ------------",
            "header | frames | bar",
            f"Note: bar length scaled by {self.scale} frames per *",
        ]


def header_histogram(boundaries: Iterable[Optional[int]], scale: int = 1) -> List[str]:
    """Histogram lines followed by the key."""
    histogram = HeaderHistogram(scale)
    return histogram.generate(boundaries) + histogram.key()


# ---- TOA bounds ----


@dataclass(frozen=True)
class ReplicaSpectrum:
    """Line spectrum of the known part of a frame within a capture band.

    Attributes:
        label (str): Replica kind.
        freqs (np.ndarray): Subcarrier frequencies relative to the channel centre, Hz.
        energy (np.ndarray): Known energy per line, in symbol units.
        bandwidth_hz (float): Capture bandwidth.
        center_hz (float): Capture centre relative to the channel centre.
        span (float): Interval over which one symbol's content stays coherent, s.
    """

    label: str
    freqs: np.ndarray
    energy: np.ndarray
    bandwidth_hz: float
    center_hz: float = 0.0
    span: float = T_USEFUL

    @property
    def total_energy(self) -> float:
        return float(np.sum(self.energy))

    @property
    def weights(self) -> np.ndarray:
        """Per-line energy relative to the strongest line."""
        return self.energy / np.max(self.energy)

    @property
    def centroid(self) -> float:
        return float(np.sum(self.energy * self.freqs) / self.total_energy)

    @property
    def ms_bandwidth(self) -> float:
        """Mean-square bandwidth about the spectral centroid, Hz^2."""
        return float(np.sum(self.energy * (self.freqs - self.centroid) ** 2) / self.total_energy)

    @property
    def effective_ms_bandwidth(self) -> float:
        """Mean-square bandwidth including the curvature of the coherence taper."""
        return self.ms_bandwidth + 2 / (2 * np.pi * self.span) ** 2

    def autocorrelation(self, lags: np.ndarray) -> np.ndarray:
        """|rho(h)|, normalized to one at zero lag."""
        lags = np.asarray(lags, dtype=float)
        out = np.empty(lags.shape)
        flat = lags.ravel()
        result = out.ravel()
        weights = self.energy / self.total_energy
        for start in range(0, flat.size, 2048):
            h = flat[start : start + 2048]
            phases = np.exp(2j * np.pi * np.outer(h, self.freqs - self.centroid))
            result[start : start + 2048] = np.abs(phases @ weights)
        taper = np.clip(1 - (lags / self.span) ** 2, 0.0, None)
        return result.reshape(lags.shape) * taper


def _pilot_window_center(bandwidth_hz: float) -> float:
    upper = OFFSETS[KP].max() * F_SUB
    return float(upper + F_SUB / 2 - bandwidth_hz / 2)


def build_replica_spectrum(
    kind: str,
    bandwidth_hz: float = FS,
    center_hz: Optional[float] = None,
    tcode_symbols: float = LEE_TCODE_SYMBOLS,
    mu_tcode: float = 1.0,
) -> ReplicaSpectrum:
    """Known-energy line spectrum of a replica kind.

    ``pss-sss`` holds the two synchronization symbols with their cyclic
    prefixes, ``pss-sss-ep`` adds the edge pilots, ``lee`` adds T-code symbols
    spread over Klnp with weight mu_tcode^2, and ``full`` is every slot of
    the frame. Narrow captures of replicas with pilots are tuned so the upper
    pilot group sits at the band edge unless ``center_hz`` is given.

    Raises:
        ValueError: On an unknown kind, a bandwidth outside (0, Fs] or an
            empty band.
    """
    if kind not in REPLICA_KINDS:
        raise ValueError(f"Unknown replica {kind!r}; expected one of {REPLICA_KINDS}.")
    if not 0 < bandwidth_hz <= FS:
        raise ValueError(f"Capture bandwidth must lie in (0, {FS:g}] Hz, got {bandwidth_hz}.")
    if center_hz is None:
        narrow_with_pilots = kind in ("pss-sss-ep", "lee") and bandwidth_hz < FS
        center_hz = _pilot_window_center(bandwidth_hz) if narrow_with_pilots else 0.0
    cp = SLOT_SAMPLES / NS
    energy = np.zeros(NS)
    if kind == "full":
        energy[KL] = NSF * cp
    else:
        energy[KL] = 2 * cp
        if kind in ("pss-sss-ep", "lee"):
            energy[KP] += NSF - FIRST_ROW
        if kind == "lee":
            energy[KLNP] += tcode_symbols / len(KLNP) * mu_tcode**2
    freqs = OFFSETS * F_SUB
    inside = (np.abs(freqs - center_hz) <= bandwidth_hz / 2 + 1e-6) & (energy > 0)
    if not inside.any():
        raise ValueError(f"No known subcarriers within {bandwidth_hz:g} Hz of {center_hz:g} Hz.")
    order = np.argsort(freqs[inside])
    return ReplicaSpectrum(
        kind, freqs[inside][order], energy[inside][order], float(bandwidth_hz), float(center_hz)
    )


def _q(x):
    return 0.5 * special.erfc(np.asarray(x) / np.sqrt(2))


def crb_toa(spectrum: ReplicaSpectrum, snr_pre_db) -> np.ndarray:
    """Known-signal CRB on TOA RMSE, seconds.

    var >= 1 / (2 (2 pi)^2 B^2 SNR_post) with SNR_post = E / N0, the replica
    energy times the pre-correlation SNR.

    Raises:
        ValueError: If the spectrum has no bandwidth.
    """
    b2 = spectrum.effective_ms_bandwidth
    if b2 <= 0:
        raise ValueError("Replica spectrum has zero mean-square bandwidth.")
    snr_post = spectrum.total_energy * 10 ** (np.asarray(snr_pre_db, dtype=float) / 10)
    return np.sqrt(1 / (2 * (2 * np.pi) ** 2 * b2 * snr_post))


def _lag_grid(prior: float) -> np.ndarray:
    ts = 1 / FS
    near = np.geomspace(1e-5 * ts, ts, 2000)
    far = np.arange(ts, prior, ts / 8)
    return np.concatenate([[0.0], near, far[1:], [prior]])


def zzb_toa(spectrum: ReplicaSpectrum, snr_pre_db, prior: float = 2 * TSYM) -> np.ndarray:
    """Ziv-Zakai bound on TOA RMSE for a delay uniform over ``prior`` seconds.

    The binary-detection error between delays h apart is
    Q(sqrt(SNR_post (1 - |rho(h)|))); the bound integrates h times the
    valley-filled (prior - h) Pmin(h).
    """
    if prior <= 0:
        raise ValueError(f"Prior window must be positive, got {prior}.")
    lags = _lag_grid(prior)
    distance = np.clip(1 - spectrum.autocorrelation(lags), 0.0, None)
    snr = np.atleast_1d(np.asarray(snr_pre_db, dtype=float))
    out = np.empty(snr.shape)
    for n, value in enumerate(snr):
        snr_post = spectrum.total_energy * 10 ** (value / 10)
        p_min = _q(np.sqrt(snr_post * distance))
        filled = np.maximum.accumulate(((prior - lags) * p_min)[::-1])[::-1]
        out[n] = integrate.trapezoid(lags * filled, lags) / prior
    rmse = np.sqrt(out)
    return rmse if np.ndim(snr_pre_db) else rmse[0]


@dataclass
class BoundCurves:
    """CRB and ZZB over an SNR grid for one replica."""

    label: str
    snr_db: np.ndarray
    crb: np.ndarray
    zzb: np.ndarray

    @property
    def ratio(self) -> np.ndarray:
        return self.zzb / self.crb


def bound_curves(
    spectrum: ReplicaSpectrum,
    snr_db: Optional[np.ndarray] = None,
    prior: float = 2 * TSYM,
    label: Optional[str] = None,
) -> BoundCurves:
    """Both bounds on an SNR grid, -30..10 dB in 0.5 dB steps by default."""
    if snr_db is None:
        snr_db = np.arange(-30.0, 10.0 + 1e-9, 0.5)
    snr_db = np.asarray(snr_db, dtype=float)
    if label is None:
        label = f"{spectrum.label}@{spectrum.bandwidth_hz / 1e6:g}MHz"
    return BoundCurves(label, snr_db, crb_toa(spectrum, snr_db), zzb_toa(spectrum, snr_db, prior))


def zzb_knee(curves: BoundCurves, ratio: float = 1.05) -> Optional[float]:
    """Highest SNR at which the ZZB exceeds the CRB by ``ratio``, or None."""
    above = np.flatnonzero(curves.ratio > ratio)
    if above.size == 0:
        return None
    return float(curves.snr_db[above[-1]])


def write_bounds_csv(path: str, curves: Sequence[BoundCurves]) -> None:
    """Write rows of (snr_db, crb_rmse_s, zzb_rmse_s, replica)."""
    with open(path, "w", encoding="utf-8", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["snr_db", "crb_rmse_s", "zzb_rmse_s", "replica"])
        for curve in curves:
            for snr, crb, zzb in zip(curve.snr_db, curve.crb, curve.zzb):
                writer.writerow([f"{snr:.2f}", f"{crb:.6e}", f"{zzb:.6e}", curve.label])
    logger.info("Wrote %d bound curves to %s", len(curves), path)
