"""Acquisition module.

Detects frames by matched filtering the capture stream against a
Doppler-adjusted PSS+SSS replica, then extracts and coarsely compensates the
detected frame. Doppler hypotheses are expressed as beta = f / Fc.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy import signal

from frame_model import FRAME_PERIOD_SAMPLES, FRAME_SAMPLES, FS, NS, NSF, SLOT_SAMPLES
from waveform_synth import (
    MAX_DOPPLER,
    CaptureStream,
    default_pss,
    default_sss,
    extract_slots,
    render_slots,
    slot_coefficients,
    slot_delays,
)

logger = logging.getLogger(__name__)

_HALF_GUARD = (SLOT_SAMPLES - NS) // 2


@dataclass(frozen=True)
class AcquisitionSettings:
    """Search grid and detection policy. Frequencies in Hz, f = beta * Fc."""

    doppler_min_hz: float = -283e3
    doppler_max_hz: float = 283e3
    doppler_step_hz: float = 2e3
    pfa: float = 1e-6

    def __post_init__(self):
        if self.doppler_step_hz <= 0:
            raise ValueError(f"Doppler step must be positive, got {self.doppler_step_hz}.")
        if self.doppler_min_hz > self.doppler_max_hz:
            raise ValueError("Doppler minimum exceeds maximum.")
        if not 0 < self.pfa < 1:
            raise ValueError(f"P_fa must lie in (0, 1), got {self.pfa}.")


@dataclass(frozen=True)
class AcquisitionResult:
    """Outcome of one detection search."""

    n_hat: int
    beta_hat: float
    peak: float
    threshold: float
    accepted: bool
    snr_pre_est: float


def replica_length(beta: float) -> int:
    """M(beta) = ceil(2 Tsym / ((1 - beta) Ts))."""
    return math.ceil(round(2 * SLOT_SAMPLES / (1.0 - beta), 9))


def doppler_grid(
    step_hz: float = 2e3,
    min_hz: float = -283e3,
    max_hz: float = 283e3,
    fc: float = 11.325e9,
) -> np.ndarray:
    """Doppler hypotheses on a grid that always contains zero, clipped to 25 ppm."""
    lo = math.ceil(min_hz / step_hz)
    hi = math.floor(max_hz / step_hz)
    betas = np.arange(lo, hi + 1) * step_hz / fc
    return betas[np.abs(betas) <= MAX_DOPPLER + 1e-15]


def build_replica(
    pss: np.ndarray, sss: np.ndarray, beta: float, fc: float = 11.325e9
) -> np.ndarray:
    """Time-scaled and rotated PSS+SSS replica of length M(beta).

    Raises:
        ValueError: If |beta| exceeds 25 ppm or a sequence is not one slot long.
    """
    if abs(beta) > MAX_DOPPLER:
        raise ValueError(f"Doppler hypothesis {beta} exceeds {MAX_DOPPLER}.")
    pss = np.asarray(pss, dtype=complex)
    sss = np.asarray(sss, dtype=complex)
    if pss.shape != (SLOT_SAMPLES,) or sss.shape != (SLOT_SAMPLES,):
        raise ValueError(f"PSS and SSS must each have {SLOT_SAMPLES} samples.")
    if beta == 0:
        return np.concatenate([pss, sss])
    slots = np.stack([pss, sss])
    coeffs = slot_coefficients(slots[:, _HALF_GUARD : _HALF_GUARD + NS])
    length = replica_length(beta)
    scaled = render_slots(coeffs, slot_delays(0.0, beta, 2), length, shaped=False, beta_s=beta)
    n = np.arange(length)
    return scaled * np.exp(-2j * np.pi * beta * fc * n / FS)


def ambiguity_surface(
    samples: np.ndarray,
    replicas: Sequence[np.ndarray],
    lags: Optional[Tuple[int, int]] = None,
) -> np.ndarray:
    """R[k, beta] = sum_n y[n + k] conj(replica_beta[n]), one row per replica.

    Args:
        samples (np.ndarray): Stream samples.
        replicas: One replica per Doppler hypothesis.
        lags (tuple, optional): Half-open lag range; the whole stream if omitted.

    Raises:
        ValueError: If the stream is too short for the lag range.
    """
    longest = max(len(r) for r in replicas)
    lo, hi = lags if lags is not None else (0, len(samples) - longest + 1)
    if lo < 0 or hi <= lo or hi - 1 + longest > len(samples):
        raise ValueError(
            f"Stream of {len(samples)} samples cannot cover lags {lo}..{hi - 1} "
            f"with a {longest}-sample replica."
        )
    segment = samples[lo : hi - 1 + longest]
    surface = np.empty((len(replicas), hi - lo), dtype=complex)
    for row, replica in enumerate(replicas):
        full = signal.correlate(segment, replica, mode="valid", method="fft")
        surface[row] = full[: hi - lo]
    return surface


def cfar_threshold(magnitude: np.ndarray, pfa: float) -> float:
    """Grid-wide constant-false-alarm threshold on |R|.

    The noise power of |R|^2 comes from its median (exponential statistics),
    and the per-cell false-alarm rate is ``pfa`` spread over the whole grid.
    """
    power = np.median(np.abs(magnitude) ** 2) / np.log(2)
    cells = np.asarray(magnitude).size
    return float(np.sqrt(power * np.log(cells / pfa)))


class Acquirer:
    """Matched-filter frame detector for one carrier frequency.

    Replicas for every Doppler hypothesis are built once and reused.
    """

    def __init__(
        self,
        settings: AcquisitionSettings = AcquisitionSettings(),
        fc: float = 11.325e9,
        pss: Optional[np.ndarray] = None,
        sss: Optional[np.ndarray] = None,
        betas: Optional[np.ndarray] = None,
    ):
        self.settings = settings
        self.fc = fc
        self.pss = default_pss() if pss is None else np.asarray(pss, dtype=complex)
        self.sss = default_sss() if sss is None else np.asarray(sss, dtype=complex)
        if betas is None:
            betas = doppler_grid(
                settings.doppler_step_hz, settings.doppler_min_hz, settings.doppler_max_hz, fc
            )
        self.betas = np.asarray(betas, dtype=float)
        if self.betas.size == 0:
            raise ValueError("Doppler grid is empty.")
        self.replicas = [build_replica(self.pss, self.sss, b, fc) for b in self.betas]
        self.energies = np.array([np.sum(np.abs(r) ** 2) for r in self.replicas])
        logger.debug("Acquirer with %d Doppler bins", len(self.betas))

    def detect(self, samples: np.ndarray, lags: Optional[Tuple[int, int]] = None) -> AcquisitionResult:
        """Search the ambiguity surface for the strongest peak."""
        surface = np.abs(ambiguity_surface(samples, self.replicas, lags))
        row, col = np.unravel_index(np.argmax(surface), surface.shape)
        peak = float(surface[row, col])
        threshold = cfar_threshold(surface, self.settings.pfa)
        noise = np.median(surface**2) / np.log(2)
        length = len(self.replicas[row])
        if noise > 0:
            snr_pre = 10 * np.log10(max(peak**2 / noise - 1.0, 1e-12) / length)
        else:
            snr_pre = np.inf
        lag = int(col) + (lags[0] if lags is not None else 0)
        accepted = peak > threshold
        logger.info(
            "Peak %.4g at lag %d, beta %.3e (threshold %.4g, %s)",
            peak, lag, self.betas[row], threshold, "accepted" if accepted else "rejected",
        )
        return AcquisitionResult(lag, float(self.betas[row]), peak, threshold, accepted, float(snr_pre))

    def extract(self, samples: np.ndarray, result: AcquisitionResult, first_sample: int = 0) -> np.ndarray:
        """Pull out a detected frame and remove the coarse Doppler and rotation."""
        coeffs = extract_slots(
            samples, result.n_hat, result.beta_hat, self.fc, NSF, first_sample
        )
        return render_slots(coeffs, np.zeros(NSF), FRAME_SAMPLES)

    def acquire(self, stream, lags: Optional[Tuple[int, int]] = None) -> Tuple[AcquisitionResult, Optional[np.ndarray]]:
        """Detect one frame and, when accepted, return its compensated samples."""
        samples = stream.samples if isinstance(stream, CaptureStream) else np.asarray(stream)
        result = self.detect(samples, lags)
        if not result.accepted:
            return result, None
        try:
            frame = self.extract(samples, result)
        except ValueError as exc:
            logger.warning("Frame at lag %d is truncated: %s", result.n_hat, exc)
            return AcquisitionResult(
                result.n_hat, result.beta_hat, result.peak, result.threshold, False, result.snr_pre_est
            ), None
        return result, frame

    def acquire_stream(self, stream) -> List[Tuple[AcquisitionResult, np.ndarray]]:
        """Scan the stream one frame interval at a time and collect every frame.

        A peak in the last replica length of a window may be a partial overlap
        with a frame starting just after it, so the window is then widened by
        one replica length. The next search starts where the found frame ends.
        """
        samples = stream.samples if isinstance(stream, CaptureStream) else np.asarray(stream)
        longest = max(len(r) for r in self.replicas)
        last = len(samples) - longest + 1
        found = []
        start = 0
        while start < last:
            stop = min(start + FRAME_PERIOD_SAMPLES, last)
            result = self.detect(samples, (start, stop))
            if result.accepted and result.n_hat >= stop - longest and stop < last:
                result = self.detect(samples, (start, min(stop + longest, last)))
            if not result.accepted:
                start = stop
                continue
            try:
                frame = self.extract(samples, result)
            except ValueError as exc:
                logger.warning("Frame at lag %d is truncated: %s", result.n_hat, exc)
                start = stop
                continue
            found.append((result, frame))
            start = result.n_hat + FRAME_SAMPLES
        logger.info("Acquired %d frames", len(found))
        return found


def acquire(
    stream,
    settings: AcquisitionSettings = AcquisitionSettings(),
    fc: Optional[float] = None,
    pss: Optional[np.ndarray] = None,
    sss: Optional[np.ndarray] = None,
    betas: Optional[np.ndarray] = None,
) -> Tuple[AcquisitionResult, Optional[np.ndarray]]:
    """One-shot acquisition of the strongest frame in ``stream``."""
    if fc is None:
        fc = stream.center_frequency if isinstance(stream, CaptureStream) else 11.325e9
    return Acquirer(settings, fc, pss, sss, betas).acquire(stream)
