"""Waveform synthesis module.

Builds baseband frames from information-symbol matrices, applies the clock,
Doppler, delay, channel and noise impairments of the received-signal model,
assembles continuous capture streams, and reads/writes IQ files.

Fractional delays and time scaling are applied slot by slot: each 1056-sample
slot is described by the DFT of its unattenuated 1024-sample region and is
re-evaluated at the shifted sample times with the exact trapezoidal support.
Inside a slot the delay keeps growing by beta_s per sample; that sub-sample
drift is applied through a Taylor series of the band-limited slot waveform.
"""

from __future__ import annotations

import dataclasses
import logging
import math
import os
from dataclasses import dataclass
from typing import Dict, Optional, Sequence

import numpy as np

from errors import FormatError
from frame_model import (
    FRAME_PERIOD_SAMPLES,
    FRAME_SAMPLES,
    FS,
    GUTTER,
    NG,
    NS,
    NSF,
    OFFSETS,
    SLOT_SAMPLES,
    constellation,
)

logger = logging.getLogger(__name__)

MAX_DRIFT = 1e-4
MAX_DOPPLER = 25e-6
DEFAULT_FC = 11.325e9
SSS_SEED = 1
PSS_ROOT = 333
DRIFT_ORDER = 3
_HALF_GUARD = NG // 2
_LOADED_POWER = (NS - len(GUTTER)) / NS


@dataclass(frozen=True)
class ClockModel:
    """Affine carrier and sample clock offsets relative to true time."""

    dtc0: float = 0.0
    dtc_dot: float = 0.0
    dts0: float = 0.0
    dts_dot: float = 0.0
    t0: float = 0.0

    def __post_init__(self):
        for name in ("dtc_dot", "dts_dot"):
            if abs(getattr(self, name)) >= MAX_DRIFT:
                raise ValueError(f"{name}={getattr(self, name)} exceeds {MAX_DRIFT}.")

    def clock_time(self, t, which: str = "carrier"):
        """Return the carrier or sample clock reading at true time ``t``."""
        if which == "carrier":
            offset, drift = self.dtc0, self.dtc_dot
        elif which == "sample":
            offset, drift = self.dts0, self.dts_dot
        else:
            raise ValueError(f"Unknown clock '{which}'. Use 'carrier' or 'sample'.")
        return (1.0 + drift) * np.asarray(t) + (offset - drift * self.t0)


def clock_time(t, clock: ClockModel, which: str = "carrier"):
    """Functional form of :meth:`ClockModel.clock_time`."""
    return clock.clock_time(t, which)


@dataclass(frozen=True)
class ChannelParams:
    """Propagation and receiver parameters for one emitter.

    ``H`` is the transfer function over all 1024 subcarriers with ``H[0] == 1``;
    ``None`` means flat. ``theta`` of ``None`` draws a fresh frame phase from the
    random generator. ``snr_pre_db`` of ``None`` disables noise.
    """

    beta: float = 0.0
    tau_los: float = 0.0
    H: Optional[np.ndarray] = dataclasses.field(default=None, repr=False, compare=False)
    g: float = 1.0
    theta: Optional[float] = 0.0
    snr_pre_db: Optional[float] = None
    fc: float = DEFAULT_FC

    def __post_init__(self):
        if abs(self.beta) > MAX_DOPPLER:
            raise ValueError(f"Doppler parameter {self.beta} exceeds {MAX_DOPPLER}.")
        if self.g <= 0:
            raise ValueError(f"Channel gain must be positive, got {self.g}.")
        if self.H is not None:
            H = np.asarray(self.H, dtype=complex)
            if H.shape != (NS,):
                raise ValueError(f"H must have {NS} entries, got shape {H.shape}.")
            if not np.isclose(H[0], 1.0, atol=1e-12):
                raise ValueError("H must be normalised so that H[0] == 1.")
            object.__setattr__(self, "H", H)

    def beta_s(self, clock: ClockModel) -> float:
        """Effective sample-frequency offset factor."""
        return -clock.dts_dot + self.beta

    def beta_c(self, clock: ClockModel) -> float:
        """Effective carrier-frequency offset factor."""
        return -clock.dtc_dot + self.beta

    def delay_samples(self, clock: ClockModel) -> float:
        """Equivalent timing offset n_m in samples."""
        tau = self.tau_los - clock.dts0 / (1.0 + clock.dts_dot - self.beta)
        return tau * FS

    def frame_phase(self, clock: ClockModel) -> float:
        """Equivalent phase offset phi_m in radians, wrapped to [-pi, pi)."""
        phi = 2 * np.pi * self.fc * clock.dtc0 - 2 * np.pi * (
            1.0 + clock.dtc_dot - self.beta
        ) * self.fc * self.tau_los
        return float((phi + np.pi) % (2 * np.pi) - np.pi)


@dataclass
class CaptureStream:
    """Complex baseband samples with their acquisition metadata."""

    samples: np.ndarray
    sample_rate: float = FS
    center_frequency: float = DEFAULT_FC
    epoch: float = 0.0

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=complex)
        if self.samples.size == 0:
            raise ValueError("Capture stream is empty.")
        if not np.all(np.isfinite(self.samples)):
            raise ValueError("Capture stream contains non-finite samples.")

    def __len__(self):
        return len(self.samples)


# ---- Known sequences ----


def default_pss() -> np.ndarray:
    """Constant-amplitude chirp used as the stand-in PSS, CP included."""
    n = np.arange(NS)
    useful = np.sqrt(_LOADED_POWER) * np.exp(-1j * np.pi * PSS_ROOT * n * n / NS)
    return np.concatenate([useful[-NG:], useful])


def default_sss_symbols() -> np.ndarray:
    """Seeded QPSK symbols over the loaded subcarriers, zero in the gutter."""
    rng = np.random.default_rng(SSS_SEED)
    points = constellation("QPSK").points
    X = points[rng.integers(0, 4, NS)]
    X[GUTTER] = 0
    return X


def default_sss() -> np.ndarray:
    """Time-domain SSS slot for :func:`default_sss_symbols`."""
    return ofdm_symbol_time(default_sss_symbols())


# ---- Symbols to samples ----


def support(u, shaped: bool = True) -> np.ndarray:
    """OFDM symbol support at slot-relative sample times ``u``.

    The shaped support ramps over the first and last Ng/2 samples; the
    unshaped support is a plain rectangle over one slot.
    """
    u = np.asarray(u, dtype=float)
    inside = (u >= 0) & (u < SLOT_SAMPLES)
    if not shaped:
        return inside.astype(float)
    rise = u / _HALF_GUARD
    fall = 1.0 - (u - (SLOT_SAMPLES - _HALF_GUARD)) / _HALF_GUARD
    g = np.minimum(np.minimum(rise, fall), 1.0)
    return np.where(inside, g, 0.0)


def ofdm_symbol_time(X: np.ndarray) -> np.ndarray:
    """Return the 1056 samples of one OFDM symbol, cyclic prefix first.

    Raises:
        ValueError: If X does not cover 1024 subcarriers or loads the gutter.
    """
    X = np.asarray(X, dtype=complex)
    if X.shape != (NS,):
        raise ValueError(f"Symbol vector must have {NS} entries, got {X.shape}.")
    if np.any(X[GUTTER] != 0):
        raise ValueError("Gutter subcarriers must be zero.")
    useful = np.fft.ifft(X, norm="ortho")
    return np.concatenate([useful[-NG:], useful])


def synth_frame(symbols: np.ndarray, pss: Optional[np.ndarray] = None) -> np.ndarray:
    """Assemble one frame from the PSS and the symbol rows for i = 1..301.

    Args:
        symbols (np.ndarray): (301, 1024) symbol matrix, row 0 is the SSS.
        pss (np.ndarray, optional): 1056-sample PSS; the default chirp if omitted.

    Returns:
        np.ndarray: 318912 complex samples.

    Raises:
        ValueError: On a wrong symbol count or PSS length.
    """
    symbols = np.asarray(symbols)
    if symbols.shape != (NSF - 1, NS):
        raise ValueError(
            f"Expected ({NSF - 1}, {NS}) symbol matrix, got {symbols.shape}."
        )
    pss = default_pss() if pss is None else np.asarray(pss, dtype=complex)
    if pss.shape != (SLOT_SAMPLES,):
        raise ValueError(f"PSS must have {SLOT_SAMPLES} samples, got {pss.shape}.")
    slots = np.empty((NSF, SLOT_SAMPLES), dtype=complex)
    slots[0] = pss
    slots[1:] = np.stack([ofdm_symbol_time(row) for row in symbols])
    slots *= support(np.arange(SLOT_SAMPLES))
    return slots.ravel()


# ---- Slot resampler ----


def slot_coefficients(windows: np.ndarray, frac: float | np.ndarray = 0.0) -> np.ndarray:
    """Recover slot coefficients from 1024-sample windows starting Ng/2 into a slot.

    ``frac`` is how far (in samples) each window lags its nominal position.
    """
    W = np.fft.fft(windows, axis=-1, norm="ortho")
    frac = np.asarray(frac, dtype=float)[..., None]
    return W * np.exp(2j * np.pi * OFFSETS * (_HALF_GUARD + frac) / NS)


def evaluate_periodic(
    spectrum: np.ndarray,
    index: np.ndarray,
    drift: Optional[np.ndarray] = None,
    order: int = DRIFT_ORDER,
) -> np.ndarray:
    """Samples of a periodic band-limited waveform at ``index + drift``.

    ``spectrum`` is the ortho DFT along the last axis. Derivatives are taken on
    the baseband subcarrier offsets, so ``drift`` must stay well below a sample.
    """
    values = np.fft.ifft(spectrum, axis=-1, norm="ortho")[..., index]
    if drift is None or not np.any(drift):
        return values
    ramp = 2j * np.pi * OFFSETS / NS
    term = spectrum
    for p in range(1, order + 1):
        term = term * ramp
        derivative = np.fft.ifft(term, axis=-1, norm="ortho")[..., index]
        values = values + drift**p / math.factorial(p) * derivative
    return values


def render_slots(
    coeffs: np.ndarray,
    delays: np.ndarray,
    length: int,
    shaped: bool = True,
    origin: int = 0,
    beta_s: float = 0.0,
) -> np.ndarray:
    """Evaluate slot waveforms at fractional delays.

    Args:
        coeffs (np.ndarray): (n_slots, 1024) slot coefficients.
        delays (np.ndarray): Delay of each slot centre in samples.
        length (int): Output length.
        shaped (bool): Apply the trapezoidal support.
        origin (int): Output index of the first slot's nominal start.
        beta_s (float): Time-scaling factor applied inside each slot.

    Returns:
        np.ndarray: Sum of the delayed slots.
    """
    out = np.zeros(length, dtype=complex)
    l = np.arange(SLOT_SAMPLES)
    index = (l - NG) % NS
    for i, (C, delay) in enumerate(zip(coeffs, delays)):
        base = origin + i * SLOT_SAMPLES + delay
        start = math.ceil(base)
        eps = start - base
        u = l + eps
        drift = beta_s * (SLOT_SAMPLES / 2 - u) if beta_s else None
        q = evaluate_periodic(C * np.exp(2j * np.pi * OFFSETS * eps / NS), index, drift)
        if drift is not None:
            u = u + drift
        values = support(u, shaped) * q
        lo, hi = max(start, 0), min(start + SLOT_SAMPLES, length)
        if lo < hi:
            out[lo:hi] += values[lo - start : hi - start]
    return out


def frame_coefficients(frame: np.ndarray) -> np.ndarray:
    """Coefficients of every slot of an aligned frame."""
    frame = np.asarray(frame, dtype=complex)
    if frame.shape != (FRAME_SAMPLES,):
        raise ValueError(f"Frame must have {FRAME_SAMPLES} samples, got {frame.shape}.")
    slots = frame.reshape(NSF, SLOT_SAMPLES)
    return slot_coefficients(slots[:, _HALF_GUARD : _HALF_GUARD + NS])


def slot_delays(delay: float, beta_s: float, n_slots: int = NSF) -> np.ndarray:
    """Delay at each slot centre for an initial delay and a time-scaling factor."""
    centres = np.arange(n_slots) * SLOT_SAMPLES + SLOT_SAMPLES / 2
    return delay + centres * beta_s / (1.0 - beta_s)


def extract_slots(
    samples: np.ndarray,
    start: float,
    beta: float,
    fc: float,
    n_slots: int = NSF,
    first_sample: int = 0,
) -> np.ndarray:
    """Undo Doppler time scaling and carrier offset for slots starting at ``start``.

    Args:
        samples (np.ndarray): Stream samples.
        start (float): Stream index of the first slot.
        beta (float): Doppler hypothesis to remove.
        fc (float): Carrier frequency in Hz.
        n_slots (int): Number of slots to pull out.
        first_sample (int): Absolute index of ``samples[0]`` for the carrier phase.

    Returns:
        np.ndarray: (n_slots, 1024) slot coefficients on the transmitter time base.

    Raises:
        ValueError: If the stream does not cover the requested slots.
    """
    positions = start + (np.arange(n_slots) * SLOT_SAMPLES + _HALF_GUARD) / (1.0 - beta)
    anchors = np.floor(positions).astype(int)
    if anchors[0] < 0 or anchors[-1] + NS > len(samples):
        raise ValueError(
            f"Stream of {len(samples)} samples does not hold {n_slots} slots from {start:.1f}."
        )
    l = np.arange(NS)
    idx = anchors[:, None] + l
    rotation = np.exp(2j * np.pi * beta * fc * (first_sample + idx) / FS)
    frac = positions - anchors
    windows = samples[idx] * rotation
    if beta:
        # window sample l lags the slot time grid by (l - frac) * beta
        drift = (l[None, :] - frac[:, None]) * beta
        windows = evaluate_periodic(np.fft.fft(windows, axis=-1, norm="ortho"), l, drift)
    return slot_coefficients(windows, frac)


# ---- Channel ----


def add_noise(
    samples: np.ndarray, signal_power: float, snr_db: float, rng: np.random.Generator
) -> np.ndarray:
    """Add complex white Gaussian noise at ``snr_db`` relative to ``signal_power``."""
    variance = signal_power / 10 ** (snr_db / 10)
    noise = rng.standard_normal(len(samples)) + 1j * rng.standard_normal(len(samples))
    return samples + np.sqrt(variance / 2) * noise


def _impair(
    frame: np.ndarray,
    clock: ClockModel,
    params: ChannelParams,
    theta: float,
    start_sample: int,
    length: Optional[int] = None,
) -> np.ndarray:
    coeffs = frame_coefficients(frame)
    if params.H is not None:
        coeffs = coeffs * params.H
    beta_s = params.beta_s(clock)
    if abs(beta_s) >= MAX_DRIFT:
        raise ValueError(f"Time scaling {beta_s} outside resampler support {MAX_DRIFT}.")
    delays = slot_delays(params.delay_samples(clock), beta_s)
    if length is None:
        length = FRAME_SAMPLES + max(0, math.ceil(delays.max()))
    out = render_slots(coeffs, delays, length, beta_s=beta_s)
    n = start_sample + np.arange(length)
    carrier = -2 * np.pi * params.beta_c(clock) * params.fc * n / FS
    phase = carrier + params.frame_phase(clock) + theta
    return np.sqrt(params.g) * out * np.exp(1j * phase)


def apply_channel(
    frame: np.ndarray,
    clock: ClockModel,
    params: ChannelParams,
    rng: Optional[np.random.Generator] = None,
    start_sample: int = 0,
) -> CaptureStream:
    """Pass one frame through the received-signal model.

    Args:
        frame (np.ndarray): Output of :func:`synth_frame`.
        clock (ClockModel): Transmitter clock offsets.
        params (ChannelParams): Doppler, delay, transfer function, gain, SNR.
        rng (np.random.Generator, optional): Source for noise and frame phase.
        start_sample (int): Absolute index of the first output sample.

    Returns:
        CaptureStream: The impaired segment.
    """
    rng = rng if rng is not None else np.random.default_rng()
    theta = rng.uniform(0, 2 * np.pi) if params.theta is None else params.theta
    out = _impair(frame, clock, params, theta, start_sample)
    if params.snr_pre_db is not None:
        power = float(np.sum(np.abs(out) ** 2)) / FRAME_SAMPLES
        out = add_noise(out, power, params.snr_pre_db, rng)
    return CaptureStream(out, FS, params.fc)


def frame_start_sample(m: int, offset: int = 0) -> int:
    """Nominal first sample of frame slot m, one frame interval apart."""
    if m < 0:
        raise ValueError(f"Frame slot must be non-negative, got {m}.")
    return offset + m * FRAME_PERIOD_SAMPLES


def synth_capture(
    frames: Sequence[Optional[np.ndarray]],
    clock: ClockModel,
    params: ChannelParams,
    duration: Optional[float] = None,
    rng: Optional[np.random.Generator] = None,
    starts: Optional[Sequence[int]] = None,
) -> CaptureStream:
    """Sum impaired frames into one continuous stream.

    Args:
        frames: One entry per frame slot; ``None`` leaves the slot empty.
        clock, params: Impairments shared by all frames.
        duration (float, optional): Stream length in seconds.
        rng (np.random.Generator, optional): Noise and phase source.
        starts (sequence of int, optional): Start sample per slot; defaults to
            one frame interval apart.

    Raises:
        ValueError: If two occupied frames overlap.
    """
    rng = rng if rng is not None else np.random.default_rng()
    if starts is None:
        starts = [frame_start_sample(m) for m in range(len(frames))]
    if len(starts) != len(frames):
        raise ValueError("One start sample is needed per frame slot.")
    occupied = [(s, f) for s, f in zip(starts, frames) if f is not None]
    for (s0, _), (s1, _) in zip(occupied, occupied[1:]):
        if s1 - s0 < FRAME_SAMPLES:
            raise ValueError(f"Frames starting at {s0} and {s1} overlap.")
    length = int(round(duration * FS)) if duration is not None else 0
    if length == 0:
        length = (starts[-1] if starts else 0) + FRAME_PERIOD_SAMPLES
    stream = np.zeros(length, dtype=complex)
    powers = []
    for start, frame in occupied:
        if start >= length:
            continue
        theta = rng.uniform(0, 2 * np.pi) if params.theta is None else params.theta
        segment = _impair(frame, clock, params, theta, start, min(FRAME_PERIOD_SAMPLES, length - start))
        stream[start : start + len(segment)] += segment
        powers.append(float(np.sum(np.abs(segment) ** 2)) / FRAME_SAMPLES)
    logger.info("Placed %d frames in %d samples", len(powers), length)
    if params.snr_pre_db is not None:
        power = float(np.mean(powers)) if powers else params.g * _LOADED_POWER
        stream = add_noise(stream, power, params.snr_pre_db, rng)
    return CaptureStream(stream, FS, params.fc)


# ---- IQ files ----


def write_iq(path: str, stream: CaptureStream, meta_path: Optional[str] = None) -> str:
    """Write interleaved little-endian float32 I/Q plus a ``key=value`` sidecar.

    Returns:
        str: Path of the sidecar file.
    """
    meta_path = meta_path or path + ".meta"
    stream.samples.astype("<c8").tofile(path)
    with open(meta_path, "w", encoding="utf-8") as f:
        f.write(f"sample_rate_hz={stream.sample_rate!r}\n")
        f.write(f"center_freq_hz={stream.center_frequency!r}\n")
        f.write(f"epoch={stream.epoch!r}\n")
    return meta_path


def read_meta(meta_path: str) -> Dict[str, float]:
    """Parse a sidecar file into floats."""
    meta: Dict[str, float] = {}
    with open(meta_path, "r", encoding="utf-8") as f:
        for lineno, raw in enumerate(f, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, sep, value = line.partition("=")
            try:
                if not sep:
                    raise ValueError("missing '='")
                meta[key.strip()] = float(value)
            except ValueError as exc:
                raise FormatError(str(exc), path=meta_path, line=lineno) from exc
    for key in ("sample_rate_hz", "center_freq_hz"):
        if key not in meta:
            raise FormatError(f"missing key '{key}'", path=meta_path)
    return meta


def read_iq(path: str, meta_path: Optional[str] = None) -> CaptureStream:
    """Read an IQ file written by :func:`write_iq`.

    Raises:
        FormatError: If the payload is not whole I/Q pairs or is not finite.
    """
    meta = read_meta(meta_path or path + ".meta")
    size = os.path.getsize(path)
    if size == 0 or size % 8:
        raise FormatError(
            "IQ payload is not a whole number of float32 pairs",
            path=path,
            byte_offset=size - size % 8,
        )
    samples = np.fromfile(path, dtype="<c8").astype(complex)
    bad = np.flatnonzero(~np.isfinite(samples))
    if bad.size:
        raise FormatError("non-finite sample", path=path, byte_offset=int(bad[0]) * 8)
    return CaptureStream(
        samples, meta["sample_rate_hz"], meta["center_freq_hz"], meta.get("epoch", 0.0)
    )
