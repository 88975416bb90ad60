"""Demodulation module.

Turns an acquired, coarsely compensated frame into hard-decoded information
symbols: OFDM demodulation, channel estimation and equalization, constellation
identification, per-symbol maximum-likelihood residual synchronization, the
joint linear fit, compensation and hard decisions. An alternate frame-level
residual estimator is also provided.

Delays are in seconds and phases in radians unless a name says otherwise.
"""

from __future__ import annotations

import logging
import warnings
from dataclasses import dataclass, field, replace
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from scipy import optimize, signal, special
from sklearn.cluster import KMeans
from sklearn.exceptions import ConvergenceWarning

from errors import EstimationError
from frame_model import (
    CONSTELLATION_LABELS,
    FS,
    GUTTER,
    NS,
    NSF,
    OFFSETS,
    SLOT_SAMPLES,
    build_frame_grid,
    constellation,
)
from pilot_codes import PilotCodebook, load_default
from waveform_synth import DEFAULT_FC, default_sss_symbols, frame_coefficients

logger = logging.getLogger(__name__)

CARD4 = "QPSK|4QAM"
COMPOSITE = "composite"
RESIDUAL_SYNC_MODES = ("per-symbol", "frame")
TSYM = SLOT_SAMPLES / FS
F_SUB = FS / NS

_GRID = build_frame_grid(DEFAULT_FC)
KL = _GRID.Kl
KLNP = _GRID.Klnp
KP = _GRID.Kp
_D_SORTED = np.argsort(OFFSETS[KL])


@dataclass(frozen=True)
class DemodSettings:
    """Tunables of the demodulation chain.

    Attributes:
        smoother_window, smoother_order: Savitzky-Golay parameters over Kl.
        h_floor: |H| below which a subcarrier is masked instead of divided.
        sss_floor: Minimum mean SSS energy relative to the noise variance.
        kmeans_tolerance: Cluster spread allowed as a fraction of d_min.
        kmeans_noise_slack: Multiple of the noise variance added to the spread.
        match_tolerance: Centroid-to-reference distance allowed for 16/32-ary fits.
        kmeans_restarts: k-means++ restarts tried when the reference-seeded fit fails.
        restart_margin: Restarts are skipped when the seeded distortion exceeds
            this multiple of the limit, i.e. the cluster count is plainly wrong.
        min_subcarriers: Fewest usable subcarriers for identification.
        tau_span: Half width of the initial delay search in samples.
        tau_step: Delay grid step in samples.
        ml_max_iter: Iteration cap of the local likelihood refinement.
        gap_split: Retained-index gap above which phase unwrapping predicts.
        seed: Seed for the clustering.
        residual_sync: ``"per-symbol"`` for per-symbol ML plus the joint fit,
            ``"frame"`` for the frame-level estimator.
    """

    smoother_window: int = 41
    smoother_order: int = 3
    h_floor: float = 0.05
    sss_floor: float = 2.0
    kmeans_tolerance: float = 0.15
    kmeans_noise_slack: float = 1.5
    match_tolerance: float = 0.2
    kmeans_restarts: int = 20
    restart_margin: float = 4.0
    min_subcarriers: int = 100
    tau_span: float = 16.0
    tau_step: float = 0.125
    ml_max_iter: int = 400
    gap_split: int = 20
    seed: int = 0
    residual_sync: str = "per-symbol"

    def __post_init__(self):
        if self.residual_sync not in RESIDUAL_SYNC_MODES:
            raise ValueError(
                f"Unknown residual sync '{self.residual_sync}'. Choose one of {RESIDUAL_SYNC_MODES}."
            )


@dataclass
class EqualizerState:
    """Channel estimate from the SSS.

    ``H_hat`` covers all 1024 subcarriers with ``H_hat[0] == 1``.
    """

    H_hat: np.ndarray
    Z_hat: complex
    tau_m1: float
    g_hat: float = 1.0
    H_raw: Optional[np.ndarray] = field(default=None, repr=False)

    def masked(self, floor: float = 0.05) -> np.ndarray:
        """Loaded subcarriers whose |H_hat| is below ``floor``."""
        return KL[np.abs(self.H_hat[KL]) < floor]

    def with_transfer(self, H_hat: np.ndarray) -> "EqualizerState":
        """Copy with a replacement transfer function, e.g. a multi-frame average."""
        return replace(self, H_hat=np.asarray(H_hat, dtype=complex))


@dataclass
class SyncEstimate:
    """Fitted residual synchronization errors of one frame."""

    phi_m0: float = 0.0
    dbeta_c: float = 0.0
    tau_m0: float = 0.0
    dbeta_s: float = 0.0
    indices: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int), repr=False)
    tau: np.ndarray = field(default_factory=lambda: np.zeros(0), repr=False)
    phi: np.ndarray = field(default_factory=lambda: np.zeros(0), repr=False)
    fc: float = DEFAULT_FC

    def tau_at(self, i) -> np.ndarray:
        """Modelled delay of symbol(s) i."""
        return self.tau_m0 + np.asarray(i) * TSYM * self.dbeta_s

    def phi_at(self, i) -> np.ndarray:
        """Modelled phase of symbol(s) i."""
        return self.phi_m0 - 2 * np.pi * TSYM * self.fc * np.asarray(i) * self.dbeta_c

    def negated(self) -> "SyncEstimate":
        """The inverse correction."""
        return replace(
            self, phi_m0=-self.phi_m0, dbeta_c=-self.dbeta_c, tau_m0=-self.tau_m0, dbeta_s=-self.dbeta_s
        )


@dataclass
class DecodedFrame:
    """Hard-decoded symbols of one frame.

    ``X_hat`` is (302, 1024) with NaN wherever nothing was decided (PSS row,
    gutter, pilots, masked subcarriers, dropped symbols). ``labels[i]`` is the
    constellation of symbol i, ``"composite"`` or None when dropped.
    """

    m: Optional[int]
    X_hat: np.ndarray
    labels: List[Optional[str]]
    snr_pre_est: float = float("nan")
    sync: SyncEstimate = field(default_factory=SyncEstimate)
    Y: Optional[np.ndarray] = field(default=None, repr=False)

    def retained(self) -> List[int]:
        """Post-SSS symbol indices carrying decoded constellation symbols."""
        return [i for i in range(2, NSF) if self.labels[i] in CONSTELLATION_LABELS]


# ---- Transform and channel ----


def ofdm_demod(frame: np.ndarray) -> np.ndarray:
    """Frequency-domain symbols of every slot; row 0 (PSS) is NaN.

    Raises:
        ValueError: If the frame does not have 302 * 1056 samples.
    """
    Y = frame_coefficients(frame)
    Y[0] = np.nan
    return Y


def noise_variance(Y_bar: np.ndarray) -> float:
    """Per-subcarrier noise variance from the gutter bins of symbols 1..301."""
    return float(np.mean(np.abs(Y_bar[1:, GUTTER]) ** 2))


def _delay_periodogram(values: np.ndarray, d: np.ndarray, taus: np.ndarray, scale: int = 1) -> np.ndarray:
    phase = np.exp(2j * np.pi * scale * np.outer(taus, d) / NS)
    return np.abs(phase @ values)


def _refine_delay(values: np.ndarray, d: np.ndarray, tau0: float, width: float) -> float:
    def cost(t):
        return -np.abs(np.sum(values * np.exp(2j * np.pi * d * t / NS)))

    res = optimize.minimize_scalar(
        cost, bounds=(tau0 - width, tau0 + width), method="bounded", options={"xatol": 1e-7}
    )
    return float(res.x)


def estimate_delay_samples(ratios: np.ndarray, d: np.ndarray, span: float = NS / 2) -> float:
    """Single-tone ML delay (in samples) from ratios ~ exp(-j 2 pi d tau / Ns)."""
    pad = 16
    spectrum = np.zeros(NS * pad, dtype=complex)
    np.add.at(spectrum, d % (NS * pad), ratios)
    power = np.abs(np.fft.ifft(spectrum))
    taus = np.arange(NS * pad) / pad
    taus = np.where(taus >= NS / 2, taus - NS, taus)
    power = np.where(np.abs(taus) <= span, power, -1.0)
    coarse = taus[int(np.argmax(power))]
    return _refine_delay(ratios, d, coarse, 1.0 / pad)


def estimate_channel(
    Y_sss: np.ndarray,
    X_sss: np.ndarray,
    noise_var: float = 0.0,
    settings: DemodSettings = DemodSettings(),
) -> EqualizerState:
    """Estimate the delay, transfer function and frame constant from the SSS.

    Raises:
        EstimationError: If the SSS energy does not clear the noise floor.
    """
    y = np.asarray(Y_sss)[KL]
    x = np.asarray(X_sss)[KL]
    energy = float(np.mean(np.abs(y) ** 2))
    if energy <= settings.sss_floor * noise_var or energy == 0:
        raise EstimationError(
            f"SSS energy {energy:.3g} below floor for noise variance {noise_var:.3g}."
        )
    d = OFFSETS[KL]
    ratios = y * np.conj(x) / np.abs(x) ** 2
    tau_s = estimate_delay_samples(ratios, d)
    raw = ratios * np.exp(2j * np.pi * d * tau_s / NS)
    ordered = raw[_D_SORTED]
    smooth = signal.savgol_filter(
        ordered.real, settings.smoother_window, settings.smoother_order
    ) + 1j * signal.savgol_filter(ordered.imag, settings.smoother_window, settings.smoother_order)
    d_sorted = d[_D_SORTED]
    H_tilde = np.empty(NS, dtype=complex)
    H_tilde[KL[_D_SORTED]] = smooth
    gutter = OFFSETS[GUTTER]
    H_tilde[GUTTER] = np.interp(gutter, d_sorted, smooth.real) + 1j * np.interp(
        gutter, d_sorted, smooth.imag
    )
    Z0 = H_tilde[0]
    H_hat = H_tilde / Z0
    H_hat[0] = 1.0
    power = np.mean(np.abs(y) ** 2 / np.abs(x) ** 2) - noise_var
    g_hat = max(float(power / np.mean(np.abs(H_hat[KL]) ** 2)), 0.0)
    Z_hat = np.sqrt(g_hat) * np.exp(1j * np.angle(Z0))
    logger.debug("tau_m1 %.4f samples, g %.4g, theta %.4f", tau_s, g_hat, np.angle(Z0))
    return EqualizerState(H_hat, complex(Z_hat), tau_s / FS, g_hat, H_raw=raw)


def refine_channel(states: Sequence[EqualizerState]) -> np.ndarray:
    """Average normalised transfer estimates across frames."""
    if not states:
        raise ValueError("No channel estimates to refine.")
    H = np.mean([s.H_hat for s in states], axis=0)
    H = H / H[0]
    H[0] = 1.0
    return H


def equalize(Y_bar: np.ndarray, state: EqualizerState, floor: float = 0.05) -> np.ndarray:
    """Divide by Z_hat * H_hat; gutter and weak subcarriers become NaN."""
    denom = state.Z_hat * state.H_hat
    weak = np.abs(state.H_hat) < floor
    weak[GUTTER] = True
    with np.errstate(divide="ignore", invalid="ignore"):
        out = Y_bar / denom
    out[:, weak] = np.nan
    masked = int(np.count_nonzero(weak[KL]))
    if masked:
        logger.info("Masked %d subcarriers below |H| %.3g", masked, floor)
    return out


# ---- Constellation identification ----


_EIGHT_PSK = np.exp(2j * np.pi * np.arange(8) / 8)
_REFERENCE = {
    4: ("QPSK", constellation("QPSK").points, 4),
    8: ("8PSK", _EIGHT_PSK, 8),
    16: ("16QAM", constellation("16QAM").points, 4),
    32: ("32QAM", constellation("32QAM").points, 4),
}


def _min_distance(points: np.ndarray) -> float:
    diff = np.abs(points[:, None] - points[None, :])
    return float(diff[diff > 0].min())


def _power_phase(values: np.ndarray, points: np.ndarray, power: int) -> float:
    moment = np.mean(points**power)
    return float(np.angle(np.sum(values**power) * np.conj(moment)) / power)


def identify_constellation(
    column: np.ndarray,
    noise_var: float = 0.0,
    settings: DemodSettings = DemodSettings(),
) -> str:
    """Cluster one equalized column and name its constellation family.

    Returns ``"QPSK|4QAM"``, ``"16QAM"``, ``"32QAM"`` or ``"composite"``.

    Raises:
        ValueError: If fewer than ``min_subcarriers`` values are usable.
    """
    values = np.asarray(column)
    values = values[np.isfinite(values)]
    if values.size < settings.min_subcarriers:
        raise ValueError(
            f"Only {values.size} usable subcarriers, need {settings.min_subcarriers}."
        )
    features = np.column_stack([values.real, values.imag])
    for k, (name, points, power) in _REFERENCE.items():
        limit = (settings.kmeans_tolerance * _min_distance(points)) ** 2
        limit += settings.kmeans_noise_slack * noise_var
        tolerance = settings.match_tolerance * _min_distance(points)
        init = points * np.exp(1j * _power_phase(values, points, power))
        candidates = [_fit_clusters(features, k, np.column_stack([init.real, init.imag]), 1, settings.seed)]
        # the seeded start can settle in a local optimum for the larger sets
        seeded = _score_fit(candidates[0], values.size, name, power)
        if not (seeded[0] <= limit and seeded[1] <= tolerance) and seeded[0] <= settings.restart_margin * limit:
            candidates.append(
                _fit_clusters(features, k, "k-means++", settings.kmeans_restarts, settings.seed)
            )
        scores = [_score_fit(model, values.size, name, power) for model in candidates]
        passing = [gap for distortion, gap in scores if distortion <= limit]
        logger.debug(
            "K=%d distortion %.4g limit %.4g over %d fits", k, min(s[0] for s in scores), limit, len(scores)
        )
        if not passing:
            continue
        if k == 4:
            return CARD4
        if k == 8:
            return COMPOSITE
        return name if min(passing) <= tolerance else COMPOSITE
    return COMPOSITE


def _fit_clusters(features: np.ndarray, k: int, init, n_init: int, seed: int) -> KMeans:
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", ConvergenceWarning)
        return KMeans(n_clusters=k, init=init, n_init=n_init, max_iter=100, random_state=seed).fit(features)


def _score_fit(model: KMeans, n: int, name: str, power: int) -> Tuple[float, float]:
    """Mean distortion and the match gap of one clustering.

    The gap is the largest centroid-to-reference distance once the centroids
    are rotated onto the reference set; it is infinite when two centroids
    decide to the same point. Sets without a reference table have gap 0.
    """
    distortion = model.inertia_ / n
    if name not in CONSTELLATION_LABELS:
        return distortion, 0.0
    centres = model.cluster_centers_[:, 0] + 1j * model.cluster_centers_[:, 1]
    ref = constellation(name)
    aligned = centres * np.exp(-1j * _power_phase(centres, ref.points, power))
    for _ in range(2):
        nearest = ref.points[ref.decide(aligned)]
        aligned = aligned * np.exp(-1j * np.angle(np.sum(aligned * np.conj(nearest))))
    idx = ref.decide(aligned)
    if len(set(idx.tolist())) != len(centres):
        return distortion, float("inf")
    return distortion, float(np.abs(aligned - ref.points[idx]).max())


# ---- Residual synchronization ----


def _column_loglik(
    y: np.ndarray,
    d: np.ndarray,
    noise: np.ndarray,
    points: np.ndarray,
    known: np.ndarray,
    tau_s: float,
    phi: float,
) -> float:
    """Marginal log-likelihood (up to a constant) of one column at (tau, phi)."""
    rotated = y * np.exp(2j * np.pi * d * tau_s / NS - 1j * phi)
    is_known = np.isfinite(known)
    total = 0.0
    if is_known.any():
        total -= np.sum(np.abs(rotated[is_known] - known[is_known]) ** 2 / noise[is_known])
    free = ~is_known
    if free.any():
        dist = np.abs(rotated[free, None] - points[None, :]) ** 2 / noise[free, None]
        total += np.sum(special.logsumexp(-dist, axis=1) - np.log(len(points)))
    return float(total)


@dataclass(frozen=True)
class SymbolEstimate:
    """Per-symbol ML result; ``converged`` False means the symbol is dropped."""

    tau: float
    phi: float
    loglik: float
    converged: bool
    label: Optional[str] = None


def _wrap(phi):
    return (np.asarray(phi) + np.pi) % (2 * np.pi) - np.pi


def per_symbol_ml(
    column: np.ndarray,
    points: np.ndarray,
    known: np.ndarray,
    noise: np.ndarray,
    tau_hint: Optional[float] = None,
    settings: DemodSettings = DemodSettings(),
) -> SymbolEstimate:
    """Maximise the marginalised likelihood of one column over (tau, phi).

    Args:
        column (np.ndarray): Equalized symbol over all 1024 subcarriers.
        points (np.ndarray): Candidate constellation for unknown cells.
        known (np.ndarray): Known symbol values, NaN where unknown.
        noise (np.ndarray): Per-subcarrier noise variance.
        tau_hint (float, optional): Starting delay in seconds.
    """
    usable = np.isfinite(column)
    usable[GUTTER] = False
    y = column[usable]
    d = OFFSETS[usable]
    kn = np.asarray(known)[usable]
    nv = np.maximum(np.asarray(noise)[usable], 1e-6)
    is_known = np.isfinite(kn)
    m4 = np.mean(points**4)
    if tau_hint is None:
        taus = np.arange(-settings.tau_span, settings.tau_span + 1e-12, settings.tau_step)
        z = np.where(is_known, (y * np.conj(np.where(is_known, kn, 1))) ** 4, y**4)
        tau_s = float(taus[np.argmax(_delay_periodogram(z, d, taus, scale=4))])
    else:
        tau_s = tau_hint * FS
    rotated = y * np.exp(2j * np.pi * d * tau_s / NS)
    phi = float(np.angle(np.sum(rotated**4) * np.conj(m4)) / 4) if abs(m4) > 1e-9 else 0.0
    if is_known.any():
        ref = np.sum(rotated[is_known] * np.conj(kn[is_known]))
        candidates = phi + np.arange(4) * np.pi / 2
        phi = float(candidates[np.argmax(np.real(ref * np.exp(-1j * candidates)))])
    weights = np.ones_like(d, dtype=float)
    for _ in range(2):
        aligned = y * np.exp(2j * np.pi * d * tau_s / NS - 1j * phi)
        decided = np.where(is_known, kn, points[np.argmin(np.abs(aligned[:, None] - points), axis=1)])
        resid = np.angle(aligned * np.conj(decided))
        weights = np.abs(decided) ** 2 / nv
        A = np.column_stack([-2 * np.pi * d / NS, np.ones_like(d, dtype=float)])
        sw = np.sqrt(weights)
        delta, *_ = np.linalg.lstsq(A * sw[:, None], resid * sw, rcond=None)
        tau_s += delta[0]
        phi += delta[1]

    def cost(p):
        return -_column_loglik(y, d, nv, points, kn, p[0], p[1])

    res = optimize.minimize(
        cost,
        np.array([tau_s, phi]),
        method="Nelder-Mead",
        options={
            "initial_simplex": np.array([[tau_s, phi], [tau_s + 0.02, phi], [tau_s, phi + 0.005]]),
            "xatol": 1e-7,
            "fatol": 1e-9,
            "maxiter": settings.ml_max_iter,
        },
    )
    tau_s, phi = float(res.x[0]), float(res.x[1])
    converged = bool(res.success) and abs(tau_s) <= settings.tau_span + 1
    return SymbolEstimate(tau_s / FS, float(_wrap(phi)), -float(res.fun), converged)


def unwrap_phases(indices: np.ndarray, phi: np.ndarray, gap_split: int = 20) -> np.ndarray:
    """Remove 2 pi jumps along the retained indices.

    Across gaps wider than ``gap_split`` the next phase is placed on the
    integer cycle nearest the straight-line prediction from the points so far.
    """
    indices = np.asarray(indices)
    out = np.array(phi, dtype=float)
    for n in range(1, len(out)):
        gap = indices[n] - indices[n - 1]
        slope = 0.0
        if gap > gap_split and n >= 2:
            slope = np.polyfit(indices[:n], out[:n], 1)[0]
        elif n >= 2:
            slope = (out[n - 1] - out[n - 2]) / max(indices[n - 1] - indices[n - 2], 1)
        predicted = out[n - 1] + slope * gap
        out[n] += 2 * np.pi * np.round((predicted - out[n]) / (2 * np.pi))
    return out


def joint_fit(
    indices: Sequence[int],
    tau: Sequence[float],
    phi: Sequence[float],
    fc: float = DEFAULT_FC,
    gap_split: int = 20,
) -> SyncEstimate:
    """Least-squares fit of the per-symbol estimates to the residual model.

    Raises:
        ValueError: With fewer than two distinct symbol indices.
    """
    indices = np.asarray(indices, dtype=int)
    tau = np.asarray(tau, dtype=float)
    if len(np.unique(indices)) < 2:
        raise ValueError("Joint fit needs at least two distinct symbol indices.")
    order = np.argsort(indices)
    indices, tau = indices[order], tau[order]
    phi_u = unwrap_phases(indices, np.asarray(phi, dtype=float)[order], gap_split)
    ones = np.ones(len(indices))
    A_phi = np.column_stack([ones, -2 * np.pi * TSYM * fc * indices])
    A_tau = np.column_stack([ones, TSYM * indices])
    (phi_m0, dbeta_c), *_ = np.linalg.lstsq(A_phi, phi_u, rcond=None)
    (tau_m0, dbeta_s), *_ = np.linalg.lstsq(A_tau, tau, rcond=None)
    logger.debug(
        "Joint fit over %d symbols: dbeta_c %.3e, dbeta_s %.3e", len(indices), dbeta_c, dbeta_s
    )
    return SyncEstimate(
        float(_wrap(phi_m0)), float(dbeta_c), float(tau_m0), float(dbeta_s),
        indices, tau, phi_u, fc,
    )


def compensate(Y_tilde: np.ndarray, sync: SyncEstimate) -> np.ndarray:
    """Remove the modelled residual delay and phase from every symbol row."""
    i = np.arange(Y_tilde.shape[0])[:, None]
    tau = sync.tau_at(i)
    phi = sync.phi_at(i)
    return Y_tilde * np.exp(-1j * phi + 2j * np.pi * OFFSETS[None, :] * F_SUB * tau)


# ---- Decisions ----


def _grid_angle(values: np.ndarray) -> float:
    values = values[np.isfinite(values)]
    return float(np.angle(np.sum(values**4)) / 4)


def _wrap_quarter(phi: float) -> float:
    return (phi + np.pi / 4) % (np.pi / 2) - np.pi / 4


def disambiguate_and_decode(
    Y: np.ndarray,
    labels: Sequence[Optional[str]],
    sync: Optional[SyncEstimate] = None,
    m: Optional[int] = None,
    snr_pre_est: float = float("nan"),
) -> DecodedFrame:
    """Resolve QPSK versus 4QAM and hard-decode every retained symbol.

    The QPSK grid angle starts at the phase-aligned SSS and follows the
    previous retained cardinality-4 column; a column rotated by more than
    pi/8 from it is 4QAM.
    """
    labels = list(labels)
    X_hat = np.full(Y.shape, np.nan, dtype=complex)
    reference = _grid_angle(Y[1, KLNP]) if np.isfinite(Y[1, KLNP]).any() else 0.0
    for i in range(2, NSF):
        label = labels[i]
        if label is None or label == COMPOSITE:
            continue
        row = Y[i, KLNP]
        if label == CARD4:
            angle = _grid_angle(row)
            offset = _wrap_quarter(angle - reference)
            if abs(offset) > np.pi / 8:
                label = "4QAM"
                reference = _wrap_quarter(angle - np.pi / 4)
            else:
                label = "QPSK"
                reference = angle
            labels[i] = label
        X_hat[i, KLNP] = constellation(label).nearest(row)
    decoded = sum(1 for i in range(2, NSF) if labels[i] in CONSTELLATION_LABELS)
    logger.info("Frame %s: decoded %d symbols", m, decoded)
    return DecodedFrame(m, X_hat, labels, snr_pre_est, sync or SyncEstimate(), Y)


# ---- Alternate residual estimator ----


@dataclass(frozen=True)
class AltSyncSettings:
    """Tunables of the frame-level residual estimator.

    The two penalty weights scale a unit-variance prior on dbeta (in units of
    ``beta_scale``) and on the deviation of phi_m0 from the reference phase.
    """

    scan_span: float = 2.5e-7
    scan_step: float = 1e-8
    beta_scale: float = 1e-7
    beta_weight: float = 1.0
    phase_weight: float = 1.0
    subcarrier_stride: int = 1
    rows: Optional[Tuple[int, ...]] = None
    min_noise_var: float = 1e-3
    newton_iter: int = 20


_HYPOTHESES = tuple(constellation(lab).points for lab in CONSTELLATION_LABELS)


def _symbol_loglik(rot: np.ndarray, free: np.ndarray, sigma2: float) -> np.ndarray:
    """Per-row log-likelihood of the unknown cells, averaged over the constellation hypotheses.

    Each symbol carries one constellation, so the cells of a row are
    marginalised jointly under each hypothesis before the hypotheses are mixed.
    """
    values = np.where(free, rot, 0.0)
    per_hypothesis = []
    for points in _HYPOTHESES:
        cell = np.full(values.shape, -np.inf)
        for x in points:
            cell = np.logaddexp(cell, -np.abs(values - x) ** 2 / sigma2)
        cell -= np.log(len(points))
        per_hypothesis.append(np.sum(np.where(free, cell, 0.0), axis=1))
    return special.logsumexp(np.stack(per_hypothesis), axis=0) - np.log(len(_HYPOTHESES))


def alt_residual_sync(
    Y_tilde: np.ndarray,
    phi_ref: float = 0.0,
    tau_m0: float = 0.0,
    noise_var: float = 0.0,
    fc: float = DEFAULT_FC,
    codebook: Optional[PilotCodebook] = None,
    settings: AltSyncSettings = AltSyncSettings(),
) -> Tuple[float, float]:
    """Frame-level estimate of (dbeta_c, phi_m0) from all loaded subcarriers.

    Uses dbeta_s = dbeta_c. Known cells enter directly, every other symbol is
    marginalised over the candidate constellations. A brute-force dbeta scan
    is followed by damped Newton steps on (dbeta, phi_m0).

    Raises:
        EstimationError: If the best scan point lies on the edge of the range.
    """
    codebook = codebook or load_default()
    rows = np.array(settings.rows if settings.rows is not None else range(2, NSF))
    cols = KL[:: settings.subcarrier_stride]
    Y = Y_tilde[np.ix_(rows, cols)]
    known = codebook.pilot_lookup()[np.ix_(rows, cols)]
    d = OFFSETS[cols][None, :]
    i = rows[:, None]
    valid = np.isfinite(Y)
    is_known = np.isfinite(known) & valid
    free = ~np.isfinite(known) & valid
    sigma2 = max(noise_var, settings.min_noise_var)

    def nll(dbeta: float, phi0: float) -> float:
        phase = phi0 - 2 * np.pi * d * F_SUB * tau_m0 - 2 * np.pi * (fc + d * F_SUB) * i * TSYM * dbeta
        rot = Y * np.exp(-1j * phase)
        total = np.sum(np.abs(rot[is_known] - known[is_known]) ** 2) / sigma2
        total -= np.sum(_symbol_loglik(rot, free, sigma2))
        total += settings.beta_weight * (dbeta / settings.beta_scale) ** 2
        total += settings.phase_weight * float(_wrap(phi0 - phi_ref)) ** 2
        return float(total)

    grid = np.arange(-settings.scan_span, settings.scan_span + settings.scan_step / 2, settings.scan_step)
    scores = [nll(b, phi_ref) for b in grid]
    best = int(np.argmin(scores))
    if best in (0, len(grid) - 1):
        raise EstimationError(f"dbeta scan minimum at range edge {grid[best]:.3g}.")
    x = np.array([grid[best], phi_ref])
    h = np.array([settings.scan_step * 1e-2, 1e-4])
    f0 = nll(*x)
    for _ in range(settings.newton_iter):
        g = np.zeros(2)
        Hs = np.zeros((2, 2))
        for a in range(2):
            ea = np.eye(2)[a] * h[a]
            fp, fm = nll(*(x + ea)), nll(*(x - ea))
            g[a] = (fp - fm) / (2 * h[a])
            Hs[a, a] = (fp - 2 * f0 + fm) / h[a] ** 2
        e0, e1 = np.eye(2)[0] * h[0], np.eye(2)[1] * h[1]
        Hs[0, 1] = Hs[1, 0] = (
            nll(*(x + e0 + e1)) - nll(*(x + e0 - e1)) - nll(*(x - e0 + e1)) + nll(*(x - e0 - e1))
        ) / (4 * h[0] * h[1])
        try:
            step = -np.linalg.solve(Hs, g)
        except np.linalg.LinAlgError:
            break
        if np.linalg.eigvalsh(Hs).min() <= 0:
            step = -g / np.maximum(np.abs(np.diag(Hs)), 1.0)
        for _ in range(20):
            f1 = nll(*(x + step))
            if f1 <= f0:
                break
            step /= 2
        else:
            break
        x, f0 = x + step, f1
        if np.all(np.abs(step) < h * 1e-2):
            break
    logger.debug("Alternate estimator: dbeta %.4e, phi_m0 %.4f", x[0], x[1])
    return float(x[0]), float(_wrap(x[1]))


# ---- Pipeline ----


class Demodulator:
    """Runs the full demodulation chain on acquired frames."""

    def __init__(
        self,
        settings: DemodSettings = DemodSettings(),
        fc: float = DEFAULT_FC,
        codebook: Optional[PilotCodebook] = None,
        sss_symbols: Optional[np.ndarray] = None,
        alt_settings: AltSyncSettings = AltSyncSettings(),
    ):
        self.settings = settings
        self.alt_settings = alt_settings
        self.fc = fc
        self.codebook = codebook or load_default()
        self.sss = default_sss_symbols() if sss_symbols is None else np.asarray(sss_symbols)
        self.known = self.codebook.pilot_lookup()
        self.known[1] = np.nan
        self.known[1, KL] = self.sss[KL]
        self.states: List[EqualizerState] = []

    def equalizer(self, Y_bar: np.ndarray, noise_var: float, H_ref: Optional[np.ndarray] = None) -> EqualizerState:
        """Channel estimate for one frame, optionally with a shared transfer function."""
        state = estimate_channel(Y_bar[1], self.sss, noise_var, self.settings)
        self.states.append(state)
        return state.with_transfer(H_ref) if H_ref is not None else state

    def average_channel(self, frames: Sequence[np.ndarray]) -> np.ndarray:
        """Transfer function averaged over the SSS estimates of several frames.

        Frames whose SSS is too weak are left out.

        Raises:
            EstimationError: If no frame gives a channel estimate.
        """
        states = []
        for frame in frames:
            Y_bar = ofdm_demod(frame)
            try:
                states.append(estimate_channel(Y_bar[1], self.sss, noise_variance(Y_bar), self.settings))
            except EstimationError as exc:
                logger.warning("Frame left out of the channel average: %s", exc)
        if not states:
            raise EstimationError("No frame gave a channel estimate to average.")
        logger.info("Averaged the transfer function over %d frames", len(states))
        return refine_channel(states)

    def identify_columns(self, Y: np.ndarray, noise_var: float) -> List[Optional[str]]:
        """Constellation family of every post-SSS symbol of a compensated frame."""
        labels: List[Optional[str]] = ["PSS", "SSS"] + [None] * (NSF - 2)
        for i in range(2, NSF):
            try:
                labels[i] = identify_constellation(Y[i, KLNP], noise_var, self.settings)
            except ValueError as exc:
                logger.warning("Symbol %d skipped: %s", i, exc)
        return labels

    def frame_sync(self, Y_tilde: np.ndarray, state: EqualizerState, noise_var: float) -> SyncEstimate:
        """Residual errors from the frame-level estimator, anchored at the SSS delay.

        Raises:
            EstimationError: If the offset scan ends on the edge of its range.
        """
        dbeta, phi_m0 = alt_residual_sync(
            Y_tilde, 0.0, state.tau_m1, noise_var, self.fc, self.codebook, self.alt_settings
        )
        return SyncEstimate(phi_m0, dbeta, state.tau_m1, dbeta, fc=self.fc)

    def estimate_symbols(
        self, Y_tilde: np.ndarray, noise: np.ndarray, tau_start: float
    ) -> Tuple[List[Optional[str]], Dict[int, SymbolEstimate]]:
        """Identify and estimate every symbol; returns labels and retained estimates."""
        labels: List[Optional[str]] = ["PSS", "SSS"] + [None] * (NSF - 2)
        estimates: Dict[int, SymbolEstimate] = {}
        sss = per_symbol_ml(Y_tilde[1], constellation("QPSK").points, self.known[1], noise, tau_start, self.settings)
        estimates[1] = sss
        hint = sss.tau
        mean_noise = float(np.nanmean(noise[KLNP]))
        for i in range(2, NSF):
            column = Y_tilde[i]
            derotated = column[KLNP] * np.exp(2j * np.pi * OFFSETS[KLNP] * F_SUB * hint)
            try:
                family = identify_constellation(derotated, mean_noise, self.settings)
            except ValueError as exc:
                logger.warning("Symbol %d skipped: %s", i, exc)
                continue
            labels[i] = family
            if family == COMPOSITE:
                continue
            names = ("QPSK", "4QAM") if family == CARD4 else (family,)
            fits = [
                per_symbol_ml(column, constellation(n).points, self.known[i], noise, hint, self.settings)
                for n in names
            ]
            best = max(fits, key=lambda e: e.loglik)
            if not best.converged:
                logger.debug("Symbol %d dropped: likelihood search did not converge", i)
                labels[i] = None
                continue
            estimates[i] = best
            hint = best.tau
        return labels, estimates

    def run(self, frame: np.ndarray, m: Optional[int] = None, H_ref: Optional[np.ndarray] = None) -> DecodedFrame:
        """Demodulate one coarsely compensated frame.

        Raises:
            EstimationError: If the SSS is too weak or too few symbols survive.
        """
        Y_bar = ofdm_demod(frame)
        noise_var = noise_variance(Y_bar)
        state = self.equalizer(Y_bar, noise_var, H_ref)
        Y_tilde = equalize(Y_bar, state, self.settings.h_floor)
        with np.errstate(divide="ignore"):
            noise = np.maximum(noise_var, 1e-12) / np.abs(state.Z_hat * state.H_hat) ** 2
        if self.settings.residual_sync == "frame":
            mean_noise = float(np.nanmean(noise[KLNP]))
            sync = self.frame_sync(Y_tilde, state, mean_noise)
            Y = compensate(Y_tilde, sync)
            labels = self.identify_columns(Y, mean_noise)
            logger.info("Frame %s: frame-level dbeta %.3e", m, sync.dbeta_c)
            return disambiguate_and_decode(Y, labels, sync, m, _snr_db(state, noise_var))
        labels, estimates = self.estimate_symbols(Y_tilde, noise, state.tau_m1)
        if len(estimates) < 2:
            raise EstimationError(f"Only {len(estimates)} symbols survived in frame {m}.")
        indices = np.array(sorted(estimates))
        try:
            sync = joint_fit(
                indices,
                [estimates[i].tau for i in indices],
                [estimates[i].phi for i in indices],
                self.fc,
                self.settings.gap_split,
            )
        except ValueError as exc:
            raise EstimationError(str(exc)) from exc
        Y = compensate(Y_tilde, sync)
        snr = _snr_db(state, noise_var)
        logger.info(
            "Frame %s: %d symbols retained, dbeta_c %.3e, snr %.1f dB", m, len(indices), sync.dbeta_c, snr
        )
        return disambiguate_and_decode(Y, labels, sync, m, snr)


def _snr_db(state: EqualizerState, noise_var: float) -> float:
    signal_power = state.g_hat * np.mean(np.abs(state.H_hat[KL]) ** 2) * len(KL) / NS
    return float(10 * np.log10(signal_power / noise_var)) if noise_var > 0 else float("inf")
