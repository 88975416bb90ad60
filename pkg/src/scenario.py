"""Scenario module.

Loads JSON scenario configurations, composes synthetic frame contents
(SSS, edge pilots, header, T-code and data columns), renders the capture
stream and persists the ground truth as JSON.
"""

from __future__ import annotations

import json
import logging
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np

from errors import FormatError
from formats import encode_symbols
from frame_model import (
    CONSTELLATION_LABELS,
    FRAME_PERIOD_SAMPLES,
    FS,
    NS,
    NSF,
    OFFSETS,
    build_frame_grid,
    channel_center,
    constellation,
)
from pilot_codes import PilotCodebook, load_default
from template_tcode import FIRST_ROW, KLNP, N_RANKS, N_ROWS, N_T, TCode, synthesize_tcode_region
from waveform_synth import (
    CaptureStream,
    ChannelParams,
    ClockModel,
    default_pss,
    default_sss_symbols,
    frame_start_sample,
    synth_capture,
    synth_frame,
)

logger = logging.getLogger(__name__)

COMPOSITE = "composite"
_QPSK = constellation("QPSK")


@dataclass(frozen=True)
class ChannelSettings:
    """Channel section of a scenario; ``tilt_db`` is the gain at the band edges."""

    beta: float = 0.0
    tau_los: float = 0.0
    g: float = 1.0
    theta: Optional[float] = 0.0
    snr_pre_db: Optional[float] = None
    tilt_db: float = 0.0


@dataclass(frozen=True)
class ModulationPlan:
    """How frame contents are drawn.

    Attributes:
        header_min, header_max: Inclusive range of header lengths in symbols.
        pure_qpsk_fraction: Share of frames whose every symbol is QPSK.
        data_labels: Labels drawn for the data columns of other frames.
        composite_fraction: Share of data columns mixing QPSK and 16QAM.
        tcode_pool: Number of distinct T-codes in circulation.
    """

    header_min: int = 4
    header_max: int = 20
    pure_qpsk_fraction: float = 0.5
    data_labels: Tuple[str, ...] = CONSTELLATION_LABELS
    composite_fraction: float = 0.0
    tcode_pool: int = 4

    def __post_init__(self):
        if not 0 <= self.header_min <= self.header_max <= N_ROWS - 1:
            raise ValueError(
                f"header range {self.header_min}..{self.header_max} outside 0..{N_ROWS - 1}"
            )
        unknown = set(self.data_labels) - set(CONSTELLATION_LABELS)
        if unknown or not self.data_labels:
            raise ValueError(f"data_labels has unknown labels {sorted(unknown)}")
        for name in ("pure_qpsk_fraction", "composite_fraction"):
            if not 0 <= getattr(self, name) <= 1:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.tcode_pool < 1:
            raise ValueError("tcode_pool must be at least 1")


@dataclass(frozen=True)
class ScenarioConfig:
    """A complete, seeded synthesis scenario."""

    seed: int = 0
    channel_center_hz: float = 11.325e9
    frames: int = 1
    occupancy: Any = 1.0
    duration_s: Optional[float] = None
    clock: ClockModel = field(default_factory=ClockModel)
    channel: ChannelSettings = field(default_factory=ChannelSettings)
    modulation: ModulationPlan = field(default_factory=ModulationPlan)
    template_seed: int = 11
    output: Dict[str, str] = field(default_factory=dict)

    def __post_init__(self):
        build_frame_grid(self.channel_center_hz)
        if self.frames < 1:
            raise ValueError("frames must be at least 1")
        if isinstance(self.occupancy, (list, tuple)):
            if len(self.occupancy) != self.frames:
                raise ValueError("occupancy list must have one entry per frame")
        elif not 0 <= float(self.occupancy) <= 1:
            raise ValueError("occupancy must be a fraction in [0, 1] or a list")

    def channel_params(self) -> ChannelParams:
        """Channel parameters with the tilted transfer function applied."""
        c = self.channel
        H = tilted_channel(c.tilt_db) if c.tilt_db else None
        return ChannelParams(
            beta=c.beta,
            tau_los=c.tau_los,
            H=H,
            g=c.g,
            theta=c.theta,
            snr_pre_db=c.snr_pre_db,
            fc=self.channel_center_hz,
        )

    def to_dict(self) -> Dict[str, Any]:
        """Plain-JSON view of the configuration."""
        out = asdict(self)
        out["modulation"]["data_labels"] = list(self.modulation.data_labels)
        return out


_SECTIONS = {"clock": ClockModel, "channel": ChannelSettings, "modulation": ModulationPlan}


def scenario_from_dict(data: Dict[str, Any], overrides: Optional[Dict[str, Any]] = None) -> ScenarioConfig:
    """Validate a parsed JSON document into a :class:`ScenarioConfig`.

    ``overrides`` uses dotted keys (``"channel.snr_pre_db"``) and wins over ``data``.

    Raises:
        ValueError: Naming the offending key.
    """
    data = json.loads(json.dumps(data))
    for key, value in (overrides or {}).items():
        section, _, name = key.rpartition(".")
        target = data.setdefault(section, {}) if section else data
        target[name] = value
    if "channel_index" in data:
        data["channel_center_hz"] = channel_center(int(data.pop("channel_index")))
    kwargs: Dict[str, Any] = {}
    known = set(ScenarioConfig.__dataclass_fields__)
    for key, value in data.items():
        if key not in known:
            raise ValueError(f"unknown scenario key '{key}'")
        if key in _SECTIONS:
            cls = _SECTIONS[key]
            if not isinstance(value, dict):
                raise ValueError(f"'{key}' must be an object")
            bad = set(value) - set(cls.__dataclass_fields__)
            if bad:
                raise ValueError(f"unknown key(s) {sorted(bad)} in '{key}'")
            if key == "modulation" and "data_labels" in value:
                value = dict(value, data_labels=tuple(value["data_labels"]))
            try:
                value = cls(**value)
            except (TypeError, ValueError) as exc:
                raise ValueError(f"'{key}': {exc}") from exc
        kwargs[key] = value
    try:
        return ScenarioConfig(**kwargs)
    except TypeError as exc:
        raise ValueError(str(exc)) from exc


def load_scenario(path: str, overrides: Optional[Dict[str, Any]] = None) -> ScenarioConfig:
    """Read a JSON scenario file.

    Raises:
        FormatError: On JSON syntax errors (with line) or invalid values.
    """
    with open(path, "r", encoding="utf-8") as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as exc:
            raise FormatError(f"{exc.msg} (column {exc.colno})", path=path, line=exc.lineno) from exc
    if not isinstance(data, dict):
        raise FormatError("top level must be a JSON object", path=path, line=1)
    try:
        return scenario_from_dict(data, overrides)
    except ValueError as exc:
        raise FormatError(str(exc), path=path) from exc


# ---- Frame contents ----


def tilted_channel(tilt_db: float) -> np.ndarray:
    """Transfer function with a gain linear in dB across the band, 1 at k = 0."""
    gain_db = tilt_db * OFFSETS / (NS // 2)
    return 10 ** (gain_db / 20)


def reference_template_matrix(seed: int) -> np.ndarray:
    """Seeded QPSK reference template over (I2, Klnp)."""
    rng = np.random.default_rng(seed)
    return _QPSK.points[rng.integers(0, 4, (N_ROWS, N_RANKS))]


def tcode_pool(count: int, seed: int) -> List[TCode]:
    """Seeded pool of distinct random T-codes."""
    rng = np.random.default_rng(seed + 1)
    codes: List[TCode] = []
    while len(codes) < count:
        code = TCode(rng.choice([-1, 1], N_T))
        if code not in codes:
            codes.append(code)
    return codes


@dataclass
class FrameContent:
    """Information symbols of one synthetic frame plus what generated them."""

    symbols: np.ndarray
    labels: List[str]
    i_hm: int
    tcode: int
    kind: str

    @property
    def matrix(self) -> np.ndarray:
        """(302, 1024) symbol matrix with the PSS row left at zero."""
        X = np.zeros((NSF, NS), dtype=complex)
        X[1:] = self.symbols
        return X


def compose_frame(
    plan: ModulationPlan,
    template: np.ndarray,
    codes: Sequence[TCode],
    codebook: PilotCodebook,
    rng: np.random.Generator,
) -> FrameContent:
    """Draw the contents of one frame.

    Header columns are random QPSK. Every later QPSK column is the template
    flipped by the frame's tiled T-code; other columns carry random points.
    """
    grid = build_frame_grid(11.325e9)
    X = np.zeros((NSF, NS), dtype=complex)
    labels = ["PSS", "SSS"] + [""] * N_ROWS
    X[1] = default_sss_symbols()
    pure = rng.random() < plan.pure_qpsk_fraction
    header = int(rng.integers(plan.header_min, plan.header_max + 1))
    i_hm = FIRST_ROW - 1 + header
    code_index = int(rng.integers(0, len(codes)))
    qpsk_cols = []
    for i in range(FIRST_ROW, NSF):
        if i <= i_hm or pure:
            label = "QPSK"
        elif rng.random() < plan.composite_fraction:
            label = COMPOSITE
        else:
            label = str(rng.choice(plan.data_labels))
        labels[i] = label
        if label == COMPOSITE:
            points = np.where(
                rng.random(len(grid.Kl)) < 0.5,
                _QPSK.points[rng.integers(0, 4, len(grid.Kl))],
                constellation("16QAM").points[rng.integers(0, 16, len(grid.Kl))],
            )
        else:
            pts = constellation(label).points
            points = pts[rng.integers(0, len(pts), len(grid.Kl))]
        X[i, grid.Kl] = points
        if label == "QPSK" and i > i_hm:
            qpsk_cols.append(i)
    if qpsk_cols:
        region = synthesize_tcode_region(codes[code_index], qpsk_cols)
        rows = np.asarray(qpsk_cols) - FIRST_ROW
        X[np.ix_(qpsk_cols, KLNP)] = template[rows] * region.values[rows]
    X[FIRST_ROW:, grid.Kp] = codebook.pilot_matrix().T
    kind = "pure" if pure else "data"
    return FrameContent(X[1:], labels, i_hm, code_index, kind)


# ---- Ground truth ----


@dataclass
class GroundTruth:
    """What the synthesizer put into a capture."""

    config: Dict[str, Any]
    impairments: Dict[str, float]
    frames: List[Dict[str, Any]] = field(default_factory=list)

    def save(self, path: str) -> None:
        """Write the ground truth as indented JSON."""
        with open(path, "w", encoding="utf-8") as f:
            json.dump(asdict(self), f, indent=4, sort_keys=True)

    @classmethod
    def load(cls, path: str) -> "GroundTruth":
        """Read a ground-truth file.

        Raises:
            FormatError: If the file is not valid JSON of the expected shape.
        """
        try:
            with open(path, "r", encoding="utf-8") as f:
                data = json.load(f)
            return cls(data["config"], data["impairments"], data["frames"])
        except json.JSONDecodeError as exc:
            raise FormatError(exc.msg, path=path, line=exc.lineno) from exc
        except (KeyError, TypeError) as exc:
            raise FormatError(f"missing ground-truth field {exc}", path=path) from exc

    def symbol_matrix(self, n: int) -> Tuple[np.ndarray, List[str]]:
        """Rebuild the (302, 1024) symbol matrix and labels of frame record ``n``."""
        from formats import decode_symbols

        record = self.frames[n]
        grid = build_frame_grid(self.config["channel_center_hz"])
        X = np.zeros((NSF, NS), dtype=complex)
        X[1, grid.Kl] = default_sss_symbols()[grid.Kl]
        for i, (label, row) in enumerate(zip(record["labels"], record["symbols"]), start=FIRST_ROW):
            X[i, grid.Kl] = decode_symbols(row, label if label != COMPOSITE else "32QAM")
        return X, record["labels"]


def _occupied_slots(config: ScenarioConfig, rng: np.random.Generator) -> List[bool]:
    if isinstance(config.occupancy, (list, tuple)):
        return [bool(v) for v in config.occupancy]
    p = float(config.occupancy)
    if p >= 1:
        return [True] * config.frames
    return list(rng.random(config.frames) < p)


def _record(content: FrameContent, slot: int, start: int) -> Dict[str, Any]:
    kl = build_frame_grid(11.325e9).Kl
    rows = []
    for i in range(FIRST_ROW, NSF):
        label = content.labels[i]
        values = content.symbols[i - 1, kl]
        rows.append(encode_symbols(values, label if label != COMPOSITE else "32QAM"))
    return {
        "slot": slot,
        "start_sample": start,
        "kind": content.kind,
        "i_hm": content.i_hm,
        "tcode": content.tcode,
        "labels": content.labels[FIRST_ROW:],
        "symbols": rows,
    }


def build_scenario(config: ScenarioConfig) -> Tuple[CaptureStream, GroundTruth]:
    """Render the capture stream and ground truth of a scenario.

    The seed fixes every random draw, so reruns are bit-identical.
    """
    rng = np.random.default_rng(config.seed)
    params = config.channel_params()
    template = reference_template_matrix(config.template_seed)
    codes = tcode_pool(config.modulation.tcode_pool, config.template_seed)
    codebook = load_default()
    pss = default_pss()
    occupied = _occupied_slots(config, rng)
    frames: List[Optional[np.ndarray]] = []
    records = []
    for slot, used in enumerate(occupied):
        if not used:
            frames.append(None)
            continue
        content = compose_frame(config.modulation, template, codes, codebook, rng)
        frames.append(synth_frame(content.symbols, pss))
        records.append(_record(content, slot, frame_start_sample(slot)))
    duration = config.duration_s
    if duration is None:
        duration = config.frames * FRAME_PERIOD_SAMPLES / FS
    stream = synth_capture(frames, config.clock, params, duration, rng)
    impairments = {
        "n_m": params.delay_samples(config.clock),
        "beta_s": params.beta_s(config.clock),
        "beta_c": params.beta_c(config.clock),
        "phi_m": params.frame_phase(config.clock),
    }
    logger.info(
        "Scenario seed %d: %d of %d slots occupied", config.seed, len(records), config.frames
    )
    return stream, GroundTruth(config.to_dict(), impairments, records)
