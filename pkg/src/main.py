"""Command-line entry point.

Subcommands wrap the toolkit modules: ``synth`` renders a scenario to an IQ
capture, ``acquire`` and ``demod`` process captures, ``template`` and
``tcode`` analyse decoded frames, ``pilots-discover`` averages a capture's
frames, and ``bounds`` / ``gain`` evaluate the precision and gain formulas.
Every successful command prints one JSON summary record on stdout.
"""

import argparse
import json
import logging
import sys
from typing import Dict, List, Optional

import numpy as np

from acquisition import AcquisitionSettings, Acquirer
from analysis import (
    REPLICA_KINDS,
    FrameStats,
    bound_curves,
    build_replica_spectrum,
    crb_toa,
    empirical_gain,
    frame_gain_estimate,
    header_histogram,
    invariant_symbol_average,
    processing_gain,
    write_bounds_csv,
    zzb_knee,
)
from demod import RESIDUAL_SYNC_MODES, DecodedFrame, Demodulator, DemodSettings
from errors import EstimationError
from formats import (
    read_decoded_frames,
    read_template,
    write_averages,
    write_decoded_frames,
    write_template,
    write_tcodes,
)
from frame_model import FS
from scenario import ScenarioConfig, build_scenario, load_scenario, scenario_from_dict
from template_tcode import (
    DEFAULT_THRESHOLD,
    build_reference_template,
    detect_header_boundary,
    deviation,
)
from waveform_synth import read_iq, write_iq

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_INPUT = 2
EXIT_NUMERIC = 3


class UsageError(Exception):
    """Raised for malformed command lines."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# ---- Helpers ----


def _emit(summary: Dict) -> None:
    print(json.dumps(summary, sort_keys=True))


def _settings(args) -> AcquisitionSettings:
    return AcquisitionSettings(
        doppler_min_hz=args.doppler_min,
        doppler_max_hz=args.doppler_max,
        doppler_step_hz=args.doppler_step,
        pfa=args.pfa,
    )


def _load_stream(args):
    return read_iq(args.iq, args.meta)


def _demod_settings(args) -> DemodSettings:
    return DemodSettings(residual_sync=args.sync)


def decode_capture(
    stream,
    settings: AcquisitionSettings,
    demod_settings: DemodSettings = DemodSettings(),
    shared_channel: bool = False,
) -> List[DecodedFrame]:
    """Acquire and demodulate every frame of a capture.

    With ``shared_channel`` every frame is equalized with the transfer
    function averaged over all acquired frames. Frames whose demodulation
    fails are skipped with a warning.

    Raises:
        EstimationError: If no frame could be decoded.
    """
    acquirer = Acquirer(settings, stream.center_frequency)
    demodulator = Demodulator(demod_settings, fc=stream.center_frequency)
    acquired = acquirer.acquire_stream(stream)
    H_ref = None
    if shared_channel and acquired:
        H_ref = demodulator.average_channel([samples for _, samples in acquired])
    frames = []
    for m, (result, samples) in enumerate(acquired):
        try:
            frames.append(demodulator.run(samples, m, H_ref))
        except EstimationError as exc:
            logger.warning("Frame %d at lag %d not decoded: %s", m, result.n_hat, exc)
    if not frames:
        raise EstimationError("No frame in the capture could be decoded.")
    return frames


# ---- Commands ----


def cmd_synth(args) -> Dict:
    """Render a scenario to an IQ file, its sidecar and a ground-truth file."""
    overrides = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.snr_db is not None:
        overrides["channel.snr_pre_db"] = args.snr_db
    if args.config:
        config = load_scenario(args.config, overrides)
    else:
        config = scenario_from_dict({}, overrides) if overrides else ScenarioConfig()
    stream, truth = build_scenario(config)
    iq_path = args.out + ".iq"
    meta_path = write_iq(iq_path, stream, args.meta)
    truth_path = args.out + ".truth.json"
    truth.save(truth_path)
    return {
        "command": "synth",
        "iq": iq_path,
        "meta": meta_path,
        "truth": truth_path,
        "samples": len(stream),
        "frames": len(truth.frames),
        "seed": config.seed,
    }


def cmd_acquire(args) -> Dict:
    """Detect every frame of a capture."""
    stream = _load_stream(args)
    acquirer = Acquirer(_settings(args), stream.center_frequency)
    detections = [
        {
            "n_hat": result.n_hat,
            "beta_hat": result.beta_hat,
            "peak": result.peak,
            "threshold": result.threshold,
            "snr_pre_est": result.snr_pre_est,
        }
        for result, _ in acquirer.acquire_stream(stream)
    ]
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            json.dump(detections, f, indent=4)
    return {"command": "acquire", "detections": detections}


def cmd_demod(args) -> Dict:
    """Decode every frame of a capture to a decoded-frame file."""
    frames = decode_capture(
        _load_stream(args), _settings(args), _demod_settings(args), args.shared_channel
    )
    write_decoded_frames(args.out, frames)
    return {
        "command": "demod",
        "out": args.out,
        "frames": len(frames),
        "retained": [len(f.retained()) for f in frames],
    }


def cmd_template(args) -> Dict:
    """Build the reference template from decoded frames."""
    frames = read_decoded_frames(args.frames)
    template = build_reference_template(frames)
    write_template(args.out, template)
    return {
        "command": "template",
        "out": args.out,
        "frames": template.frame_count,
        "ties": int(template.ties.sum()),
    }


def cmd_tcode(args) -> Dict:
    """Find header boundaries and T-codes of decoded frames."""
    frames = read_decoded_frames(args.frames)
    template = read_template(args.template)
    codes = []
    boundaries: List[Optional[int]] = []
    stats = []
    for n, frame in enumerate(frames):
        D = deviation(frame, template)
        boundary = detect_header_boundary(D, args.threshold)
        boundaries.append(boundary.i_hm)
        stats.append(FrameStats.from_boundary(D, boundary.i_hm))
        if boundary.tcode is not None:
            codes.append((frame.m if frame.m is not None else n, boundary.tcode))
    write_tcodes(args.out, codes)
    histogram = header_histogram(boundaries)
    for line in histogram:
        logger.info(line)
    return {
        "command": "tcode",
        "out": args.out,
        "frames": len(frames),
        "codes": len(codes),
        "distinct_codes": len(set(code for _, code in codes)),
        "boundaries": boundaries,
        "stacking_factor": float(np.mean([s.stacking_factor for s in stats])) if stats else 0.0,
    }


def cmd_pilots_discover(args) -> Dict:
    """Average a capture's phase-aligned frames and flag invariant cells."""
    frames = decode_capture(
        _load_stream(args), _settings(args), _demod_settings(args), args.shared_channel
    )
    result = invariant_symbol_average(frames, args.threshold)
    write_averages(args.out, result)
    return {
        "command": "pilots-discover",
        "out": args.out,
        "frames": result.frame_count,
        "flagged_cells": int(result.flags.sum()),
        "flagged_subcarriers": [int(k) for k in result.flagged_subcarriers()],
        "threshold": result.threshold,
        "low_confidence": result.low_confidence,
    }


def cmd_bounds(args) -> Dict:
    """Write CRB and ZZB curves for one replica as CSV."""
    spectrum = build_replica_spectrum(args.replica, args.bw_hz, args.center_hz)
    snr = np.arange(args.snr_min, args.snr_max + args.snr_step / 2, args.snr_step)
    curves = bound_curves(spectrum, snr)
    write_bounds_csv(args.out, [curves])
    return {
        "command": "bounds",
        "out": args.out,
        "replica": curves.label,
        "knee_db": zzb_knee(curves),
        "energy": spectrum.total_energy,
        "rms_bandwidth_hz": float(np.sqrt(spectrum.ms_bandwidth)),
        "crb_at_max_s": float(crb_toa(spectrum, args.snr_max)),
    }


def cmd_gain(args) -> Dict:
    """Evaluate the processing-gain formula, a Monte-Carlo check or a corpus estimate."""
    summary: Dict = {"command": "gain"}
    if args.frames:
        if not args.template:
            raise UsageError("--frames requires --template")
        template = read_template(args.template)
        stats = []
        for frame in read_decoded_frames(args.frames):
            D = deviation(frame, template)
            stats.append(FrameStats.from_boundary(D, detect_header_boundary(D).i_hm))
        estimate = frame_gain_estimate(stats, args.snr_db)
        summary.update(
            N_bar=estimate.N_bar,
            M_bar=estimate.M_bar,
            mu_bar=estimate.mu_bar,
            gain_db=estimate.gain_db,
            breakdown=estimate.breakdown,
        )
        return summary
    gain, gain_db = processing_gain(args.n, args.mu)
    summary.update(N=args.n, mu=args.mu, gain=gain, gain_db=gain_db)
    if args.trials:
        rng = np.random.default_rng(args.seed or 0)
        measured = empirical_gain(int(args.n), args.mu, args.trials, rng=rng)
        summary["empirical_gain_db"] = float(10 * np.log10(measured))
    return summary


COMMANDS = {
    "synth": cmd_synth,
    "acquire": cmd_acquire,
    "demod": cmd_demod,
    "template": cmd_template,
    "tcode": cmd_tcode,
    "pilots-discover": cmd_pilots_discover,
    "bounds": cmd_bounds,
    "gain": cmd_gain,
}


# ---- Parser ----


def build_parser() -> argparse.ArgumentParser:
    """Argument parser with one subcommand per entry of ``COMMANDS``."""
    common = _Parser(add_help=False)
    common.add_argument("-v", "--verbose", action="count", default=0, help="-v info, -vv debug")

    capture = _Parser(add_help=False)
    capture.add_argument("--iq", required=True, help="IQ capture file")
    capture.add_argument("--meta", default=None, help="sidecar file (default <iq>.meta)")
    capture.add_argument("--pfa", type=float, default=1e-6)
    capture.add_argument("--doppler-min", type=float, default=-283e3, help="Hz")
    capture.add_argument("--doppler-max", type=float, default=283e3, help="Hz")
    capture.add_argument("--doppler-step", type=float, default=2e3, help="Hz")

    decoding = _Parser(add_help=False)
    decoding.add_argument(
        "--sync", choices=RESIDUAL_SYNC_MODES, default="per-symbol", help="residual synchronization"
    )
    decoding.add_argument(
        "--shared-channel", action="store_true", help="equalize with the channel averaged over all frames"
    )

    parser = _Parser(prog="kuofdm", description="Ku-band OFDM frame toolkit")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", parents=[common], help="render a scenario")
    p.add_argument("--config", default=None, help="JSON scenario file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--snr-db", type=float, default=None)
    p.add_argument("--out", default="capture", help="output prefix")
    p.add_argument("--meta", default=None)

    p = sub.add_parser("acquire", parents=[common, capture], help="detect frames")
    p.add_argument("--out", default=None, help="JSON detections file")

    p = sub.add_parser("demod", parents=[common, capture, decoding], help="decode frames")
    p.add_argument("--out", default="decoded.txt")

    p = sub.add_parser("template", parents=[common], help="build the reference template")
    p.add_argument("--frames", required=True, help="decoded-frame file")
    p.add_argument("--out", default="template.txt")

    p = sub.add_parser("tcode", parents=[common], help="extract T-codes")
    p.add_argument("--frames", required=True)
    p.add_argument("--template", required=True)
    p.add_argument("--threshold", type=float, default=DEFAULT_THRESHOLD)
    p.add_argument("--out", default="tcodes.txt")

    p = sub.add_parser("pilots-discover", parents=[common, capture, decoding], help="average frames")
    p.add_argument("--threshold", type=float, default=None, help="|average| flag level")
    p.add_argument("--out", default="averages.txt")

    p = sub.add_parser("bounds", parents=[common], help="TOA precision bounds")
    p.add_argument("--replica", choices=REPLICA_KINDS, default="pss-sss")
    p.add_argument("--bw-hz", type=float, default=FS)
    p.add_argument("--center-hz", type=float, default=None)
    p.add_argument("--snr-min", type=float, default=-30.0)
    p.add_argument("--snr-max", type=float, default=10.0)
    p.add_argument("--snr-step", type=float, default=0.5)
    p.add_argument("--out", default="bounds.csv")

    p = sub.add_parser("gain", parents=[common], help="processing gain")
    p.add_argument("--n", type=float, default=318912)
    p.add_argument("--mu", type=float, default=1.0)
    p.add_argument("--trials", type=int, default=0, help="Monte-Carlo trials (0 skips)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--frames", default=None, help="decoded-frame corpus")
    p.add_argument("--template", default=None)
    p.add_argument("--snr-db", type=float, default=None)
    return parser


def main(argv=None) -> int:
    """Run one subcommand and return its exit status."""
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    level = [logging.WARNING, logging.INFO, logging.DEBUG][min(args.verbose, 2)]
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        _emit(COMMANDS[args.command](args))
    except UsageError as exc:
        logger.error("%s", exc)
        return EXIT_USAGE
    except (EstimationError, FloatingPointError) as exc:
        logger.error("%s", exc)
        return EXIT_NUMERIC
    except (OSError, ValueError) as exc:
        logger.error("%s", exc)
        return EXIT_INPUT
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
