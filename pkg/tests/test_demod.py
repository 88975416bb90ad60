"""Test the demodulation chain."""

import os
import sys
import unittest

import numpy as np

sys.path.insert(
    0, os.path.abspath(os.path.join(os.path.dirname(__file__), "..", "src"))
)

from acquisition import Acquirer, AcquisitionSettings, acquire
from demod import (
    CARD4,
    COMPOSITE,
    KL,
    KLNP,
    AltSyncSettings,
    Demodulator,
    DemodSettings,
    SyncEstimate,
    compensate,
    alt_residual_sync,
    disambiguate_and_decode,
    equalize,
    estimate_channel,
    estimate_delay_samples,
    identify_constellation,
    joint_fit,
    noise_variance,
    ofdm_demod,
    per_symbol_ml,
    refine_channel,
    unwrap_phases,
)
from errors import EstimationError
from frame_model import FRAME_SAMPLES, FS, GUTTER, NS, NSF, OFFSETS, SLOT_SAMPLES, constellation
from pilot_codes import load_default
from scenario import (
    ChannelSettings,
    ModulationPlan,
    ScenarioConfig,
    build_scenario,
    compose_frame,
    reference_template_matrix,
    tcode_pool,
    tilted_channel,
)
from waveform_synth import ChannelParams, ClockModel, apply_channel, default_pss, default_sss_symbols, synth_frame

TSYM = SLOT_SAMPLES / FS
FC = 11.325e9


def random_points(rng, label, n):
    """n random points of a constellation."""
    points = constellation(label).points
    return points[rng.integers(0, len(points), n)]


def pure_frame(seed=0):
    """Symbols of a pure-QPSK synthetic frame with a five-symbol header."""
    plan = ModulationPlan(header_min=5, header_max=5, pure_qpsk_fraction=1.0)
    return compose_frame(
        plan, reference_template_matrix(11), tcode_pool(2, 11), load_default(), np.random.default_rng(seed)
    )


def higher_order_frame(seed=0):
    """Symbols of a frame whose every post-SSS symbol is 16QAM or 32QAM."""
    plan = ModulationPlan(header_min=0, header_max=0, pure_qpsk_fraction=0.0, data_labels=("16QAM", "32QAM"))
    return compose_frame(
        plan, reference_template_matrix(11), tcode_pool(2, 11), load_default(), np.random.default_rng(seed)
    )


class TestTransformAndChannel(unittest.TestCase):
    """Test OFDM demodulation, noise and channel estimation."""

    def test_ofdm_demod_inverts_synthesis(self):
        """Verify a noiseless frame demodulates to its symbols."""
        content = pure_frame()
        Y = ofdm_demod(synth_frame(content.symbols, default_pss()))
        self.assertTrue(np.all(np.isnan(Y[0])))
        np.testing.assert_allclose(Y[1:, KL], content.symbols[:, KL], atol=1e-9)

    def test_wrong_frame_length(self):
        """Ensure a truncated frame raises ValueError."""
        with self.assertRaises(ValueError):
            ofdm_demod(np.zeros(1000, dtype=complex))

    def test_noise_variance_from_gutter(self):
        """Verify the gutter bins give the noise variance."""
        rng = np.random.default_rng(1)
        Y = np.zeros((NSF, NS), dtype=complex)
        shape = (NSF, len(GUTTER))
        Y[:, GUTTER] = np.sqrt(0.25) * (rng.standard_normal(shape) + 1j * rng.standard_normal(shape))
        self.assertAlmostEqual(noise_variance(Y) / 0.5, 1.0, delta=0.1)

    def test_delay_from_ratios(self):
        """Verify a fractional delay is recovered from pure phase ratios."""
        d = OFFSETS[KL]
        ratios = np.exp(-2j * np.pi * d * 2.3 / NS)
        self.assertAlmostEqual(estimate_delay_samples(ratios, d), 2.3, places=4)

    def test_channel_identity(self):
        """Verify an undistorted SSS gives a flat channel and unit gain."""
        sss = default_sss_symbols()
        state = estimate_channel(sss, sss)
        np.testing.assert_allclose(state.H_hat[KL], 1.0, atol=1e-6)
        self.assertAlmostEqual(state.g_hat, 1.0, places=6)
        self.assertAlmostEqual(state.tau_m1 * FS, 0.0, places=4)

    def test_channel_delay_and_gain(self):
        """Verify a delayed, amplified SSS is split into delay and frame constant."""
        sss = default_sss_symbols()
        Y = 2 * sss * np.exp(-2j * np.pi * OFFSETS * 3 / NS)
        state = estimate_channel(Y, sss)
        self.assertAlmostEqual(state.tau_m1 * FS, 3.0, places=4)
        self.assertAlmostEqual(state.g_hat, 4.0, places=4)
        self.assertAlmostEqual(abs(state.Z_hat), 2.0, places=3)

    def test_weak_sss_raises(self):
        """Ensure an empty SSS raises EstimationError."""
        with self.assertRaises(EstimationError):
            estimate_channel(np.zeros(NS, dtype=complex), default_sss_symbols(), 1.0)

    def test_equalize_masks_gutter(self):
        """Verify equalization divides by Z H and blanks the gutter."""
        sss = default_sss_symbols()
        state = estimate_channel(2 * sss, sss)
        Y = np.tile(2 * sss, (3, 1))
        out = equalize(Y, state)
        np.testing.assert_allclose(out[:, KL], np.tile(sss[KL], (3, 1)), atol=1e-6)
        self.assertTrue(np.all(np.isnan(out[:, GUTTER])))


# --- Identification ----


class TestIdentifyConstellation(unittest.TestCase):
    """Test constellation identification by clustering."""

    def setUp(self):
        """A seeded generator."""
        self.rng = np.random.default_rng(2)

    def test_cardinality_four(self):
        """Verify QPSK and 4QAM both report the cardinality-4 family."""
        self.assertEqual(identify_constellation(random_points(self.rng, "QPSK", 1004)), CARD4)
        self.assertEqual(identify_constellation(random_points(self.rng, "4QAM", 1004)), CARD4)

    def test_higher_orders(self):
        """Verify 16QAM and 32QAM are named."""
        self.assertEqual(identify_constellation(random_points(self.rng, "16QAM", 1004)), "16QAM")
        self.assertEqual(identify_constellation(random_points(self.rng, "32QAM", 1004)), "32QAM")

    def test_clean_columns_always_named(self):
        """Verify 100 noiseless columns of every constellation are all identified."""
        expected = {"QPSK": CARD4, "4QAM": CARD4, "16QAM": "16QAM", "32QAM": "32QAM"}
        for label, family in expected.items():
            names = [identify_constellation(random_points(self.rng, label, 1004)) for _ in range(100)]
            self.assertEqual(names.count(family), 100, label)

    def test_noisy_qpsk(self):
        """Verify QPSK at 20 dB is still recognised."""
        values = random_points(self.rng, "QPSK", 1004)
        noise = 0.1 * (self.rng.standard_normal(1004) + 1j * self.rng.standard_normal(1004)) / np.sqrt(2)
        self.assertEqual(identify_constellation(values + noise, 0.01), CARD4)

    def test_eight_phases_are_composite(self):
        """Verify an eight-phase column is reported as composite."""
        values = np.exp(2j * np.pi * self.rng.integers(0, 8, 1004) / 8)
        self.assertEqual(identify_constellation(values), COMPOSITE)

    def test_too_few_values(self):
        """Ensure a mostly masked column raises ValueError."""
        values = np.full(1004, np.nan, dtype=complex)
        values[:50] = random_points(self.rng, "QPSK", 50)
        with self.assertRaises(ValueError):
            identify_constellation(values)


# --- Residual synchronization ----


class TestResidualSync(unittest.TestCase):
    """Test per-symbol ML, the joint fit and compensation."""

    def test_per_symbol_ml_recovers_delay_and_phase(self):
        """Verify a rotated, delayed QPSK symbol is resolved up to the QPSK ambiguity."""
        rng = np.random.default_rng(3)
        X = np.full(NS, np.nan, dtype=complex)
        X[KL] = random_points(rng, "QPSK", len(KL))
        column = X * np.exp(-2j * np.pi * OFFSETS * 1.5 / NS + 0.1j)
        known = np.full(NS, np.nan, dtype=complex)
        noise = np.full(NS, 1e-3)
        estimate = per_symbol_ml(column, constellation("QPSK").points, known, noise, 1.5 / FS)
        self.assertAlmostEqual(estimate.tau * FS, 1.5, delta=0.01)
        offset = (estimate.phi - 0.1 + np.pi / 4) % (np.pi / 2) - np.pi / 4
        self.assertAlmostEqual(offset, 0.0, delta=0.01)

    def test_known_cells_fix_the_phase(self):
        """Verify known cells remove the quarter-turn ambiguity."""
        rng = np.random.default_rng(4)
        X = np.full(NS, np.nan, dtype=complex)
        X[KL] = random_points(rng, "QPSK", len(KL))
        known = np.full(NS, np.nan, dtype=complex)
        known[KL[:100]] = X[KL[:100]]
        column = X * np.exp(1.2j)
        estimate = per_symbol_ml(column, constellation("QPSK").points, known, np.full(NS, 1e-3), 0.0)
        self.assertAlmostEqual(estimate.phi, 1.2, delta=0.01)

    def test_unwrap_linear_phase(self):
        """Verify wrapped linear phases are unwrapped."""
        indices = np.arange(2, 300, 3)
        truth = 0.4 * indices
        wrapped = (truth + np.pi) % (2 * np.pi) - np.pi
        np.testing.assert_allclose(unwrap_phases(indices, wrapped) - truth, wrapped[0] - truth[0], atol=1e-9)

    def test_joint_fit_exact(self):
        """Verify exact per-symbol estimates give back the model parameters."""
        indices = np.arange(1, NSF, 2)
        tau = 2e-9 + indices * TSYM * 3e-7
        phi = 0.3 - 2 * np.pi * TSYM * FC * indices * 1e-7
        phi = (phi + np.pi) % (2 * np.pi) - np.pi
        sync = joint_fit(indices, tau, phi, FC)
        self.assertAlmostEqual(sync.dbeta_c, 1e-7, delta=1e-12)
        self.assertAlmostEqual(sync.dbeta_s, 3e-7, delta=1e-12)
        self.assertAlmostEqual(sync.tau_m0, 2e-9, delta=1e-15)
        self.assertAlmostEqual(sync.phi_m0, 0.3, places=9)

    def test_joint_fit_needs_two_symbols(self):
        """Ensure a single symbol index raises ValueError."""
        with self.assertRaises(ValueError):
            joint_fit([5, 5], [0.0, 0.0], [0.0, 0.0])

    def test_compensate_identity_and_inverse(self):
        """Verify zero parameters change nothing and the model is undone exactly."""
        rng = np.random.default_rng(5)
        X = rng.standard_normal((NSF, NS)) + 1j * rng.standard_normal((NSF, NS))
        np.testing.assert_array_equal(compensate(X, SyncEstimate()), X)
        sync = SyncEstimate(0.2, 5e-8, 1e-9, 5e-8)
        i = np.arange(NSF)[:, None]
        impaired = X * np.exp(1j * sync.phi_at(i) - 2j * np.pi * OFFSETS * (FS / NS) * sync.tau_at(i))
        np.testing.assert_allclose(compensate(impaired, sync), X, atol=1e-9)


class TestAlternateSync(unittest.TestCase):
    """Test the frame-level residual estimator and multi-frame channel averaging."""

    def test_recovers_frequency_offset(self):
        """Verify a common offset factor and phase are found from the loaded cells."""
        X = pure_frame(8).matrix
        i = np.arange(NSF)[:, None]
        d = OFFSETS[None, :]
        phase = 0.4 - 2 * np.pi * (FC + d * FS / NS) * i * TSYM * 5e-8
        Y = X * np.exp(1j * phase)
        settings = AltSyncSettings(rows=tuple(range(2, 60)))
        dbeta, phi0 = alt_residual_sync(Y, 0.4, 0.0, 1e-3, FC, load_default(), settings)
        self.assertAlmostEqual(dbeta, 5e-8, delta=2e-9)
        self.assertAlmostEqual(phi0, 0.4, delta=0.01)

    def test_scan_edge_raises(self):
        """Ensure an offset beyond the scan range raises EstimationError."""
        X = pure_frame(9).matrix
        i = np.arange(NSF)[:, None]
        d = OFFSETS[None, :]
        Y = X * np.exp(-2j * np.pi * (FC + d * FS / NS) * i * TSYM * 2.6e-7)
        settings = AltSyncSettings(rows=tuple(range(2, 12)))
        with self.assertRaises(EstimationError):
            alt_residual_sync(Y, 0.0, 0.0, 1e-3, FC, load_default(), settings)

    def test_recovers_offset_on_higher_order_rows(self):
        """Verify the offset is found when every symbol is 16QAM or 32QAM."""
        X = higher_order_frame(12).matrix
        i = np.arange(NSF)[:, None]
        d = OFFSETS[None, :]
        Y = X * np.exp(1j * (-0.2 - 2 * np.pi * (FC + d * FS / NS) * i * TSYM * 5e-8))
        settings = AltSyncSettings(rows=tuple(range(2, 40)))
        dbeta, phi0 = alt_residual_sync(Y, -0.2, 0.0, 1e-3, FC, load_default(), settings)
        self.assertAlmostEqual(dbeta, 5e-8, delta=2e-9)
        self.assertAlmostEqual(phi0, -0.2, delta=0.01)

    def test_uses_every_subcarrier_by_default(self):
        """Verify the default settings keep every loaded subcarrier."""
        self.assertEqual(AltSyncSettings().subcarrier_stride, 1)

    def test_average_channel_over_frames(self):
        """Verify the averaged transfer function follows a tilted channel."""
        H = tilted_channel(3.0)
        frames = [
            apply_channel(
                synth_frame(pure_frame(seed).symbols, default_pss()),
                ClockModel(),
                ChannelParams(H=H, theta=0.5 * seed),
            ).samples[:FRAME_SAMPLES]
            for seed in (13, 14)
        ]
        frames.append(np.zeros(FRAME_SAMPLES, dtype=complex))
        H_ref = Demodulator().average_channel(frames)
        self.assertEqual(H_ref[0], 1.0)
        np.testing.assert_allclose(H_ref[KL], H[KL], atol=2e-2)

    def test_average_channel_needs_a_usable_frame(self):
        """Ensure averaging only silent frames raises EstimationError."""
        with self.assertRaises(EstimationError):
            Demodulator().average_channel([np.zeros(FRAME_SAMPLES, dtype=complex)])

    def test_refine_channel_averages(self):
        """Verify transfer estimates are averaged and renormalised at k = 0."""
        sss = default_sss_symbols()
        a = estimate_channel(sss, sss)
        b = a.with_transfer(np.full(NS, 3.0, dtype=complex))
        H = refine_channel([a, b])
        self.assertEqual(H[0], 1.0)
        np.testing.assert_allclose(H[KL], 1.0, atol=1e-6)
        with self.assertRaises(ValueError):
            refine_channel([])


# --- Decisions and the full chain ----


class TestDecode(unittest.TestCase):
    """Test QPSK/4QAM disambiguation and the demodulator."""

    def test_disambiguation(self):
        """Verify a 45-degree rotated cardinality-4 column is 4QAM."""
        rng = np.random.default_rng(6)
        Y = np.zeros((NSF, NS), dtype=complex)
        Y[1, KLNP] = random_points(rng, "QPSK", len(KLNP))
        Y[2, KLNP] = random_points(rng, "QPSK", len(KLNP))
        Y[3, KLNP] = random_points(rng, "4QAM", len(KLNP))
        labels = ["PSS", "SSS", CARD4, CARD4] + [None] * (NSF - 4)
        frame = disambiguate_and_decode(Y, labels, m=1)
        self.assertEqual(frame.labels[2:4], ["QPSK", "4QAM"])
        self.assertEqual(frame.retained(), [2, 3])
        np.testing.assert_array_equal(frame.X_hat[2:4, KLNP], Y[2:4, KLNP])

    def test_settings_are_kept(self):
        """Verify the demodulator keeps its settings."""
        settings = DemodSettings(min_subcarriers=50)
        self.assertEqual(Demodulator(settings).settings.min_subcarriers, 50)

    def test_full_chain_on_noiseless_frame(self):
        """Verify a clean frame decodes to its transmitted QPSK symbols."""
        content = pure_frame(7)
        frame = synth_frame(content.symbols, default_pss())
        decoded = Demodulator().run(frame, m=0)
        retained = decoded.retained()
        self.assertGreater(len(retained), 280)
        self.assertTrue(all(decoded.labels[i] == "QPSK" for i in retained))
        X = content.matrix
        for i in retained:
            np.testing.assert_array_equal(decoded.X_hat[i, KLNP], X[i, KLNP])
        self.assertLess(abs(decoded.sync.dbeta_c), 1e-9)
        self.assertIsNotNone(decoded.Y)

    def test_frame_level_sync_mode(self):
        """Verify the frame-level estimator drives the chain when selected."""
        content = pure_frame(10)
        frame = synth_frame(content.symbols, default_pss())
        received = apply_channel(frame, ClockModel(), ChannelParams(beta=4e-8, theta=0.3)).samples
        demodulator = Demodulator(
            DemodSettings(residual_sync="frame"), alt_settings=AltSyncSettings(rows=tuple(range(2, 60)))
        )
        decoded = demodulator.run(received[:FRAME_SAMPLES], m=0)
        self.assertAlmostEqual(decoded.sync.dbeta_c, 4e-8, delta=2e-9)
        self.assertEqual(decoded.retained(), list(range(2, NSF)))
        np.testing.assert_array_equal(decoded.X_hat[2:, KLNP], content.matrix[2:, KLNP])

    def test_unknown_sync_mode(self):
        """Ensure an unknown residual sync mode raises ValueError."""
        with self.assertRaises(ValueError):
            DemodSettings(residual_sync="fast")


# --- Capture to symbols ----


class TestEndToEnd(unittest.TestCase):
    """Test synthesis, channel, acquisition and demodulation together."""

    def test_mixed_constellations_decode_exactly(self):
        """Verify three frames mixing QPSK, 4QAM, 16QAM and 32QAM decode without errors or drops."""
        config = ScenarioConfig(
            seed=5,
            frames=3,
            channel=ChannelSettings(theta=0.9, snr_pre_db=30.0),
            modulation=ModulationPlan(pure_qpsk_fraction=0.0, data_labels=("QPSK", "4QAM", "16QAM", "32QAM")),
        )
        stream, truth = build_scenario(config)
        found = Acquirer(AcquisitionSettings(), FC, betas=np.array([0.0])).acquire_stream(stream)
        self.assertEqual(len(found), 3)
        demodulator = Demodulator(fc=FC)
        for m, (_, frame) in enumerate(found):
            decoded = demodulator.run(frame, m)
            X, labels = truth.symbol_matrix(m)
            self.assertEqual(decoded.labels[2:], labels)
            self.assertEqual(decoded.retained(), list(range(2, NSF)))
            self.assertEqual(int(np.sum(decoded.X_hat[2:, KLNP] != X[2:, KLNP])), 0)

    def test_impaired_round_trip(self):
        """Verify symbols, offset and delay survive Doppler, fractional delay, tilt and 13.8 dB noise."""
        beta = 5e-8
        config = ScenarioConfig(
            seed=6,
            channel=ChannelSettings(beta=beta, tau_los=40.37 / FS, theta=0.7, snr_pre_db=13.8, tilt_db=3.0),
            modulation=ModulationPlan(pure_qpsk_fraction=0.0, data_labels=("QPSK", "4QAM")),
        )
        stream, truth = build_scenario(config)
        result, frame = acquire(stream, betas=np.array([0.0]))
        self.assertTrue(result.accepted)
        decoded = Demodulator(fc=FC).run(frame, 0)
        X, _ = truth.symbol_matrix(0)
        rows = np.array(decoded.retained())
        self.assertGreater(len(rows), 290)
        errors = np.sum(decoded.X_hat[np.ix_(rows, KLNP)] != X[np.ix_(rows, KLNP)])
        self.assertLess(errors / (len(rows) * len(KLNP)), 1e-3)
        self.assertLess(abs(decoded.sync.dbeta_c - truth.impairments["beta_c"]), 1e-8)
        expected_tau = (truth.impairments["n_m"] - result.n_hat + SLOT_SAMPLES / 2 * beta / (1 - beta)) / FS
        self.assertLess(abs(decoded.sync.tau_m0 - expected_tau), 1e-10)


if __name__ == "__main__":
    unittest.main()
