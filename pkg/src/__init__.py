"""Ku-band OFDM downlink frame toolkit: synthesis, acquisition, demodulation and analysis."""
