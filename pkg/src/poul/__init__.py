"""Verifiable machine unlearning: SISA training inside a simulated attesting enclave."""

__version__ = "0.1.0"
