"""Anomaly detection by masked-token likelihood over vector-quantized STFT grids."""

__version__ = "0.1.0"
