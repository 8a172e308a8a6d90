"""Power normalization and AWGN channel simulation with exact SNR semantics.

Symbols are normalized to unit mean power before transmission, so an SNR of
s dB maps to noise variance 10^(-s/10).  The channel owns no learnable
state; swapping in another model only requires matching this module's
function signatures.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class ChannelConfig:
    """AWGN channel parameters.  ``snr_db=inf`` is the noiseless flag."""

    snr_db: float
    seed: int | None = None

    def __post_init__(self):
        if math.isnan(self.snr_db) or self.snr_db == -math.inf:
            raise ValueError("snr_db must be finite or +inf")


def noise_variance(snr_db: float) -> float:
    """Noise variance for a unit-power signal at the given SNR in dB."""
    if snr_db == math.inf:
        return 0.0
    return 10.0 ** (-snr_db / 10.0)


def signal_power(symbols: np.ndarray) -> float:
    """Mean of squares, accumulated in double precision."""
    s = np.asarray(symbols)
    if s.size == 0:
        return 0.0
    return float(np.mean(np.square(s.astype(np.float64))))


def power_normalize(symbols: np.ndarray) -> tuple[np.ndarray, float]:
    """Scale a symbol vector to unit mean power; returns (scaled, scale).

    The receiver undoes the scaling by multiplying with ``scale``.
    """
    s = np.asarray(symbols)
    if s.size == 0:
        raise ValueError("cannot normalize an empty symbol vector")
    power = signal_power(s)
    if power == 0.0:
        raise ValueError("zero-power signal")
    scale = math.sqrt(power)
    return (s / np.asarray(scale, dtype=s.dtype)).astype(s.dtype), scale


def de_normalize(symbols: np.ndarray, scale: float) -> np.ndarray:
    """Inverse of :func:`power_normalize`."""
    s = np.asarray(symbols)
    return (s * np.asarray(scale, dtype=s.dtype)).astype(s.dtype)


def awgn(symbols: np.ndarray, config: ChannelConfig, rng: np.random.Generator | None = None) -> np.ndarray:
    """Add i.i.d. zero-mean Gaussian noise at the configured SNR.

    Assumes the input is power-normalized.  ``snr_db=inf`` passes symbols
    through unchanged.
    """
    s = np.asarray(symbols)
    if config.snr_db == math.inf:
        return s.copy()
    if rng is None:
        rng = np.random.default_rng(config.seed)
    sigma = math.sqrt(noise_variance(config.snr_db))
    noise = rng.normal(0.0, sigma, size=s.shape)
    return (s + noise).astype(s.dtype)


def measure_snr_db(clean: np.ndarray, noisy: np.ndarray) -> float:
    """Empirical SNR: signal power over the power of (noisy - clean)."""
    c = np.asarray(clean, dtype=np.float64)
    n = np.asarray(noisy, dtype=np.float64)
    if c.shape != n.shape:
        raise ValueError(f"shape mismatch: {c.shape} vs {n.shape}")
    noise_power = signal_power(n - c)
    if noise_power == 0.0:
        return math.inf
    return 10.0 * math.log10(signal_power(c) / noise_power)
