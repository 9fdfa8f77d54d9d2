"""Synthetic series generators for smoke tests, demos, and benchmarks."""

from __future__ import annotations

import numpy as np

from .data import CleanSeries, SequenceStore


def multi_tone(rng: np.random.Generator, n: int, periods=(16, 32, 64),
               noise: float = 0.05) -> np.ndarray:
    """Sum of sinusoids with random amplitudes and phases, z-scored."""
    t = np.arange(n, dtype=np.float64)
    x = np.zeros(n)
    for period in periods:
        amp = rng.uniform(0.5, 1.5)
        phase = rng.uniform(0, 2 * np.pi)
        x += amp * np.sin(2 * np.pi * t / period + phase)
    x += noise * rng.normal(size=n)
    return (x - x.mean()) / x.std()


def regime_series(rng: np.random.Generator, n: int, regime: str) -> np.ndarray:
    """One of three qualitatively different generators, z-scored.

    'tonal' is periodic, 'sawtooth' piecewise-linear with resets, 'ar1' a
    mean-reverting noise process; mixing them gives routing something to
    specialize on.
    """
    t = np.arange(n, dtype=np.float64)
    if regime == "tonal":
        period = rng.choice([16, 24, 48])
        x = np.sin(2 * np.pi * t / period + rng.uniform(0, 2 * np.pi))
        x += 0.3 * np.sin(2 * np.pi * t / (period / 3) + rng.uniform(0, 2 * np.pi))
    elif regime == "sawtooth":
        period = rng.choice([20, 40])
        x = 2.0 * (((t + rng.integers(period)) / period) % 1.0) - 1.0
    elif regime == "ar1":
        phi = rng.uniform(0.85, 0.95)
        eps = rng.normal(size=n)
        x = np.empty(n)
        x[0] = eps[0]
        for i in range(1, n):
            x[i] = phi * x[i - 1] + eps[i]
    else:
        raise ValueError(f"unknown regime {regime!r}")
    x = x + 0.05 * rng.normal(size=n)
    return (x - x.mean()) / x.std()


def build_tone_store(directory, rng: np.random.Generator, num_sequences: int = 12,
                     length: int = 1024, periods=(16, 32, 64)) -> SequenceStore:
    series = [CleanSeries(values=multi_tone(rng, length, periods), domain="tonal")
              for _ in range(num_sequences)]
    return SequenceStore.write(series, directory, name="tones")


def build_regime_store(directory, rng: np.random.Generator, per_regime: int = 6,
                       length: int = 768) -> SequenceStore:
    series = []
    for regime in ("tonal", "sawtooth", "ar1"):
        for _ in range(per_regime):
            series.append(CleanSeries(values=regime_series(rng, length, regime),
                                      domain=regime))
    return SequenceStore.write(series, directory, name="regimes")
