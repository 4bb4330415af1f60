"""Synthetic speech-like test material: voiced harmonic bursts in additive noise."""

from __future__ import annotations

import numpy as np

from .training import UtterancePair

SR = 16000


def harmonic_surrogate(rng: np.random.Generator, length: int = SR) -> np.ndarray:
    """Gliding harmonic tone gated by smooth syllable-like envelopes."""
    t = np.arange(length) / SR
    f0 = rng.uniform(110, 240) * (1 + 0.08 * np.sin(2 * np.pi * rng.uniform(0.5, 3) * t + rng.uniform(0, 2 * np.pi)))
    phase = 2 * np.pi * np.cumsum(f0) / SR
    n_harm = int(rng.integers(4, 10))
    tone = sum(np.sin(h * phase + rng.uniform(0, 2 * np.pi)) / h for h in range(1, n_harm + 1))
    env = np.zeros(length)
    pos = int(rng.integers(0, SR // 10))
    while pos < length:
        dur = int(rng.integers(SR // 8, SR // 3))
        seg = np.sin(np.pi * np.linspace(0, 1, dur)) ** 2
        end = min(pos + dur, length)
        env[pos:end] = seg[: end - pos]
        pos = end + int(rng.integers(SR // 20, SR // 6))
    s = tone * env
    return 0.3 * s / (np.max(np.abs(s)) + 1e-12)


def coloured_noise(rng: np.random.Generator, length: int, tilt: float) -> np.ndarray:
    """Gaussian noise with a spectral slope of ``tilt`` (0 white, 1 pink-like)."""
    spectrum = np.fft.rfft(rng.standard_normal(length))
    f = np.arange(len(spectrum), dtype=np.float64)
    f[0] = 1.0
    n = np.fft.irfft(spectrum / f ** (tilt / 2), n=length)
    return n / np.std(n)


def mix_at_snr(clean: np.ndarray, noise: np.ndarray, snr_db: float) -> np.ndarray:
    gain = np.sqrt(np.sum(clean**2) / (np.sum(noise**2) * 10 ** (snr_db / 10)))
    return clean + gain * noise


def make_pairs(n: int, seed: int = 0, length: int = SR, snr_range=(0.0, 10.0)) -> list[UtterancePair]:
    rng = np.random.default_rng(seed)
    pairs = []
    for i in range(n):
        clean = harmonic_surrogate(rng, length)
        noise = coloured_noise(rng, length, rng.uniform(0.0, 1.0))
        noisy = mix_at_snr(clean, noise, rng.uniform(*snr_range))
        pairs.append(UtterancePair(noisy.astype(np.float32), clean.astype(np.float32), f"synth{i:03d}"))
    return pairs
