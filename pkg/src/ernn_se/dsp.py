"""STFT analysis and canonical-dual synthesis, log-magnitude features, masking.

Frame ``tau`` covers samples ``[tau*hop - head, tau*hop - head + win)`` of the
input, where ``head = win - hop`` zeros are prepended (they only hold the past,
so framing stays causal) and ``win`` zeros are appended. With a 512/256 Hann
pair every input sample is then seen by exactly two frames, which is what makes
the overlap-add inverse exact.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np

MAG_FLOOR = 1e-7


class WindowNotInvertibleError(ValueError):
    pass


@dataclass(frozen=True)
class StftConfig:
    win_length: int = 512
    hop: int = 256
    n_fft: int = 512
    sample_rate: int = 16000

    def __post_init__(self):
        if self.win_length % self.hop:
            raise ValueError(f"hop {self.hop} must divide window length {self.win_length}")
        if self.n_fft != self.win_length:
            raise ValueError("FFT length must equal window length")

    @property
    def n_bins(self) -> int:
        return self.n_fft // 2 + 1

    @property
    def head(self) -> int:
        return self.win_length - self.hop

    def num_frames(self, length: int) -> int:
        if length < 1:
            raise ValueError("signal must contain at least one sample")
        return (length - 1 + self.head) // self.hop + 1

    def max_length(self, frames: int) -> int:
        """Longest output fully covered by ``frames`` synthesis frames."""
        return frames * self.hop - self.head


DEFAULT_CONFIG = StftConfig()


def hann_window(n: int = 512, dtype=np.float64) -> np.ndarray:
    """Periodic Hann window ``0.5 * (1 - cos(2 pi k / n))``."""
    if n % 2:
        raise ValueError("window length must be even")
    k = np.arange(n)
    return (0.5 * (1.0 - np.cos(2.0 * np.pi * k / n))).astype(dtype)


def canonical_dual_window(w: np.ndarray, hop: int) -> np.ndarray:
    n = len(w)
    w64 = np.asarray(w, dtype=np.float64)
    denom = np.zeros(n)
    for shift in range(-(n // hop) * hop, n, hop):
        idx = np.arange(n) + shift
        ok = (idx >= 0) & (idx < n)
        denom[ok] += w64[idx[ok]] ** 2
    if np.any(denom <= 0):
        raise WindowNotInvertibleError(f"window is not invertible at hop {hop}: zero energy at phase {int(np.argmin(denom))}")
    return (w64 / denom).astype(np.asarray(w).dtype)


@functools.lru_cache(maxsize=16)
def _cached_pair(cfg: StftConfig, dtype: np.dtype) -> tuple[np.ndarray, np.ndarray]:
    w = hann_window(cfg.win_length)
    wd = canonical_dual_window(w, cfg.hop)
    w, wd = w.astype(dtype), wd.astype(dtype)
    w.flags.writeable = wd.flags.writeable = False
    return w, wd


def window_pair(cfg: StftConfig = DEFAULT_CONFIG, dtype=np.float64) -> tuple[np.ndarray, np.ndarray]:
    """Analysis window and its canonical dual, cached and read-only."""
    return _cached_pair(cfg, np.dtype(dtype))


def _complex_dtype(dtype) -> np.dtype:
    return np.dtype(np.complex64) if np.dtype(dtype) == np.float32 else np.dtype(np.complex128)


def frame_signal(x: np.ndarray, cfg: StftConfig = DEFAULT_CONFIG) -> np.ndarray:
    """Frames of shape ``(..., T, win)`` as a read-only strided view."""
    length = x.shape[-1]
    T = cfg.num_frames(length)
    pad = [(0, 0)] * (x.ndim - 1) + [(cfg.head, cfg.win_length)]
    padded = np.pad(x, pad)
    return np.lib.stride_tricks.sliding_window_view(padded, cfg.win_length, axis=-1)[..., : (T - 1) * cfg.hop + 1 : cfg.hop, :]


def overlap_add(frames: np.ndarray, cfg: StftConfig = DEFAULT_CONFIG) -> np.ndarray:
    """Sum ``(..., T, win)`` frames at hop spacing into the padded timeline."""
    T = frames.shape[-2]
    r = cfg.win_length // cfg.hop
    out = np.zeros(frames.shape[:-2] + (T + r - 1, cfg.hop), dtype=frames.dtype)
    for j in range(r):
        out[..., j : j + T, :] += frames[..., :, j * cfg.hop : (j + 1) * cfg.hop]
    return out.reshape(frames.shape[:-2] + (-1,))


def stft(x, cfg: StftConfig = DEFAULT_CONFIG) -> np.ndarray:
    """One-sided spectrogram, shape ``(..., T, n_bins)``."""
    x = np.asarray(x)
    if x.shape[-1] == 0:
        raise ValueError("cannot take the STFT of an empty signal")
    if x.dtype != np.float32:
        x = x.astype(np.float64)
    w, _ = window_pair(cfg, x.dtype)
    return np.fft.rfft(frame_signal(x, cfg) * w, n=cfg.n_fft, axis=-1).astype(_complex_dtype(x.dtype))


def istft(S: np.ndarray, length: int, cfg: StftConfig = DEFAULT_CONFIG) -> np.ndarray:
    """Inverse of :func:`stft` by dual-window overlap-add, truncated to ``length``."""
    S = np.asarray(S)
    if S.shape[-1] != cfg.n_bins:
        raise ValueError(f"spectrogram has {S.shape[-1]} bins, expected {cfg.n_bins}")
    T = S.shape[-2]
    if length > cfg.max_length(T):
        raise ValueError(f"requested {length} samples but {T} frames only synthesize {cfg.max_length(T)}")
    real = np.float32 if S.dtype == np.complex64 else np.float64
    _, wd = window_pair(cfg, real)
    frames = np.fft.irfft(S, n=cfg.n_fft, axis=-1).astype(real) * wd
    return overlap_add(frames, cfg)[..., cfg.head : cfg.head + length]


def istft_mask_vjp(X: np.ndarray, grad_out: np.ndarray, cfg: StftConfig = DEFAULT_CONFIG) -> np.ndarray:
    """Gradient of ``<grad_out, istft(G * X)>`` with respect to the real mask ``G``."""
    T = X.shape[-2]
    real = np.float32 if X.dtype == np.complex64 else np.float64
    _, wd = window_pair(cfg, real)
    span = (T + cfg.win_length // cfg.hop - 1) * cfg.hop
    pad = [(0, 0)] * (grad_out.ndim - 1) + [(cfg.head, span - cfg.head - grad_out.shape[-1])]
    padded = np.pad(grad_out.astype(real), pad)
    frames = np.lib.stride_tricks.sliding_window_view(padded, cfg.win_length, axis=-1)[..., : (T - 1) * cfg.hop + 1 : cfg.hop, :]
    R = np.fft.rfft(frames * wd, n=cfg.n_fft, axis=-1)
    weight = np.full(cfg.n_bins, 2.0 / cfg.n_fft)
    weight[0] = weight[-1] = 1.0 / cfg.n_fft
    return (weight * np.real(X * np.conj(R))).astype(real)


def log_magnitude(X: np.ndarray) -> np.ndarray:
    mag = np.abs(X)
    return np.log(np.maximum(mag, MAG_FLOOR)).astype(mag.dtype)


def apply_mask(X: np.ndarray, G: np.ndarray) -> np.ndarray:
    if X.shape != G.shape:
        raise ValueError(f"mask shape {G.shape} does not match spectrogram shape {X.shape}")
    return X * G
