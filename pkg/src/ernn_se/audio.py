"""16 kHz mono WAV reading (PCM16 or float32) and PCM16 writing."""

from __future__ import annotations

import struct
import wave
from pathlib import Path

import numpy as np

SAMPLE_RATE = 16000
_PCM = 1
_FLOAT = 3
_EXTENSIBLE = 0xFFFE


class WavError(ValueError):
    pass


class WavFormatError(WavError):
    pass


class WavChannelError(WavError):
    pass


class WavRateError(WavError):
    pass


def load_wav(path, sample_rate: int = SAMPLE_RATE) -> np.ndarray:
    """Samples of a mono WAV as float32; PCM16 is scaled by 1/32768."""
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != b"RIFF" or raw[8:12] != b"WAVE":
        raise WavFormatError(f"{path}: not a RIFF/WAVE file")
    fmt = None
    data = None
    pos = 12
    while pos + 8 <= len(raw):
        cid, size = struct.unpack_from("<4sI", raw, pos)
        body = raw[pos + 8 : pos + 8 + size]
        if cid == b"fmt ":
            fmt = body
        elif cid == b"data":
            data = body
        pos += 8 + size + (size & 1)
    if fmt is None or data is None or len(fmt) < 16:
        raise WavFormatError(f"{path}: missing fmt or data chunk")
    tag, channels, rate, _, _, bits = struct.unpack_from("<HHIIHH", fmt)
    if tag == _EXTENSIBLE and len(fmt) >= 26:
        tag = struct.unpack_from("<H", fmt, 24)[0]
    if channels != 1:
        raise WavChannelError(f"{path}: expected mono, got {channels} channels")
    if rate != sample_rate:
        raise WavRateError(f"{path}: expected {sample_rate} Hz, got {rate} Hz")
    if tag == _PCM and bits == 16:
        pcm = np.frombuffer(data[: len(data) // 2 * 2], dtype="<i2")
        return (pcm.astype(np.float32) / 32768.0).astype(np.float32)
    if tag == _FLOAT and bits == 32:
        return np.frombuffer(data[: len(data) // 4 * 4], dtype="<f4").astype(np.float32)
    raise WavFormatError(f"{path}: unsupported encoding (format tag {tag}, {bits} bits)")


def save_wav(path, samples: np.ndarray, sample_rate: int = SAMPLE_RATE) -> int:
    """Write 16-bit PCM, clipping to [-1, 1); returns the number of clipped samples."""
    x = np.asarray(samples, dtype=np.float64)
    top = 32767 / 32768
    clipped = int(np.count_nonzero((x < -1.0) | (x > top)))
    pcm = np.round(np.clip(x, -1.0, top) * 32768).astype("<i2")
    with wave.open(str(path), "wb") as w:
        w.setnchannels(1)
        w.setsampwidth(2)
        w.setframerate(sample_rate)
        w.writeframes(pcm.tobytes())
    return clipped
