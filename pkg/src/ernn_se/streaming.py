"""Frame-by-frame causal enhancement, and the equivalent offline path.

The streaming engine keeps one analysis window of input and one window of
overlap-add output. A frame is computed as soon as its last input sample
arrives; output samples are released once both frames covering them are done,
so the algorithmic latency is one window (512 samples).
"""

from __future__ import annotations

import numpy as np

from . import dsp
from .model import MaskModel
from .numerics import no_grad


class StreamClosedError(RuntimeError):
    pass


def enhance(model: MaskModel, x: np.ndarray, cfg: dsp.StftConfig = dsp.DEFAULT_CONFIG) -> np.ndarray:
    """Offline enhancement of a whole waveform; output has the input's length."""
    x = np.asarray(x, dtype=model.dtype)
    X = dsp.stft(x, cfg)
    G = model.forward_sequence(dsp.log_magnitude(X))
    return dsp.istft(dsp.apply_mask(X, G), len(x), cfg)


class StreamEnhancer:
    def __init__(self, model: MaskModel, cfg: dsp.StftConfig = dsp.DEFAULT_CONFIG):
        self.model = model
        self.cfg = cfg
        self.dtype = model.dtype
        self._w, self._wd = dsp.window_pair(cfg, self.dtype)
        # frame 0 starts `head` samples before the signal
        self._frame = np.zeros(cfg.win_length, self.dtype)
        self._fill = cfg.head
        self._ola = np.zeros(cfg.win_length, self.dtype)
        self._state = model.initial_state(1)
        self.frames_done = 0
        self.samples_in = 0
        self.samples_out = 0
        self.closed = False

    def _process_frame(self) -> np.ndarray | None:
        cfg = self.cfg
        X = np.fft.rfft(self._frame * self._w, n=cfg.n_fft)
        with no_grad():
            G, self._state = self.model.step(dsp.log_magnitude(X)[None], self._state)
        y = np.fft.irfft(X * G.data[0], n=cfg.n_fft).astype(self.dtype) * self._wd
        self._ola += y
        done = None
        if self.frames_done > 0:
            done = self._ola[: cfg.hop].copy()
        self._ola[: -cfg.hop] = self._ola[cfg.hop :]
        self._ola[-cfg.hop :] = 0
        self._frame[: -cfg.hop] = self._frame[cfg.hop :]
        self._fill -= cfg.hop
        self.frames_done += 1
        return done

    def _consume(self, x: np.ndarray) -> list[np.ndarray]:
        out = []
        pos = 0
        win = self.cfg.win_length
        while pos < len(x):
            n = min(win - self._fill, len(x) - pos)
            self._frame[self._fill : self._fill + n] = x[pos : pos + n]
            self._fill += n
            pos += n
            if self._fill == win:
                done = self._process_frame()
                if done is not None:
                    out.append(done)
        return out

    def push(self, samples) -> np.ndarray:
        """Feed input samples; returns every output sample finalized so far."""
        if self.closed:
            raise StreamClosedError("push after flush")
        x = np.asarray(samples, dtype=self.dtype).reshape(-1)
        self.samples_in += len(x)
        out = self._consume(x)
        return self._emit(out)

    def _emit(self, chunks: list[np.ndarray], limit: int | None = None) -> np.ndarray:
        y = np.concatenate(chunks) if chunks else np.zeros(0, self.dtype)
        if limit is not None:
            y = y[: max(limit - self.samples_out, 0)]
        self.samples_out += len(y)
        return y

    def flush(self) -> np.ndarray:
        """Zero-pad the tail, drain the remaining output and close the stream."""
        if self.closed:
            raise StreamClosedError("stream already flushed")
        self.closed = True
        if self.samples_in == 0:
            return np.zeros(0, self.dtype)
        total = self.cfg.num_frames(self.samples_in)
        out = []
        zeros = np.zeros(self.cfg.hop, self.dtype)
        while self.frames_done < total:
            out += self._consume(zeros[: self.cfg.win_length - self._fill])
        return self._emit(out, limit=self.samples_in)


def enhance_streaming(model: MaskModel, x: np.ndarray, chunk: int | None = None, cfg: dsp.StftConfig = dsp.DEFAULT_CONFIG) -> np.ndarray:
    """Run ``x`` through a fresh :class:`StreamEnhancer` in chunks of ``chunk`` samples."""
    x = np.asarray(x)
    eng = StreamEnhancer(model, cfg)
    step = len(x) if not chunk else chunk
    parts = [eng.push(x[i : i + step]) for i in range(0, len(x), max(step, 1))]
    parts.append(eng.flush())
    return np.concatenate(parts)
