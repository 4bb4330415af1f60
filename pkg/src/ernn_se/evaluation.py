"""Objective quality metrics and real-time-factor benchmarking."""

from __future__ import annotations

import statistics
import time

import numpy as np

from .model import MaskModel
from .numerics import ParameterStore
from .recurrent import N_FEATURES, ErnnCell, ErnnConfig, LstmLayer, VanillaRnnCell, measure_state_gradient_norms
from .streaming import StreamEnhancer

SI_SDR_CAP = 100.0
SEG_SNR_RANGE = (-10.0, 35.0)


def si_sdr(reference, estimate) -> float:
    """Scale-invariant SDR in dB, capped at +100 dB."""
    s = np.asarray(reference, dtype=np.float64)
    e = np.asarray(estimate, dtype=np.float64)
    if s.shape != e.shape:
        raise ValueError(f"reference shape {s.shape} differs from estimate shape {e.shape}")
    ss = s @ s
    if ss <= 0:
        raise ValueError("reference signal has zero energy")
    target = (e @ s / ss) * s
    resid = e - target
    num, den = target @ target, resid @ resid
    if den <= num * 10 ** (-SI_SDR_CAP / 10):
        return SI_SDR_CAP
    return float(10 * np.log10(num / den))


def segmental_snr(reference, estimate, frame: int = 256, energy_floor: float = 1e-10) -> float:
    """Mean per-frame SNR in dB, each frame clamped to [-10, 35]; silent reference frames skipped."""
    s = np.asarray(reference, dtype=np.float64)
    e = np.asarray(estimate, dtype=np.float64)
    if s.shape != e.shape:
        raise ValueError(f"reference shape {s.shape} differs from estimate shape {e.shape}")
    n = len(s) // frame
    if n == 0:
        return float("nan")
    s = s[: n * frame].reshape(n, frame)
    d = s - e[: n * frame].reshape(n, frame)
    sig = np.sum(s * s, axis=1)
    noise = np.sum(d * d, axis=1)
    keep = sig > energy_floor
    if not keep.any():
        return float("nan")
    lo, hi = SEG_SNR_RANGE
    with np.errstate(divide="ignore"):
        snr = 10 * np.log10(sig[keep] / noise[keep])
    return float(np.mean(np.clip(np.nan_to_num(snr, posinf=hi, neginf=lo), lo, hi)))


def rtf_benchmark(model: MaskModel, seconds: float = 10.0, repetitions: int = 3, seed: int = 0, chunk: int = 256) -> dict:
    """Real-time factor of the streaming path on white noise of the given duration."""
    if seconds < 10.0:
        raise ValueError("benchmark needs at least 10 s of audio")
    sr = 16000
    x = (0.1 * np.random.default_rng(seed).standard_normal(int(seconds * sr))).astype(model.dtype)
    totals, latencies = [], []
    for _ in range(repetitions):
        eng = StreamEnhancer(model)
        t0 = time.perf_counter()
        for i in range(0, len(x), chunk):
            c0 = time.perf_counter()
            eng.push(x[i : i + chunk])
            latencies.append(time.perf_counter() - c0)
        eng.flush()
        totals.append(time.perf_counter() - t0)
    med = statistics.median(totals)
    lat_ms = np.array(latencies) * 1e3
    return {
        "rtf": med / seconds,
        "median_seconds": med,
        "audio_seconds": seconds,
        "repetitions": repetitions,
        "frame_latency_ms": {q: float(np.percentile(lat_ms, int(q[1:]))) for q in ("p50", "p90", "p99")},
    }


def gradient_norm_traces(
    length: int = 100,
    n_state: int = 64,
    n_hidden: int = 32,
    iterations: int = 3,
    vanilla_norm: float = 0.5,
    probes: int = 8,
    seed: int = 0,
) -> dict[str, np.ndarray]:
    """State-Jacobian norm traces over ``length`` frames for ERNN, LSTM and vanilla cells.

    Cells use 64-bit weights at their default initialization; the vanilla cell's
    recurrent matrix is rescaled to spectral norm ``vanilla_norm``. Inputs are a
    fixed random feature sequence.
    """
    rng = np.random.default_rng(seed)
    inputs = rng.standard_normal((length, N_FEATURES))
    traces = {}
    store = ParameterStore()
    cell = ErnnCell(store, ErnnConfig(n_state, n_hidden, iterations), rng, dtype=np.float64)
    traces["ernn"] = measure_state_gradient_norms(cell, store, inputs, probes=probes, seed=seed)
    store = ParameterStore()
    lstm = LstmLayer(store, N_FEATURES, n_state, rng, dtype=np.float64)
    traces["lstm"] = measure_state_gradient_norms(lstm, store, inputs, probes=probes, seed=seed)
    store = ParameterStore()
    rnn = VanillaRnnCell(store, N_FEATURES, n_state, rng, dtype=np.float64)
    rnn.set_recurrent_norm(vanilla_norm)
    traces["vanilla"] = measure_state_gradient_norms(rnn, store, inputs, probes=probes, seed=seed)
    return traces
