"""Datasets, segment sampling, the time-domain MAE objective and the epoch loop."""

from __future__ import annotations

import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from . import dsp
from .audio import load_wav
from .checkpoint import save_checkpoint
from .model import PRECISIONS, MaskModel
from .numerics import AdamState, Tensor, adam_step, backward

log = logging.getLogger(__name__)

SEGMENT = 16000


class DatasetError(ValueError):
    pass


class TrainingDivergedError(RuntimeError):
    def __init__(self, epoch: int, batch: int, loss: float):
        super().__init__(f"non-finite loss {loss!r} at epoch {epoch}, batch {batch}")
        self.epoch, self.batch, self.loss = epoch, batch, loss


@dataclass
class UtterancePair:
    noisy: np.ndarray
    clean: np.ndarray
    id: str = ""

    def __post_init__(self):
        if len(self.noisy) != len(self.clean):
            raise DatasetError(f"pair {self.id!r}: noisy has {len(self.noisy)} samples, clean has {len(self.clean)}")


@dataclass
class TrainConfig:
    batch_size: int = 16
    segment_length: int = SEGMENT
    epochs: int = 200
    lr: float = 1e-4
    seed: int = 0
    precision: str = "float32"
    checkpoint_every: int = 10

    def __post_init__(self):
        if min(self.batch_size, self.segment_length, self.epochs, self.checkpoint_every) < 1 or self.lr <= 0:
            raise ValueError(f"training settings must be positive: {self}")
        if self.precision not in PRECISIONS:
            raise ValueError(f"precision must be one of {sorted(PRECISIONS)}")


@dataclass
class TrainingReport:
    epochs: list[dict] = field(default_factory=list)
    steps: int = 0

    @property
    def losses(self) -> list[float]:
        return [e["loss"] for e in self.epochs]


def load_dataset(path) -> list[UtterancePair]:
    """Pairs from a directory of ``<id>_noisy.wav``/``<id>_clean.wav`` or a TAB manifest."""
    path = Path(path)
    if not path.exists():
        raise DatasetError(f"dataset path does not exist: {path}")
    if path.is_dir():
        noisy = sorted(path.glob("*_noisy.wav"))
        items = [(p, p.with_name(p.name[: -len("_noisy.wav")] + "_clean.wav"), p.name[: -len("_noisy.wav")]) for p in noisy]
    else:
        items = []
        for i, line in enumerate(path.read_text().splitlines()):
            if not line.strip():
                continue
            cols = line.split("\t")
            if len(cols) != 2:
                raise DatasetError(f"{path}:{i + 1}: expected 'noisy<TAB>clean'")
            n, c = (path.parent / col.strip() for col in cols)
            items.append((n, c, n.stem))
    pairs = []
    for n, c, uid in items:
        if not c.exists():
            raise DatasetError(f"missing clean file for {n}: {c}")
        pairs.append(UtterancePair(load_wav(n), load_wav(c), uid))
    if not pairs:
        raise DatasetError(f"no utterance pairs found in {path}")
    return pairs


def sample_segment(pair: UtterancePair, rng: np.random.Generator, length: int = SEGMENT) -> tuple[np.ndarray, np.ndarray]:
    n = len(pair.noisy)
    if n <= length:
        pad = length - n
        return np.pad(pair.noisy, (0, pad)), np.pad(pair.clean, (0, pad))
    off = int(rng.integers(0, n - length + 1))
    return pair.noisy[off : off + length], pair.clean[off : off + length]


def masked_mae(G: Tensor, X: np.ndarray, clean: np.ndarray, cfg: dsp.StftConfig = dsp.DEFAULT_CONFIG) -> Tensor:
    """Mean absolute error between ``clean`` and ``istft(G * X)``; differentiable in ``G`` only."""
    clean = np.asarray(clean)
    L = clean.shape[-1]
    est = dsp.istft(G.data * X, L, cfg)
    resid = est - clean.astype(est.dtype)
    value = np.mean(np.abs(resid))

    def back(g, acc):
        r = np.sign(resid) * (g / resid.size)
        acc(G, dsp.istft_mask_vjp(X, r, cfg))

    return Tensor.from_op(np.asarray(value, dtype=G.dtype), (G,), back)


def mae_time_loss(clean: np.ndarray, noisy: np.ndarray, model: MaskModel, cfg: dsp.StftConfig = dsp.DEFAULT_CONFIG) -> Tensor:
    """Batch mean of the per-utterance time-domain MAE through mask and inverse STFT.

    ``clean``/``noisy`` are ``(L,)`` or ``(B, L)``.
    """
    clean = np.asarray(clean)
    noisy = np.asarray(noisy)
    if clean.shape != noisy.shape:
        raise ValueError(f"clean shape {clean.shape} differs from noisy shape {noisy.shape}")
    if clean.ndim == 1:
        clean, noisy = clean[None], noisy[None]
    X = dsp.stft(noisy.astype(model.dtype), cfg)
    G = model.forward_graph(dsp.log_magnitude(X))
    return masked_mae(G, X, clean, cfg)


def train(
    dataset: list[UtterancePair],
    model: MaskModel,
    cfg: TrainConfig,
    out_dir=None,
    on_epoch: Callable[[dict], None] | None = None,
    adam: AdamState | None = None,
) -> TrainingReport:
    """Run ``cfg.epochs`` epochs of Adam on one random segment per utterance per epoch.

    With ``out_dir`` set, appends one JSON line per epoch to ``report.jsonl`` and
    writes ``epoch_NNNN.ckpt`` every ``checkpoint_every`` epochs plus ``final.ckpt``.
    """
    if not dataset:
        raise DatasetError("empty dataset")
    dtype = PRECISIONS[cfg.precision]
    if model.dtype != dtype:
        model.astype(dtype)
    if adam is None:
        adam = AdamState.for_store(model.store, lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.jsonl").write_text("")
    report = TrainingReport()

    for epoch in range(1, cfg.epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(dataset))
        segs = [sample_segment(dataset[i], rng, cfg.segment_length) for i in order]
        losses = []
        for b, start in enumerate(range(0, len(segs), cfg.batch_size)):
            batch = segs[start : start + cfg.batch_size]
            noisy = np.stack([s[0] for s in batch]).astype(dtype)
            clean = np.stack([s[1] for s in batch]).astype(dtype)
            loss = mae_time_loss(clean, noisy, model)
            value = float(loss.data)
            if not np.isfinite(value):
                raise TrainingDivergedError(epoch, b, value)
            backward(loss)
            adam_step(model.store, adam)
            report.steps += 1
            losses.append((value, len(batch)))
        mean_loss = sum(v * n for v, n in losses) / sum(n for _, n in losses)
        entry = {"epoch": epoch, "loss": mean_loss, "wall_time": time.perf_counter() - t0}
        report.epochs.append(entry)
        log.info("epoch %d loss %.6f (%.2fs)", epoch, mean_loss, entry["wall_time"])
        if on_epoch is not None:
            on_epoch(entry)
        if out is not None:
            with open(out / "report.jsonl", "a") as fh:
                fh.write(json.dumps(entry) + "\n")
            if epoch % cfg.checkpoint_every == 0:
                save_checkpoint(model, out / f"epoch_{epoch:04d}.ckpt", adam)
    if out is not None:
        save_checkpoint(model, out / "final.ckpt", adam)
    return report
