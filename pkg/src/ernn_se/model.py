"""Mask estimators: log-magnitude features -> recurrent stack -> sigmoid head."""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from .numerics import ParameterStore, Tensor, affine, no_grad, sigmoid, stack
from .recurrent import N_FEATURES, ErnnCell, ErnnConfig, LstmLayer, glorot

ARCHITECTURES = ("ernn", "lstm2")
PRECISIONS = {"float32": np.float32, "float64": np.float64}


@dataclass(frozen=True)
class ModelConfig:
    arch: str = "ernn"
    n_state: int = 256
    n_hidden: int | None = 128
    iterations: int | None = 1
    n_in: int = N_FEATURES
    seed: int = 0

    def __post_init__(self):
        if self.arch not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {self.arch!r}; expected one of {ARCHITECTURES}")
        if self.n_state < 1 or self.n_in < 1:
            raise ValueError("n_state and n_in must be positive")
        if self.arch == "ernn":
            if not self.n_hidden or not self.iterations or self.n_hidden < 1 or self.iterations < 1:
                raise ValueError("ernn needs positive n_hidden and iterations")
        elif self.n_hidden is not None or self.iterations is not None:
            raise ValueError("lstm2 takes neither n_hidden nor iterations")

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        if d.get("arch") == "lstm2":
            d["n_hidden"] = d["iterations"] = None
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})

    def to_dict(self) -> dict:
        return asdict(self)


def count_parameters(cfg: ModelConfig) -> int:
    s = cfg.n_state
    head = s * cfg.n_in + cfg.n_in
    if cfg.arch == "ernn":
        return ErnnConfig(s, cfg.n_hidden, cfg.iterations, cfg.n_in).parameter_count() + head
    return LstmLayer.parameter_count(cfg.n_in, s) + LstmLayer.parameter_count(s, s) + head


def format_count(n: int) -> str:
    """Round like a results table: ``329k`` below a million, ``1.12M`` above."""
    if n < 1_000_000:
        return f"{int(n / 1000 + 0.5)}k"
    return f"{int(n / 10_000 + 0.5) / 100:.2f}M"


class MaskModel:
    """Causal mask estimator ``G_t = sigmoid(W h_t + b)`` over a recurrent state."""

    def __init__(self, cfg: ModelConfig, dtype=np.float32):
        self.cfg = cfg
        self.store = ParameterStore()
        rng = np.random.default_rng(cfg.seed)
        if cfg.arch == "ernn":
            self.cell = ErnnCell(self.store, ErnnConfig(cfg.n_state, cfg.n_hidden, cfg.iterations, cfg.n_in), rng, "ernn", dtype)
            self.layers = None
        else:
            self.cell = None
            self.layers = [
                LstmLayer(self.store, cfg.n_in, cfg.n_state, rng, "lstm1", dtype),
                LstmLayer(self.store, cfg.n_state, cfg.n_state, rng, "lstm2", dtype),
            ]
        self.W_out = self.store.add("head.W", glorot(rng, cfg.n_in, cfg.n_state, dtype))
        self.b_out = self.store.add("head.b", np.zeros(cfg.n_in, dtype))

    @property
    def dtype(self) -> np.dtype:
        return self.W_out.dtype

    def astype(self, dtype) -> "MaskModel":
        self.store.astype(dtype)
        return self

    def initial_state(self, batch: int = 1):
        if self.cell is not None:
            return self.cell.initial_state(batch, self.dtype)
        return [layer.initial_state(batch, self.dtype) for layer in self.layers]

    def _check_features(self, shape):
        if shape[-1] != self.cfg.n_in:
            raise ValueError(f"feature dimension {shape[-1]} does not match model input {self.cfg.n_in}")

    def _advance(self, psi: Tensor, state, proj: Tensor | None = None):
        if self.cell is not None:
            h = self.cell.step_projected(proj if proj is not None else self.cell.project(psi), state)
            return h, h
        new_state = []
        x = psi
        for layer, st in zip(self.layers, state):
            h, c = layer.step(x, st)
            new_state.append((h, c))
            x = h
        return x, new_state

    def step(self, psi: np.ndarray, state):
        """One frame: features ``(B, n_in)`` and state in, mask ``(B, n_in)`` and new state out."""
        self._check_features(psi.shape)
        h, state = self._advance(Tensor(np.asarray(psi, self.dtype)), state)
        return sigmoid(affine(h, self.W_out, self.b_out)), state

    def forward_graph(self, features: np.ndarray) -> Tensor:
        """Differentiable mask for features ``(B, T, n_in)``, zero initial state."""
        self._check_features(features.shape)
        psi = Tensor(np.asarray(features, self.dtype))
        B, T, _ = psi.shape
        proj = self.cell.project(psi) if self.cell is not None else None
        state = self.initial_state(B)
        hs = []
        for t in range(T):
            h, state = self._advance(psi[:, t], state, None if proj is None else proj[:, t])
            hs.append(h)
        return sigmoid(affine(stack(hs, axis=1), self.W_out, self.b_out))

    def forward_sequence(self, features: np.ndarray) -> np.ndarray:
        """Mask for features ``(T, n_in)`` evaluated frame by frame, without recording."""
        features = np.asarray(features)
        self._check_features(features.shape)
        if features.ndim != 2 or len(features) < 1:
            raise ValueError(f"expected (T, {self.cfg.n_in}) features with T >= 1, got {features.shape}")
        out = np.empty(features.shape, self.dtype)
        with no_grad():
            state = self.initial_state(1)
            for t in range(len(features)):
                g, state = self.step(features[t : t + 1], state)
                out[t] = g.data[0]
        return out
