"""Recurrent cells: ERNN with a small ReLU inner network, LSTM, and a vanilla tanh RNN.

All cells take batched inputs ``(B, n_in)`` and states ``(B, n_state)`` as
:class:`~ernn_se.numerics.Tensor` and register their weights in a shared
:class:`~ernn_se.numerics.ParameterStore` under a name prefix.
"""

from __future__ import annotations

import contextlib
from dataclasses import dataclass

import numpy as np

from .numerics import (
    ParameterStore,
    Tensor,
    affine,
    backward,
    concat,
    no_grad,
    relu,
    sigmoid,
    take,
    tanh,
    tsum,
)

N_FEATURES = 257
ETA_INIT = 0.1


def glorot(rng: np.random.Generator, n_out: int, n_in: int, dtype=np.float32) -> np.ndarray:
    limit = np.sqrt(6.0 / (n_in + n_out))
    return rng.uniform(-limit, limit, size=(n_out, n_in)).astype(dtype)


@dataclass(frozen=True)
class ErnnConfig:
    n_state: int
    n_hidden: int
    iterations: int
    n_in: int = N_FEATURES

    def __post_init__(self):
        if min(self.n_state, self.n_hidden, self.iterations, self.n_in) < 1:
            raise ValueError(f"ERNN sizes must be positive: {self}")

    def parameter_count(self) -> int:
        s, h = self.n_state, self.n_hidden
        return (self.n_in * s + s) + (s * s + s) + (s * h + h) + (h * s + s) + self.iterations


class ErnnCell:
    """Hidden-state update by ``iterations`` relaxation steps toward the inner network's output.

    Starting from ``xi = 0``, each step moves ``xi`` by
    ``eta[k] * (F(psi, xi + h_prev) - (xi + h_prev))`` and the new state is the
    final ``xi``. ``F`` is ``fc3(relu(fc2(relu(fc_psi(psi) + fc_z(z)))))``.
    """

    def __init__(self, store: ParameterStore, cfg: ErnnConfig, rng: np.random.Generator, prefix: str = "ernn", dtype=np.float32):
        self.cfg = cfg
        s, h = cfg.n_state, cfg.n_hidden
        self.W_psi = store.add(f"{prefix}.fc_psi.W", glorot(rng, s, cfg.n_in, dtype))
        self.b_psi = store.add(f"{prefix}.fc_psi.b", np.zeros(s, dtype))
        self.W_z = store.add(f"{prefix}.fc_z.W", glorot(rng, s, s, dtype))
        self.b_z = store.add(f"{prefix}.fc_z.b", np.zeros(s, dtype))
        self.W_2 = store.add(f"{prefix}.fc2.W", glorot(rng, h, s, dtype))
        self.b_2 = store.add(f"{prefix}.fc2.b", np.zeros(h, dtype))
        self.W_3 = store.add(f"{prefix}.fc3.W", glorot(rng, s, h, dtype))
        self.b_3 = store.add(f"{prefix}.fc3.b", np.zeros(s, dtype))
        self.eta = store.add(f"{prefix}.eta", np.full(cfg.iterations, ETA_INIT, dtype))

    @property
    def n_state(self) -> int:
        return self.cfg.n_state

    def initial_state(self, batch: int, dtype=np.float32) -> Tensor:
        return Tensor(np.zeros((batch, self.cfg.n_state), dtype))

    def project(self, psi: Tensor) -> Tensor:
        """Input branch ``fc_psi(psi)``; shared by every iteration of a step."""
        return affine(psi, self.W_psi, self.b_psi)

    def inner(self, proj: Tensor, z: Tensor) -> Tensor:
        a = relu(proj + affine(z, self.W_z, self.b_z))
        return affine(relu(affine(a, self.W_2, self.b_2)), self.W_3, self.b_3)

    def step_projected(self, proj: Tensor, h_prev: Tensor) -> Tensor:
        xi = None
        for k in range(self.cfg.iterations):
            z = h_prev if xi is None else xi + h_prev
            delta = take(self.eta, k) * (self.inner(proj, z) - z)
            xi = delta if xi is None else xi + delta
        return xi

    def step(self, psi: Tensor, h_prev: Tensor) -> Tensor:
        return self.step_projected(self.project(psi), h_prev)


def ernn_f(psi: Tensor, z: Tensor, cell: ErnnCell) -> Tensor:
    """The inner network ``F(psi, z)`` of an ERNN cell."""
    return cell.inner(cell.project(psi), z)


class LstmLayer:
    """Uni-directional LSTM; gates i, f, g, o from one affine over ``[x, h]``."""

    def __init__(self, store: ParameterStore, n_in: int, n_state: int, rng: np.random.Generator, prefix: str = "lstm", dtype=np.float32):
        self.n_in = n_in
        self.n_state = n_state
        self.W = store.add(f"{prefix}.W", glorot(rng, 4 * n_state, n_in + n_state, dtype))
        self.b = store.add(f"{prefix}.b", np.zeros(4 * n_state, dtype))

    @staticmethod
    def parameter_count(n_in: int, n_state: int) -> int:
        return 4 * ((n_in + n_state) * n_state + n_state)

    def initial_state(self, batch: int, dtype=np.float32) -> tuple[Tensor, Tensor]:
        zeros = np.zeros((batch, self.n_state), dtype)
        return Tensor(zeros), Tensor(zeros.copy())

    def step(self, x: Tensor, state: tuple[Tensor, Tensor]) -> tuple[Tensor, Tensor]:
        h, c = state
        n = self.n_state
        z = affine(concat([x, h], axis=-1), self.W, self.b)
        i = sigmoid(z[..., :n])
        f = sigmoid(z[..., n : 2 * n])
        g = tanh(z[..., 2 * n : 3 * n])
        o = sigmoid(z[..., 3 * n :])
        c_new = f * c + i * g
        return o * tanh(c_new), c_new


class VanillaRnnCell:
    def __init__(self, store: ParameterStore, n_in: int, n_state: int, rng: np.random.Generator, prefix: str = "rnn", dtype=np.float32):
        self.n_in = n_in
        self.n_state = n_state
        self.W_psi = store.add(f"{prefix}.W_psi", glorot(rng, n_state, n_in, dtype))
        self.W_h = store.add(f"{prefix}.W_h", glorot(rng, n_state, n_state, dtype))
        self.b = store.add(f"{prefix}.b", np.zeros(n_state, dtype))

    def initial_state(self, batch: int, dtype=np.float32) -> Tensor:
        return Tensor(np.zeros((batch, self.n_state), dtype))

    def step(self, psi: Tensor, h: Tensor) -> Tensor:
        return tanh(affine(psi, self.W_psi, self.b) + affine(h, self.W_h))

    def set_recurrent_norm(self, norm: float) -> None:
        """Rescale ``W_h`` to the given spectral norm."""
        W = self.W_h.data.astype(np.float64)
        self.W_h.data = (W * (norm / np.linalg.norm(W, 2))).astype(self.W_h.dtype)


@contextlib.contextmanager
def _frozen(store: ParameterStore):
    flags = [(p, p.requires_grad) for p in store]
    for p, _ in flags:
        p.requires_grad = False
    try:
        yield
    finally:
        for p, flag in flags:
            p.requires_grad = flag


def measure_state_gradient_norms(
    cell,
    store: ParameterStore,
    inputs: np.ndarray,
    start: int = 0,
    probes: int = 8,
    seed: int = 0,
) -> np.ndarray:
    """Probe norms of ``d h_c / d h_start`` for ``c = start .. len(inputs)``.

    Entry ``d`` of the result is the mean over ``probes`` random unit vectors
    ``u`` of ``||u^T J_d||``, where ``J_d`` is the state Jacobian across ``d``
    frames; entry 0 is the identity and equals 1. For an LSTM the cell state at
    ``start`` is held fixed.
    """
    L = len(inputs)
    if L < 2 or not 0 <= start < L:
        raise ValueError(f"need at least two frames and 0 <= start < {L}")
    dtype = store[store.names()[0]].dtype
    x = np.asarray(inputs, dtype)
    is_lstm = isinstance(cell, LstmLayer)

    with no_grad():
        state = cell.initial_state(1, dtype)
        for t in range(start):
            state = cell.step(Tensor(x[t : t + 1]), state)
    h0 = state[0] if is_lstm else state
    c0 = state[1] if is_lstm else None

    rng = np.random.default_rng(seed)
    u = rng.standard_normal((probes, cell.n_state))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    u = u.astype(dtype)

    norms = [1.0]
    with _frozen(store):
        h_start = Tensor(np.repeat(h0.data, probes, axis=0), requires_grad=True)
        state = (h_start, Tensor(np.repeat(c0.data, probes, axis=0))) if is_lstm else h_start
        for t in range(start, L):
            psi = Tensor(np.repeat(x[t : t + 1], probes, axis=0))
            state = cell.step(psi, state)
            h = state[0] if is_lstm else state
            h_start.grad = None
            backward(tsum(h * Tensor(u)))
            norms.append(float(np.linalg.norm(h_start.grad, axis=1).mean()))
    return np.array(norms)
