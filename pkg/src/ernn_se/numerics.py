"""Small reverse-mode autodiff over numpy arrays, plus Adam and a gradient checker.

Only the operations the mask estimators need are provided. A ``Tensor`` records
its parents and a backward closure while gradient recording is enabled; calling
:func:`backward` on a scalar walks the graph in reverse topological order and
accumulates into the ``grad`` of every reachable leaf that requires it.
"""

from __future__ import annotations

import contextlib
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Callable, Iterable, Iterator, Sequence

import numpy as np

_RECORDING = True


class DimensionError(ValueError):
    """Operand shapes do not conform."""


class ContractError(RuntimeError):
    """An operation was called outside its preconditions."""


class GradCheckError(RuntimeError):
    """Finite-difference check could not be evaluated."""


@contextlib.contextmanager
def no_grad():
    """Disable graph recording inside the block (inference paths)."""
    global _RECORDING
    prev = _RECORDING
    _RECORDING = False
    try:
        yield
    finally:
        _RECORDING = prev


def is_recording() -> bool:
    return _RECORDING


class Tensor:
    __slots__ = ("data", "grad", "requires_grad", "_parents", "_backward", "name")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None, dtype=None):
        arr = np.asarray(data, dtype=dtype)
        if arr.dtype.kind not in "fc":
            arr = arr.astype(np.float64)
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._parents: tuple[Tensor, ...] = ()
        self._backward = None
        self.name = name

    @classmethod
    def from_op(cls, data: np.ndarray, parents: Sequence["Tensor"], backward) -> "Tensor":
        """Build the output node of an operation.

        ``backward(g, acc)`` receives the upstream gradient and an accumulator
        ``acc(parent, value, index=None)``.
        """
        out = cls(data)
        if _RECORDING and any(p.requires_grad for p in parents):
            out.requires_grad = True
            out._parents = tuple(parents)
            out._backward = backward
        return out

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def dtype(self):
        return self.data.dtype

    def numpy(self) -> np.ndarray:
        return self.data

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.data)))

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, dtype={self.dtype}{tag})"

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other, self.dtype), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __neg__(self):
        return mul(self, -1.0)

    def __getitem__(self, idx):
        return take(self, idx)


def as_tensor(x, dtype=None) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(np.asarray(x, dtype=dtype))


def _unbroadcast(g: np.ndarray, shape: tuple[int, ...]) -> np.ndarray:
    while g.ndim > len(shape):
        g = g.sum(axis=0)
    for axis, n in enumerate(shape):
        if n == 1 and g.shape[axis] != 1:
            g = g.sum(axis=axis, keepdims=True)
    return g


def _binary_operands(a, b):
    if isinstance(a, Tensor):
        b = as_tensor(b, a.dtype)
    else:
        a = as_tensor(a, b.dtype)
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"cannot broadcast shapes {a.shape} and {b.shape}") from None
    return a, b


def add(a, b) -> Tensor:
    a, b = _binary_operands(a, b)

    def backward(g, acc):
        acc(a, _unbroadcast(g, a.shape))
        acc(b, _unbroadcast(g, b.shape))

    return Tensor.from_op(a.data + b.data, (a, b), backward)


def sub(a, b) -> Tensor:
    a, b = _binary_operands(a, b)

    def backward(g, acc):
        acc(a, _unbroadcast(g, a.shape))
        acc(b, _unbroadcast(-g, b.shape))

    return Tensor.from_op(a.data - b.data, (a, b), backward)


def mul(a, b) -> Tensor:
    a, b = _binary_operands(a, b)

    def backward(g, acc):
        if a.requires_grad:
            acc(a, _unbroadcast(g * b.data, a.shape))
        if b.requires_grad:
            acc(b, _unbroadcast(g * a.data, b.shape))

    return Tensor.from_op(a.data * b.data, (a, b), backward)


def affine(x: Tensor, W: Tensor, b: Tensor | None = None) -> Tensor:
    """``W @ x + b`` applied over the last axis of ``x`` (leading axes are batch)."""
    x = as_tensor(x, W.dtype)
    if W.data.ndim != 2 or x.shape[-1:] != W.shape[1:]:
        raise DimensionError(f"affine: input shape {x.shape} does not conform to weight shape {W.shape}")
    if b is not None and b.shape != W.shape[:1]:
        raise DimensionError(f"affine: bias shape {b.shape} does not conform to weight shape {W.shape}")
    out = x.data @ W.data.T
    if b is not None:
        out = out + b.data
    parents = (x, W) if b is None else (x, W, b)

    def backward(g, acc):
        if x.requires_grad:
            acc(x, g @ W.data)
        if W.requires_grad:
            acc(W, g.reshape(-1, g.shape[-1]).T @ x.data.reshape(-1, x.shape[-1]))
        if b is not None and b.requires_grad:
            acc(b, g.reshape(-1, g.shape[-1]).sum(axis=0))

    return Tensor.from_op(out, parents, backward)


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return Tensor.from_op(np.where(mask, x.data, 0).astype(x.dtype), (x,), lambda g, acc: acc(x, g * mask))


def _sigmoid(z: np.ndarray) -> np.ndarray:
    # split by sign so exp never overflows
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def sigmoid(x: Tensor) -> Tensor:
    y = _sigmoid(x.data)
    return Tensor.from_op(y, (x,), lambda g, acc: acc(x, g * y * (1 - y)))


def tanh(x: Tensor) -> Tensor:
    y = np.tanh(x.data)
    return Tensor.from_op(y, (x,), lambda g, acc: acc(x, g * (1 - y * y)))


_ACTIVATIONS = {"relu": relu, "sigmoid": sigmoid, "tanh": tanh}


def activation(x: Tensor, kind: str) -> Tensor:
    try:
        fn = _ACTIVATIONS[kind]
    except KeyError:
        raise ValueError(f"unknown activation {kind!r}; expected one of {sorted(_ACTIVATIONS)}") from None
    return fn(x)


def take(x: Tensor, idx) -> Tensor:
    return Tensor.from_op(x.data[idx], (x,), lambda g, acc: acc(x, g, idx))


def stack(xs: Sequence[Tensor], axis: int = 0) -> Tensor:
    data = np.stack([t.data for t in xs], axis=axis)

    def backward(g, acc):
        for i, t in enumerate(xs):
            if t.requires_grad:
                acc(t, np.take(g, i, axis=axis))

    return Tensor.from_op(data, tuple(xs), backward)


def concat(xs: Sequence[Tensor], axis: int = -1) -> Tensor:
    data = np.concatenate([t.data for t in xs], axis=axis)
    bounds = np.cumsum([0] + [t.shape[axis] for t in xs])

    def backward(g, acc):
        for t, lo, hi in zip(xs, bounds[:-1], bounds[1:]):
            if t.requires_grad:
                acc(t, np.take(g, np.arange(lo, hi), axis=axis))

    return Tensor.from_op(data, tuple(xs), backward)


def tsum(x: Tensor) -> Tensor:
    return Tensor.from_op(x.data.sum(), (x,), lambda g, acc: acc(x, np.broadcast_to(g, x.shape)))


def mean(x: Tensor) -> Tensor:
    n = x.data.size
    return Tensor.from_op(x.data.mean(), (x,), lambda g, acc: acc(x, np.broadcast_to(g / n, x.shape)))


def tabs(x: Tensor) -> Tensor:
    return Tensor.from_op(np.abs(x.data), (x,), lambda g, acc: acc(x, g * np.sign(x.data)))


def _topological(root: Tensor) -> list[Tensor]:
    order: list[Tensor] = []
    seen: set[int] = set()
    stack_: list[tuple[Tensor, bool]] = [(root, False)]
    while stack_:
        node, expanded = stack_.pop()
        if expanded:
            order.append(node)
            continue
        if id(node) in seen:
            continue
        seen.add(id(node))
        stack_.append((node, True))
        for p in node._parents:
            if p.requires_grad and id(p) not in seen:
                stack_.append((p, False))
    return order


def backward(loss: Tensor) -> None:
    """Accumulate d(loss)/d(leaf) into ``leaf.grad`` for every reachable leaf."""
    if loss.data.size != 1 or loss.data.ndim != 0:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not loss.requires_grad:
        return
    grads: dict[int, np.ndarray] = {id(loss): np.ones((), dtype=loss.dtype)}

    def acc(node: Tensor, value, index=None):
        if not node.requires_grad:
            return
        key = id(node)
        cur = grads.get(key)
        if index is not None:
            if cur is None:
                cur = grads[key] = np.zeros(node.shape, dtype=node.dtype)
            cur[index] += value
        elif cur is None:
            grads[key] = np.array(value, dtype=node.dtype)
        else:
            cur += value

    for node in reversed(_topological(loss)):
        g = grads.pop(id(node), None)
        if g is None:
            continue
        if node._backward is None:
            if node.grad is None:
                node.grad = np.zeros(node.shape, dtype=node.dtype)
            node.grad += g
        else:
            node._backward(g, acc)


class Parameter(Tensor):
    __slots__ = ()

    def __init__(self, name: str, value):
        super().__init__(np.array(value), requires_grad=True, name=name)
        self.grad = np.zeros_like(self.data)

    def zero_grad(self) -> None:
        self.grad = np.zeros_like(self.data)


class ParameterStore:
    """Ordered, uniquely named collection of parameters."""

    def __init__(self):
        self._params: OrderedDict[str, Parameter] = OrderedDict()

    def add(self, name: str, value) -> Parameter:
        if name in self._params:
            raise ValueError(f"duplicate parameter name {name!r}")
        p = Parameter(name, value)
        self._params[name] = p
        return p

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[Parameter]:
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def count(self) -> int:
        return sum(p.data.size for p in self)

    def zero_grad(self) -> None:
        for p in self:
            p.zero_grad()

    def all_finite(self) -> bool:
        return all(p.is_finite() for p in self)

    def astype(self, dtype) -> None:
        for p in self:
            p.data = p.data.astype(dtype)
            p.grad = np.zeros_like(p.data)


@dataclass
class AdamState:
    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)

    @classmethod
    def for_store(cls, store: ParameterStore, lr: float = 1e-4, **kw) -> "AdamState":
        state = cls(lr=lr, **kw)
        for p in store:
            state.m[p.name] = np.zeros_like(p.data)
            state.v[p.name] = np.zeros_like(p.data)
        return state


def adam_step(store: ParameterStore, state: AdamState) -> None:
    """One bias-corrected Adam update, then clear every gradient."""
    for p in store:
        if p.name not in state.m or state.m[p.name].shape != p.shape:
            raise ContractError(f"Adam state not initialized for parameter {p.name!r}")
    state.t += 1
    bc1 = 1.0 - state.beta1**state.t
    bc2 = 1.0 - state.beta2**state.t
    for p in store:
        g = p.grad
        m, v = state.m[p.name], state.v[p.name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * (g * g)
        update = (state.lr / bc1) * m / (np.sqrt(v / bc2) + state.eps)
        p.data = (p.data - update).astype(p.dtype)
        p.zero_grad()


def grad_check(
    loss_fn: Callable[[], Tensor],
    store: ParameterStore,
    probes: int = 100,
    h: float = 1e-5,
    seed: int = 0,
    include: Iterable[str] = (),
    floor: float = 1e-7,
) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``probes`` coordinates are drawn uniformly over all scalars in ``store``;
    every coordinate of the parameters named in ``include`` is checked as well.
    Relative error is ``|a - n| / max(|a|, |n|, floor)``.
    """
    for p in store:
        if p.dtype != np.float64:
            raise GradCheckError(f"gradient check needs 64-bit parameters, {p.name!r} is {p.dtype}")
    store.zero_grad()
    loss = loss_fn()
    if not np.isfinite(loss.data):
        raise GradCheckError(f"non-finite loss {float(loss.data)!r}")
    backward(loss)
    analytic = {p.name: p.grad.copy() for p in store}
    store.zero_grad()

    params = list(store)
    sizes = np.array([p.data.size for p in params])
    rng = np.random.default_rng(seed)
    coords = []
    flat = rng.integers(0, sizes.sum(), size=probes)
    offsets = np.cumsum(sizes)
    for f in flat:
        i = int(np.searchsorted(offsets, f, side="right"))
        coords.append((params[i], int(f - (offsets[i] - sizes[i]))))
    for name in include:
        p = store[name]
        coords.extend((p, j) for j in range(p.data.size))

    worst = 0.0
    with no_grad():
        for p, j in coords:
            view = p.data.reshape(-1)
            orig = view[j]
            view[j] = orig + h
            fp = float(loss_fn().data)
            view[j] = orig - h
            fm = float(loss_fn().data)
            view[j] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise GradCheckError(f"non-finite loss while probing {p.name}[{j}]")
            numeric = (fp - fm) / (2 * h)
            a = float(analytic[p.name].reshape(-1)[j])
            rel = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, rel)
    return worst
