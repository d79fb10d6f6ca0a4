"""A small tape-based reverse-mode autodiff engine over float32 numpy arrays.

Usage::

    w = Tensor(np.ones((3, 2)), requires_grad=True)
    with Tape() as tape:
        loss = ndgrad.sum(ndgrad.relu(x @ w))
    tape.backward(loss)
    w.grad

Operations only record onto the innermost active :class:`Tape`; outside a
tape they simply compute values.  A tape can be replayed backward once.

Binary operations accept equal shapes, or a scalar (Python number or a
0-d tensor) against any tensor.  Nothing else broadcasts.  Every committed
value is checked for NaN/Inf.
"""
from __future__ import annotations

import threading
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit

__all__ = [
    "Tensor", "Tape", "backward", "no_tape",
    "ShapeError", "DomainError", "NonFiniteError", "TapeError",
    "matmul", "add", "sub", "mul", "neg", "relu", "tanh", "sigmoid", "exp", "log", "scale",
    "clamp01", "square", "add_bias", "concat", "tile_rows", "take", "reshape", "sum", "mean",
    "softmax_cross_entropy", "gaussian_kl_standard",
    "AdamState", "adam_step", "sgd_momentum_step",
]


class ShapeError(ValueError):
    pass


class DomainError(ValueError):
    pass


class NonFiniteError(FloatingPointError):
    pass


class TapeError(RuntimeError):
    pass


_local = threading.local()


def _stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


class Tensor:
    """Dense float32 array with an optional gradient accumulator."""

    __slots__ = ("data", "grad", "requires_grad", "_tape", "_node")
    __array_priority__ = 1000

    def __init__(self, data, requires_grad: bool = False):
        arr = np.array(data, dtype=np.float32)
        if not np.isfinite(arr).all():
            raise NonFiniteError("tensor constructed from non-finite values")
        self.data = arr
        self.grad: np.ndarray | None = None
        self.requires_grad = requires_grad
        self._tape: Tape | None = None
        self._node: int | None = None

    @classmethod
    def _wrap(cls, arr: np.ndarray) -> "Tensor":
        t = cls.__new__(cls)
        t.data = arr
        t.grad = None
        t.requires_grad = False
        t._tape = None
        t._node = None
        return t

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float("nan")

    def zero_grad(self) -> None:
        self.grad = None

    def __repr__(self) -> str:
        flag = ", requires_grad=True" if self.requires_grad else ""
        return f"Tensor(shape={self.shape}{flag})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(other, self)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(other, self)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(other, self)

    def __neg__(self):
        return neg(self)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class _Node:
    out: Tensor
    parents: tuple[Tensor, ...]
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]


class Tape:
    """Ordered record of operations; replayed in reverse by :meth:`backward`."""

    def __init__(self):
        self.nodes: list[_Node] = []
        self._spent = False

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().remove(self)

    def _record(self, out: Tensor, parents: tuple[Tensor, ...], fn) -> None:
        if self._spent:
            raise TapeError("cannot record onto a tape that has already been replayed")
        out._tape = self
        out._node = len(self.nodes)
        self.nodes.append(_Node(out, parents, fn))

    def backward(self, loss: Tensor) -> None:
        if self._spent:
            raise TapeError("tape already replayed; record the forward pass again")
        if loss._tape is not self:
            raise TapeError("loss was not recorded on this tape")
        if loss.size != 1:
            raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
        self._spent = True
        pending: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
        leaves: dict[int, Tensor] = {}
        for node in reversed(self.nodes):
            g = pending.pop(id(node.out), None)
            if g is None:
                continue
            _accumulate(node.out, g)
            for parent, pg in zip(node.parents, node.backward(g)):
                if pg is None or not parent.requires_grad:
                    continue
                key = id(parent)
                if key in pending:
                    pending[key] = pending[key] + pg
                else:
                    pending[key] = pg
                if parent._tape is not self:
                    leaves[key] = parent
        for key, t in leaves.items():
            _accumulate(t, pending[key])


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=np.float32).reshape(t.data.shape)
    if not np.isfinite(g).all():
        raise NonFiniteError("non-finite gradient during backward pass")
    t.grad = g.copy() if t.grad is None else t.grad + g


def backward(loss: Tensor) -> None:
    """Populate ``.grad`` on everything reachable from ``loss``."""
    if loss._tape is None:
        raise TapeError("loss was not recorded on any tape")
    loss._tape.backward(loss)


class no_tape:
    """Context manager suspending recording (inference-only computation)."""

    def __enter__(self):
        self._saved = list(_stack())
        _stack().clear()

    def __exit__(self, *exc):
        _stack().extend(self._saved)


def _commit(value: np.ndarray, parents: tuple[Tensor, ...], fn, op: str) -> Tensor:
    value = np.asarray(value, dtype=np.float32)
    if not np.isfinite(value).all():
        raise NonFiniteError(f"{op} produced non-finite values")
    out = Tensor._wrap(value)
    stack = _stack()
    if stack and any(p.requires_grad for p in parents):
        out.requires_grad = True
        stack[-1]._record(out, parents, fn)
    return out


def _lift(x) -> Tensor:
    if isinstance(x, Tensor):
        return x
    return Tensor(x)


def _binary_shapes(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape == b.shape or a.data.ndim == 0 or b.data.ndim == 0:
        return
    raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape} (only equal shapes or scalars)")


def _fit(g: np.ndarray, like: Tensor) -> np.ndarray:
    if like.data.ndim == 0 and g.ndim != 0:
        return np.asarray(g.sum(), dtype=np.float32)
    return g


# ---------------------------------------------------------------------------
# core operations


def matmul(a: Tensor, b: Tensor) -> Tensor:
    a, b = _lift(a), _lift(b)
    if a.data.ndim != 2 or b.data.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul: cannot multiply {a.shape} by {b.shape}")
    av, bv = a.data, b.data

    def fn(g):
        return g @ bv.T, av.T @ g

    return _commit(av @ bv, (a, b), fn, "matmul")


def add(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _binary_shapes(a, b, "add")
    return _commit(a.data + b.data, (a, b), lambda g: (_fit(g, a), _fit(g, b)), "add")


def sub(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _binary_shapes(a, b, "sub")
    return _commit(a.data - b.data, (a, b), lambda g: (_fit(g, a), _fit(-g, b)), "sub")


def mul(a, b) -> Tensor:
    a, b = _lift(a), _lift(b)
    _binary_shapes(a, b, "mul")
    av, bv = a.data, b.data
    return _commit(av * bv, (a, b), lambda g: (_fit(g * bv, a), _fit(g * av, b)), "mul")


def neg(x: Tensor) -> Tensor:
    return _commit(-x.data, (x,), lambda g: (-g,), "neg")


def scale(x: Tensor, c: float) -> Tensor:
    c = np.float32(c)
    return _commit(x.data * c, (x,), lambda g: (g * c,), "scale")


def relu(x: Tensor) -> Tensor:
    mask = x.data > 0
    return _commit(np.where(mask, x.data, np.float32(0)), (x,), lambda g: (g * mask,), "relu")


def tanh(x: Tensor) -> Tensor:
    t = np.tanh(x.data)
    return _commit(t, (x,), lambda g: (g * (1 - t * t),), "tanh")


def sigmoid(x: Tensor) -> Tensor:
    s = expit(x.data).astype(np.float32)
    return _commit(s, (x,), lambda g: (g * s * (1 - s),), "sigmoid")


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):
        e = np.exp(x.data)
    return _commit(e, (x,), lambda g: (g * e,), "exp")


def log(x: Tensor) -> Tensor:
    if (x.data <= 0).any():
        raise DomainError("log of a non-positive value")
    xv = x.data
    return _commit(np.log(xv), (x,), lambda g: (g / xv,), "log")


def clamp01(x: Tensor) -> Tensor:
    """Clip to the pixel box [0, 1]; gradient passes only strictly inside."""
    inside = (x.data > 0) & (x.data < 1)
    return _commit(np.clip(x.data, 0, 1), (x,), lambda g: (g * inside,), "clamp01")


def square(x: Tensor) -> Tensor:
    xv = x.data
    return _commit(xv * xv, (x,), lambda g: (2 * g * xv,), "square")


def add_bias(x: Tensor, b: Tensor) -> Tensor:
    """Row-wise bias: ``x[m, n] + b[n]``."""
    if x.data.ndim != 2 or b.data.ndim != 1 or x.shape[1] != b.shape[0]:
        raise ShapeError(f"add_bias: cannot add bias {b.shape} to {x.shape}")
    return _commit(x.data + b.data, (x, b), lambda g: (g, g.sum(axis=0)), "add_bias")


def concat(parts: Sequence[Tensor], axis: int = -1) -> Tensor:
    parts = tuple(_lift(p) for p in parts)
    try:
        value = np.concatenate([p.data for p in parts], axis=axis)
    except ValueError as exc:
        raise ShapeError(f"concat: {[p.shape for p in parts]}: {exc}") from None
    bounds = np.cumsum([p.shape[axis] for p in parts])[:-1]
    return _commit(value, parts, lambda g: tuple(np.split(g, bounds, axis=axis)), "concat")


def tile_rows(x: Tensor, k: int) -> Tensor:
    """Stack ``k`` copies of a batch along the row axis."""
    if x.data.ndim != 2:
        raise ShapeError(f"tile_rows needs a 2-D tensor, got {x.shape}")
    rows = x.shape[0]
    return _commit(np.tile(x.data, (k, 1)), (x,), lambda g: (g.reshape(k, rows, -1).sum(axis=0),), "tile_rows")


def take(x: Tensor, cols: Sequence[int]) -> Tensor:
    """Per-row column pick: ``out[i] = x[i, cols[i]]``."""
    cols = np.asarray(cols, dtype=np.intp)
    if x.data.ndim != 2 or cols.shape != (x.shape[0],):
        raise ShapeError(f"take: {x.shape} with {cols.shape[0]} indices")
    rows = np.arange(x.shape[0])

    def fn(g):
        out = np.zeros_like(x.data)
        out[rows, cols] = g
        return (out,)

    return _commit(x.data[rows, cols], (x,), fn, "take")


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    try:
        value = x.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot view {old} as {tuple(shape)}") from None
    return _commit(value, (x,), lambda g: (g.reshape(old),), "reshape")


def sum(x: Tensor) -> Tensor:  # noqa: A001 - mirrors numpy naming
    shape = x.shape
    return _commit(np.asarray(x.data.sum(dtype=np.float32)), (x,), lambda g: (np.full(shape, g, np.float32),), "sum")


def mean(x: Tensor) -> Tensor:
    shape, n = x.shape, x.size
    return _commit(
        np.asarray(x.data.mean(dtype=np.float32)), (x,), lambda g: (np.full(shape, g / n, np.float32),), "mean"
    )


# ---------------------------------------------------------------------------
# losses


def softmax_cross_entropy(logits: Tensor, labels: Sequence[int]) -> Tensor:
    """Mean over the batch of ``-log softmax(logits)[label]``."""
    if logits.data.ndim != 2:
        raise ShapeError(f"logits must be [batch, classes], got {logits.shape}")
    n, c = logits.shape
    labels = np.asarray(labels, dtype=np.intp).reshape(-1)
    if labels.shape[0] != n:
        raise ShapeError(f"{labels.shape[0]} labels for a batch of {n}")
    if ((labels < 0) | (labels >= c)).any():
        raise IndexError(f"label out of range [0, {c})")
    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1))
    rows = np.arange(n)
    loss = np.mean(logz - shifted[rows, labels])

    def fn(g):
        p = np.exp(shifted - logz[:, None])
        p[rows, labels] -= 1
        return (p * (g / n),)

    return _commit(np.asarray(loss), (logits,), fn, "softmax_cross_entropy")


def gaussian_kl_standard(mu: Tensor, logvar: Tensor) -> Tensor:
    """KL(N(mu, exp(logvar)) || N(0, 1)) summed over every element."""
    if mu.shape != logvar.shape:
        raise ShapeError(f"mu {mu.shape} and logvar {logvar.shape} differ")
    m, lv = mu.data, logvar.data
    with np.errstate(over="ignore"):
        ev = np.exp(lv)
    value = 0.5 * np.sum(ev + m * m - 1 - lv, dtype=np.float32)
    return _commit(np.asarray(value), (mu, logvar), lambda g: (g * m, 0.5 * g * (ev - 1)), "gaussian_kl_standard")


# ---------------------------------------------------------------------------
# optimizers


@dataclass
class AdamState:
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)
    step: int = 0


def adam_step(
    params: Sequence[Tensor],
    grads: Sequence[np.ndarray],
    state: AdamState,
    lr: float,
    beta1: float = 0.9,
    beta2: float = 0.999,
    eps: float = 1e-8,
) -> None:
    """In-place bias-corrected Adam update of ``params``; ``None`` grads are skipped."""
    if not state.m:
        state.m = [np.zeros_like(p.data) for p in params]
        state.v = [np.zeros_like(p.data) for p in params]
    state.step += 1
    c1 = 1 - beta1**state.step
    c2 = 1 - beta2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            continue
        m *= beta1
        m += (1 - beta1) * g
        v *= beta2
        v += (1 - beta2) * g * g
        p.data = (p.data - lr * (m / c1) / (np.sqrt(v / c2) + eps)).astype(np.float32)


def sgd_momentum_step(
    params: Sequence[Tensor],
    grads: Sequence[np.ndarray],
    velocity: list[np.ndarray],
    lr: float,
    momentum: float = 0.9,
) -> None:
    if not velocity:
        velocity.extend(np.zeros_like(p.data) for p in params)
    for p, g, v in zip(params, grads, velocity):
        if g is None:
            continue
        v *= momentum
        v += g
        p.data = (p.data - lr * v).astype(np.float32)
