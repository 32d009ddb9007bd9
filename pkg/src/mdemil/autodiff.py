"""
Minimal define-by-run reverse-mode differentiation over dense 2-D float64 arrays.

Operations executed while a :class:`Tape` is active are recorded in execution
order; :meth:`Tape.backward` replays them in reverse. Leaf tensors created with
``requires_grad=True`` accumulate into ``.grad`` (additively, so callers zero
between steps). Outside a tape every op is a plain forward computation.
"""
from __future__ import annotations

import threading
from typing import Callable, Iterable, List, Optional, Sequence, Tuple

import numpy as np

from .errors import DegenerateInputError, DimensionError

_local = threading.local()

BackwardFn = Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.asarray(data, dtype=np.float64)
        if arr.ndim == 0:
            arr = arr.reshape(1, 1)
        elif arr.ndim == 1:
            arr = arr.reshape(1, -1)
        elif arr.ndim != 2:
            raise DimensionError(f"tensors are 2-D, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = bool(requires_grad)
        self.grad: Optional[np.ndarray] = None
        self.name = name

    @property
    def shape(self) -> Tuple[int, int]:
        return self.data.shape

    @property
    def T(self) -> "Tensor":
        return transpose(self)

    def item(self) -> float:
        if self.data.size != 1:
            raise DimensionError(f"item() needs a 1x1 tensor, got {self.shape}")
        return float(self.data[0, 0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def zero_grad(self) -> None:
        if self.requires_grad:
            self.grad = np.zeros_like(self.data)

    def __matmul__(self, other: "Tensor") -> "Tensor":
        return matmul(self, other)

    def __add__(self, other: "Tensor") -> "Tensor":
        return add(self, other)

    def __mul__(self, other) -> "Tensor":
        if isinstance(other, Tensor):
            return mul(self, other)
        return scalar_scale(self, float(other))

    __rmul__ = __mul__

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"


class Tape:
    """Ordered record of executed operations.

    Use as a context manager; nested tapes are allowed and only the innermost
    one records.
    """

    def __init__(self):
        self.records: List[Tuple[Tuple[Tensor, ...], Tensor, BackwardFn]] = []

    def __enter__(self) -> "Tape":
        _stack().append(self)
        return self

    def __exit__(self, *exc) -> None:
        _stack().pop()

    def __len__(self) -> int:
        return len(self.records)

    def record(self, inputs: Tuple[Tensor, ...], output: Tensor, backward: BackwardFn) -> None:
        self.records.append((inputs, output, backward))

    def backward(self, loss: Tensor, seed: Optional[np.ndarray] = None) -> None:
        """Propagate d(loss)/d(leaf) into every reachable leaf's ``.grad``."""
        if seed is None:
            if loss.data.size != 1:
                raise DimensionError(f"backward() without a seed needs a scalar loss, got {loss.shape}")
            seed = np.ones_like(loss.data)
        produced = {id(out) for _, out, _ in self.records}
        pending = {id(loss): np.asarray(seed, dtype=np.float64)}
        if id(loss) not in produced:
            _accumulate_leaf(loss, pending.pop(id(loss)))
            return
        for inputs, out, fn in reversed(self.records):
            g = pending.pop(id(out), None)
            if g is None:
                continue
            for inp, ig in zip(inputs, fn(g)):
                if ig is None or not inp.requires_grad:
                    continue
                if id(inp) in produced:
                    key = id(inp)
                    pending[key] = pending[key] + ig if key in pending else ig
                else:
                    _accumulate_leaf(inp, ig)


def _stack() -> list:
    stack = getattr(_local, "stack", None)
    if stack is None:
        stack = _local.stack = []
    return stack


def active_tape() -> Optional[Tape]:
    stack = _stack()
    return stack[-1] if stack else None


def _accumulate_leaf(t: Tensor, g: np.ndarray) -> None:
    if not t.requires_grad:
        return
    if t.grad is None:
        t.grad = np.array(g, dtype=np.float64, copy=True)
    else:
        t.grad += g


def _emit(data: np.ndarray, inputs: Tuple[Tensor, ...], backward: BackwardFn) -> Tensor:
    needs = any(t.requires_grad for t in inputs)
    out = Tensor(data, requires_grad=needs)
    tape = active_tape()
    if needs and tape is not None:
        tape.record(inputs, out, backward)
    return out


def zero_grads(params: Iterable[Tensor]) -> None:
    for p in params:
        p.zero_grad()


def backward(loss: Tensor, tape: Optional[Tape] = None) -> None:
    tape = tape if tape is not None else active_tape()
    if tape is None:
        raise RuntimeError("backward() needs the tape that recorded the forward pass")
    tape.backward(loss)


# --------------------------------------------------------------------------- ops


def matmul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul inner dimensions differ: {a.shape} @ {b.shape}")
    ad, bd = a.data, b.data

    def back(g):
        return (g @ bd.T if a.requires_grad else None, ad.T @ g if b.requires_grad else None)

    return _emit(ad @ bd, (a, b), back)


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"add needs equal shapes: {a.shape} vs {b.shape}")
    return _emit(a.data + b.data, (a, b), lambda g: (g, g))


def add_bias(x: Tensor, bias: Tensor) -> Tensor:
    """``x + bias`` with ``bias`` a 1 x n row broadcast over the rows of ``x``."""
    if bias.shape != (1, x.shape[1]):
        raise DimensionError(f"bias must be (1, {x.shape[1]}), got {bias.shape} for input {x.shape}")
    return _emit(x.data + bias.data, (x, bias), lambda g: (g, g.sum(axis=0, keepdims=True)))


def mul(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"mul needs equal shapes: {a.shape} vs {b.shape}")
    ad, bd = a.data, b.data
    return _emit(ad * bd, (a, b), lambda g: (g * bd, g * ad))


def scalar_scale(x: Tensor, s: float) -> Tensor:
    s = float(s)
    return _emit(x.data * s, (x,), lambda g: (g * s,))


def transpose(x: Tensor) -> Tensor:
    return _emit(x.data.T.copy(), (x,), lambda g: (g.T,))


def sum_all(x: Tensor) -> Tensor:
    shape = x.shape
    return _emit(np.array([[x.data.sum()]]), (x,), lambda g: (np.full(shape, g[0, 0]),))


def elementwise(x: Tensor, kind: str) -> Tensor:
    xd = x.data
    if kind == "relu":
        mask = xd > 0
        return _emit(np.where(mask, xd, 0.0), (x,), lambda g: (g * mask,))
    if kind == "tanh":
        y = np.tanh(xd)
        return _emit(y, (x,), lambda g: (g * (1.0 - y * y),))
    if kind == "sigmoid":
        y = _sigmoid(xd)
        return _emit(y, (x,), lambda g: (g * y * (1.0 - y),))
    raise ValueError(f"unknown elementwise kind {kind!r}")


def relu(x: Tensor) -> Tensor:
    return elementwise(x, "relu")


def tanh(x: Tensor) -> Tensor:
    return elementwise(x, "tanh")


def sigmoid(x: Tensor) -> Tensor:
    return elementwise(x, "sigmoid")


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _softmax(z: np.ndarray) -> np.ndarray:
    e = np.exp(z - z.max(axis=1, keepdims=True))
    return e / e.sum(axis=1, keepdims=True)


def softmax_rows(x: Tensor) -> Tensor:
    y = _softmax(x.data)

    def back(g):
        return (y * (g - (g * y).sum(axis=1, keepdims=True)),)

    return _emit(y, (x,), back)


def cross_entropy(logits: Tensor, label: int) -> Tensor:
    """``-log softmax(logits)[label]`` for a single 1 x C row of logits."""
    if logits.shape[0] != 1:
        raise DimensionError(f"cross_entropy expects 1 x C logits, got {logits.shape}")
    n_classes = logits.shape[1]
    label = int(label)
    if not 0 <= label < n_classes:
        raise IndexError(f"label {label} out of range for {n_classes} classes")
    z = logits.data
    shifted = z - z.max()
    logsumexp = np.log(np.exp(shifted).sum())
    loss = logsumexp - shifted[0, label]

    def back(g):
        p = np.exp(shifted - logsumexp)
        p[0, label] -= 1.0
        return (g[0, 0] * p,)

    return _emit(np.array([[loss]]), (logits,), back)


def mse(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise DimensionError(f"mse needs equal shapes: {a.shape} vs {b.shape}")
    diff = a.data - b.data
    n = diff.size

    def back(g):
        d = (2.0 * g[0, 0] / n) * diff
        return (d, -d)

    return _emit(np.array([[np.mean(diff * diff)]]), (a, b), back)


def mean_rows(x: Tensor) -> Tensor:
    m, n = x.shape
    return _emit(x.data.mean(axis=0, keepdims=True), (x,), lambda g: (np.broadcast_to(g / m, (m, n)),))


def concat_rows(parts: Sequence[Tensor]) -> Tensor:
    parts = tuple(parts)
    if not parts:
        raise DegenerateInputError("concat_rows needs at least one tensor")
    cols = parts[0].shape[1]
    for p in parts:
        if p.shape[1] != cols:
            raise DimensionError(f"concat_rows column mismatch: {parts[0].shape} vs {p.shape}")
    bounds = np.cumsum([0] + [p.shape[0] for p in parts])

    def back(g):
        return tuple(g[bounds[i]:bounds[i + 1]] for i in range(len(parts)))

    return _emit(np.concatenate([p.data for p in parts], axis=0), parts, back)


def l2_normalize_rows(x: Tensor, eps: Optional[float] = None) -> Tensor:
    """Divide each row by its norm. With ``eps`` the norm is floored there, so zero rows stay zero."""
    norms = np.sqrt((x.data * x.data).sum(axis=1, keepdims=True))
    if eps is None:
        if np.any(norms == 0.0):
            raise DegenerateInputError("l2_normalize_rows: cannot normalize an all-zero row")
        clipped = np.zeros(norms.shape, dtype=bool)
    else:
        clipped = norms < eps
        norms = np.maximum(norms, eps)
    y = x.data / norms

    def back(g):
        proj = np.where(clipped, 0.0, (g * y).sum(axis=1, keepdims=True))
        return ((g - y * proj) / norms,)

    return _emit(y, (x,), back)
