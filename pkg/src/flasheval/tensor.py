"""Dense float64 tensors with a define-by-run tape and exact FLOP accounting.

Every operation in this module does three things: computes its output with
numpy, charges the active :class:`FlopCounter`, and (when a :class:`Tape` is
active and some input requires a gradient) records a backward rule.

FLOP convention (forward pass only; backward work is never counted):

=============  ==========================================================
matmul         ``2*m*k*n`` per (batched) product
elementwise    1 per output element (add, sub, mul, scale, gelu, sigmoid,
               log, exp, clip); layer norm charges 5 per element here
softmax        5 per element (max, sub, exp, sum share, div)
gather         1 per element copied (``d`` per gathered row); concat,
               stack, expand and take are charged the same way
reduction      1 per input element summed; layer norm charges 2 per
               element here (mean and variance)
=============  ==========================================================
"""

from __future__ import annotations

import contextlib
import contextvars
from dataclasses import dataclass, field
from math import prod
from typing import Callable, Iterator, Sequence

import numpy as np
from scipy.special import erf

CATEGORIES = ("matmul", "elementwise", "softmax", "gather", "reduction")
STAGES = ("item_encoding", "list_aggregation", "cross_list", "scoring")


class NumericalError(FloatingPointError):
    """Raised when an operation produces NaN or Inf."""


# --------------------------------------------------------------------------
# FLOP accounting


@dataclass
class FlopCounter:
    counts: dict[str, int] = field(default_factory=lambda: dict.fromkeys(CATEGORIES, 0))
    stages: dict[str, dict[str, int]] = field(default_factory=dict)

    def add(self, category: str, n: int) -> None:
        n = int(n)
        self.counts[category] += n
        name = _stage.get()
        if name is not None:
            bucket = self.stages.setdefault(name, dict.fromkeys(CATEGORIES, 0))
            bucket[category] += n

    def reset(self) -> None:
        self.counts = dict.fromkeys(CATEGORIES, 0)
        self.stages = {}

    @property
    def total(self) -> int:
        return sum(self.counts.values())

    def read(self) -> dict[str, int]:
        out = dict(self.counts)
        out["total"] = self.total
        return out

    def stage_total(self, name: str) -> int:
        return sum(self.stages.get(name, {}).values())

    def stage_totals(self) -> dict[str, int]:
        return {name: self.stage_total(name) for name in self.stages}


_GLOBAL_COUNTER = FlopCounter()
_counter: contextvars.ContextVar[FlopCounter] = contextvars.ContextVar(
    "flop_counter", default=_GLOBAL_COUNTER
)
_stage: contextvars.ContextVar[str | None] = contextvars.ContextVar("flop_stage", default=None)


def current_counter() -> FlopCounter:
    return _counter.get()


def flops_reset() -> None:
    _counter.get().reset()


def flops_read() -> dict[str, int]:
    return _counter.get().read()


@contextlib.contextmanager
def counting(counter: FlopCounter | None = None) -> Iterator[FlopCounter]:
    """Route FLOP charges to ``counter`` (a fresh one by default) inside the block."""
    counter = FlopCounter() if counter is None else counter
    token = _counter.set(counter)
    try:
        yield counter
    finally:
        _counter.reset(token)


@contextlib.contextmanager
def stage(name: str) -> Iterator[None]:
    """Tag FLOPs charged inside the block with a stage name."""
    token = _stage.set(name)
    try:
        yield
    finally:
        _stage.reset(token)


# --------------------------------------------------------------------------
# Tensor and tape


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_leaf")

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.array(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._leaf = True

    @property
    def shape(self) -> tuple[int, ...]:
        return self.data.shape

    @property
    def values(self) -> np.ndarray:
        return self.data.reshape(-1)

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def zero_grad(self) -> None:
        self.grad = None

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    def __add__(self, other):
        return add(self, other)

    def __radd__(self, other):
        return add(self, other)

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return add(scale(self, -1.0), other)

    def __mul__(self, other):
        return mul(self, other)

    def __rmul__(self, other):
        return mul(self, other)

    def __neg__(self):
        return scale(self, -1.0)

    def __truediv__(self, other):
        if isinstance(other, Tensor):
            raise TypeError("division is only defined by a scalar")
        return scale(self, 1.0 / other)

    def __matmul__(self, other):
        return matmul(self, other)


@dataclass
class Node:
    inputs: tuple[Tensor, ...]
    output: Tensor
    backward: Callable[[np.ndarray], Sequence[np.ndarray | None]]
    op: str


class Tape:
    """Ordered record of operations, built while active as a context manager.

    Nodes are appended as operations execute, so every node's inputs are
    either leaves or outputs of earlier nodes.
    """

    def __init__(self):
        self.nodes: list[Node] = []
        self._token = None

    def __enter__(self) -> "Tape":
        self._token = _tape.set(self)
        return self

    def __exit__(self, *exc) -> None:
        _tape.reset(self._token)
        self._token = None

    def __len__(self) -> int:
        return len(self.nodes)

    def backward(self, loss: Tensor) -> None:
        backward(loss, self)


_tape: contextvars.ContextVar[Tape | None] = contextvars.ContextVar("tape", default=None)


def no_grad_active() -> bool:
    return _tape.get() is None


def backward(loss: Tensor, tape: Tape) -> None:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every leaf requiring grad."""
    if loss.data.size != 1:
        raise ValueError(f"backward needs a scalar loss, got shape {loss.shape}")
    if not tape.nodes:
        raise ValueError("tape is empty; run the forward pass inside `with Tape():`")
    grads: dict[int, np.ndarray] = {id(loss): np.ones_like(loss.data)}
    for node in reversed(tape.nodes):
        g = grads.pop(id(node.output), None)
        if g is None:
            continue
        for inp, gi in zip(node.inputs, node.backward(g)):
            if gi is None or not inp.requires_grad:
                continue
            if inp._leaf:
                inp.grad = gi.copy() if inp.grad is None else inp.grad + gi
            else:
                key = id(inp)
                grads[key] = gi if key not in grads else grads[key] + gi


def _finite(arr: np.ndarray, op: str) -> None:
    if not np.isfinite(arr).all():
        raise NumericalError(f"{op} produced non-finite values")


def _emit(op: str, data: np.ndarray, inputs: tuple[Tensor, ...], bwd, category: str | None, flops: int) -> Tensor:
    if category is not None:
        _counter.get().add(category, flops)
    _finite(data, op)
    out = Tensor.__new__(Tensor)
    out.data = data
    out.grad = None
    out.name = None
    tape = _tape.get()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._leaf = False
        tape.nodes.append(Node(inputs, out, bwd, op))
    else:
        out.requires_grad = False
        out._leaf = True
    return out


def as_tensor(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _is_scalar(x) -> bool:
    return not isinstance(x, Tensor) and np.ndim(x) == 0


def _same_shape(a: Tensor, b: Tensor, op: str) -> None:
    if a.shape != b.shape:
        raise ValueError(f"{op}: shape mismatch {a.shape} vs {b.shape}")


# --------------------------------------------------------------------------
# Linear algebra


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """``a @ b`` for ``a: (..., m, k)`` and ``b: (k, n)`` or ``(..., k, n)``."""
    if a.ndim < 2 or b.ndim < 2:
        raise ValueError(f"matmul: need matrices, got {a.shape} and {b.shape}")
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul: inner dimensions differ, {a.shape} vs {b.shape}")
    if b.ndim > 2 and a.shape[:-2] != b.shape[:-2]:
        raise ValueError(f"matmul: batch dimensions differ, {a.shape} vs {b.shape}")
    A, B = a.data, b.data
    with np.errstate(over="ignore", invalid="ignore"):
        out = A @ B  # overflow surfaces as NumericalError below
    m, k = A.shape[-2:]
    n = B.shape[-1]
    flops = 2 * prod(A.shape[:-2]) * m * k * n
    shared_b = b.ndim == 2

    def bwd(g):
        ga = g @ np.swapaxes(B, -1, -2) if a.requires_grad else None
        gb = None
        if b.requires_grad:
            if shared_b:
                gb = A.reshape(-1, k).T @ g.reshape(-1, n)
            else:
                gb = np.swapaxes(A, -1, -2) @ g
        return ga, gb

    return _emit("matmul", out, (a, b), bwd, "matmul", flops)


def swapaxes(x: Tensor, ax1: int = -1, ax2: int = -2) -> Tensor:
    return _emit(
        "swapaxes",
        np.swapaxes(x.data, ax1, ax2),
        (x,),
        lambda g: (np.swapaxes(g, ax1, ax2),),
        None,
        0,
    )


def transpose(x: Tensor) -> Tensor:
    return swapaxes(x, -1, -2)


def reshape(x: Tensor, shape: Sequence[int]) -> Tensor:
    old = x.shape
    return _emit("reshape", x.data.reshape(shape), (x,), lambda g: (g.reshape(old),), None, 0)


# --------------------------------------------------------------------------
# Elementwise


def add(a: Tensor, b) -> Tensor:
    if _is_scalar(b):
        c = float(b)
        return _emit("add", a.data + c, (a,), lambda g: (g,), "elementwise", a.data.size)
    b = as_tensor(b)
    _same_shape(a, b, "add")
    return _emit("add", a.data + b.data, (a, b), lambda g: (g, g), "elementwise", a.data.size)


def sub(a: Tensor, b) -> Tensor:
    if _is_scalar(b):
        c = float(b)
        return _emit("sub", a.data - c, (a,), lambda g: (g,), "elementwise", a.data.size)
    b = as_tensor(b)
    _same_shape(a, b, "sub")
    return _emit("sub", a.data - b.data, (a, b), lambda g: (g, -g), "elementwise", a.data.size)


def mul(a: Tensor, b) -> Tensor:
    if _is_scalar(b):
        return scale(a, b)
    b = as_tensor(b)
    _same_shape(a, b, "mul")
    A, B = a.data, b.data
    return _emit("mul", A * B, (a, b), lambda g: (g * B, g * A), "elementwise", A.size)


def scale(a: Tensor, c: float) -> Tensor:
    c = float(c)
    return _emit("scale", a.data * c, (a,), lambda g: (g * c,), "elementwise", a.data.size)


def elementwise(kind: str, a: Tensor, b) -> Tensor:
    """Dispatch ``kind`` in {add, sub, mul, scale}; ``b`` is a tensor or scalar."""
    if kind == "add":
        return add(a, b)
    if kind == "sub":
        return sub(a, b)
    if kind == "mul":
        return mul(a, b)
    if kind == "scale":
        return scale(a, b)
    raise ValueError(f"unknown elementwise kind {kind!r}")


def broadcast_add(x: Tensor, b: Tensor) -> Tensor:
    """``x + b`` where ``b.shape`` equals the trailing dimensions of ``x``.

    Used for biases and position embeddings; this is the only non-scalar
    broadcast the engine supports.
    """
    if b.ndim > x.ndim or x.shape[x.ndim - b.ndim :] != b.shape:
        raise ValueError(f"broadcast_add: {b.shape} is not a trailing shape of {x.shape}")
    lead = tuple(range(x.ndim - b.ndim))

    def bwd(g):
        return g, (g.sum(axis=lead) if lead else g)

    return _emit("broadcast_add", x.data + b.data, (x, b), bwd, "elementwise", x.data.size)


def gelu(x: Tensor) -> Tensor:
    """Exact GELU, ``x * Phi(x)``."""
    X = x.data
    cdf = 0.5 * (1.0 + erf(X / np.sqrt(2.0)))
    pdf = np.exp(-0.5 * X * X) / np.sqrt(2.0 * np.pi)
    return _emit("gelu", X * cdf, (x,), lambda g: (g * (cdf + X * pdf),), "elementwise", X.size)


def sigmoid(x: Tensor) -> Tensor:
    X = x.data
    out = np.empty_like(X)
    pos = X >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-X[pos]))
    ex = np.exp(X[~pos])
    out[~pos] = ex / (1.0 + ex)
    return _emit("sigmoid", out, (x,), lambda g: (g * out * (1.0 - out),), "elementwise", X.size)


def log(x: Tensor) -> Tensor:
    X = x.data
    if (X <= 0).any():
        raise NumericalError("log of a non-positive value")
    return _emit("log", np.log(X), (x,), lambda g: (g / X,), "elementwise", X.size)


def exp(x: Tensor) -> Tensor:
    with np.errstate(over="ignore"):  # overflow surfaces as NumericalError below
        out = np.exp(x.data)
    return _emit("exp", out, (x,), lambda g: (g * out,), "elementwise", out.size)


def clip(x: Tensor, lo: float, hi: float) -> Tensor:
    """Clamp to ``[lo, hi]``; the gradient is zero where the clamp is active."""
    X = x.data
    inside = (X >= lo) & (X <= hi)
    return _emit("clip", np.clip(X, lo, hi), (x,), lambda g: (g * inside,), "elementwise", X.size)


# --------------------------------------------------------------------------
# Softmax family


def softmax(x: Tensor) -> Tensor:
    """Softmax over the last axis, with max subtraction."""
    X = x.data
    z = np.exp(X - X.max(axis=-1, keepdims=True))
    out = z / z.sum(axis=-1, keepdims=True)

    def bwd(g):
        return (out * (g - (g * out).sum(axis=-1, keepdims=True)),)

    return _emit("softmax", out, (x,), bwd, "softmax", 5 * X.size)


softmax_rows = softmax


def log_softmax(x: Tensor) -> Tensor:
    X = x.data
    shifted = X - X.max(axis=-1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=-1, keepdims=True))
    out = shifted - lse
    p = np.exp(out)

    def bwd(g):
        return (g - p * g.sum(axis=-1, keepdims=True),)

    return _emit("log_softmax", out, (x,), bwd, "softmax", 5 * X.size)


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5) -> Tensor:
    """Normalize over the last axis, then apply ``gamma * xhat + beta``."""
    X = x.data
    n = X.shape[-1]
    if gamma.shape != (n,) or beta.shape != (n,):
        raise ValueError(f"layer_norm: expected affine params of shape ({n},), got {gamma.shape}, {beta.shape}")
    mu = X.mean(axis=-1, keepdims=True)
    xc = X - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    rstd = 1.0 / np.sqrt(var + eps)
    xhat = xc * rstd
    G = gamma.data
    out = xhat * G + beta.data
    lead = tuple(range(X.ndim - 1))

    def bwd(g):
        gx = None
        if x.requires_grad:
            gh = g * G
            gx = rstd * (gh - gh.mean(axis=-1, keepdims=True) - xhat * (gh * xhat).mean(axis=-1, keepdims=True))
        return gx, (g * xhat).sum(axis=lead), g.sum(axis=lead)

    counter = _counter.get()
    counter.add("reduction", 2 * X.size)
    return _emit("layer_norm", out, (x, gamma, beta), bwd, "elementwise", 5 * X.size)


# --------------------------------------------------------------------------
# Data movement


def gather_rows(x: Tensor, indices) -> Tensor:
    """Copy rows of ``x`` selected by an integer array.

    With ``x: (M, d)`` and ``indices`` of shape ``S`` the result has shape
    ``S + (d,)``. With a leading batch, ``x: (B, M, d)`` and
    ``indices: (B,) + S``, each batch element gathers from its own rows.
    """
    idx = np.asarray(indices)
    if not np.issubdtype(idx.dtype, np.integer):
        raise TypeError("gather_rows: indices must be integers")
    X = x.data
    if X.ndim == 2:
        M, d = X.shape
        flat = idx
        src = X
    elif X.ndim == 3:
        B, M, d = X.shape
        if idx.shape[:1] != (B,):
            raise ValueError(f"gather_rows: batch of indices {idx.shape} does not match {X.shape}")
        offsets = (np.arange(B) * M).reshape((B,) + (1,) * (idx.ndim - 1))
        flat = idx + offsets
        src = X.reshape(B * M, d)
    else:
        raise ValueError(f"gather_rows: expected 2-D or 3-D input, got {X.shape}")
    if idx.size and (idx.min() < 0 or idx.max() >= M):
        raise IndexError(f"gather_rows: index out of range [0, {M})")
    out = src[flat]

    def bwd(g):
        acc = np.zeros_like(src)
        np.add.at(acc, flat.reshape(-1), g.reshape(-1, d))
        return (acc.reshape(X.shape),)

    return _emit("gather_rows", out, (x,), bwd, "gather", idx.size * d)


def take(x: Tensor, index: int, axis: int) -> Tensor:
    """Select a single slice along ``axis`` (dimension removed)."""
    X = x.data
    out = np.take(X, index, axis=axis)

    def bwd(g):
        acc = np.zeros_like(X)
        sl = [slice(None)] * X.ndim
        sl[axis] = index
        acc[tuple(sl)] = g
        return (acc,)

    return _emit("take", out, (x,), bwd, "gather", out.size)


def take_along_last(x: Tensor, idx) -> Tensor:
    """``out[..., ] = x[..., idx[...]]``: one entry per leading position."""
    idx = np.asarray(idx, dtype=np.int64)
    X = x.data
    if idx.shape != X.shape[:-1]:
        raise ValueError(f"take_along_last: index shape {idx.shape} vs {X.shape}")
    n = X.shape[-1]
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise IndexError(f"take_along_last: index out of range [0, {n})")
    out = np.take_along_axis(X, idx[..., None], axis=-1)[..., 0]

    def bwd(g):
        acc = np.zeros_like(X)
        np.put_along_axis(acc, idx[..., None], g[..., None], axis=-1)
        return (acc,)

    return _emit("take_along_last", out, (x,), bwd, "gather", out.size)


def concat(tensors: Sequence[Tensor], axis: int) -> Tensor:
    arrays = [t.data for t in tensors]
    out = np.concatenate(arrays, axis=axis)
    cuts = np.cumsum([a.shape[axis] for a in arrays])[:-1]

    def bwd(g):
        return tuple(np.split(g, cuts, axis=axis))

    return _emit("concat", out, tuple(tensors), bwd, "gather", out.size)


def stack(tensors: Sequence[Tensor], axis: int = -1) -> Tensor:
    out = np.stack([t.data for t in tensors], axis=axis)

    def bwd(g):
        return tuple(np.moveaxis(g, axis, 0))

    return _emit("stack", out, tuple(tensors), bwd, "gather", out.size)


def expand(x: Tensor, lead: Sequence[int]) -> Tensor:
    """Repeat ``x`` over new leading dimensions ``lead``."""
    lead = tuple(lead)
    out = np.broadcast_to(x.data, lead + x.shape).copy()
    axes = tuple(range(len(lead)))
    return _emit("expand", out, (x,), lambda g: (g.sum(axis=axes),), "gather", out.size)


# --------------------------------------------------------------------------
# Reductions


def reduce_sum(x: Tensor, axis: int | None = None) -> Tensor:
    X = x.data
    out = X.sum(axis=axis)
    shape = X.shape

    def bwd(g):
        if axis is None:
            return (np.broadcast_to(g, shape).copy(),)
        return (np.broadcast_to(np.expand_dims(g, axis), shape).copy(),)

    return _emit("reduce_sum", np.asarray(out, dtype=np.float64), (x,), bwd, "reduction", X.size)


def reduce_mean(x: Tensor, axis: int | None = None) -> Tensor:
    n = x.data.size if axis is None else x.shape[axis]
    return scale(reduce_sum(x, axis), 1.0 / n)
