"""Training losses, Adam, and the minibatch training loop."""

from __future__ import annotations

import csv
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .evaluators import Evaluator, select_top1
from .rng import generator
from .tensor import NumericalError, Tape, Tensor

LOSS_KINDS = ("mse", "bce", "ce")
BCE_CLAMP = 1e-7


def _target(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def mse_loss(scores: Tensor, target) -> Tensor:
    """Mean squared error over every element."""
    target = _target(target)
    if scores.shape != target.shape:
        raise ValueError(f"mse_loss: scores {scores.shape} vs targets {target.shape}")
    diff = T.sub(scores, target)
    return T.reduce_mean(T.mul(diff, diff))


def bce_loss(scores: Tensor, target) -> Tensor:
    """Binary cross-entropy of ``sigmoid(scores)`` against targets in [0, 1].

    Probabilities are clamped to ``[1e-7, 1 - 1e-7]`` before the logs.
    """
    target = _target(target)
    if scores.shape != target.shape:
        raise ValueError(f"bce_loss: scores {scores.shape} vs targets {target.shape}")
    t = target.data
    if (t < 0).any() or (t > 1).any():
        raise ValueError("bce_loss: targets must lie in [0, 1]")
    p = T.clip(T.sigmoid(scores), BCE_CLAMP, 1.0 - BCE_CLAMP)
    pos = T.mul(T.log(p), target)
    neg = T.mul(T.log(T.add(T.scale(p, -1.0), 1.0)), Tensor(1.0 - t))
    return T.scale(T.reduce_mean(T.add(pos, neg)), -1.0)


def softmax_ce_loss(scores: Tensor, y) -> Tensor:
    """``-log softmax(scores)[y]``, averaged over any leading batch axis."""
    y = np.asarray(y, dtype=np.int64)
    K = scores.shape[-1]
    if y.size and (y.min() < 0 or y.max() >= K):
        raise IndexError(f"softmax_ce_loss: label outside [0, {K})")
    picked = T.take_along_last(T.log_softmax(scores), y)
    return T.scale(T.reduce_mean(picked), -1.0)


LOSSES = {"mse": mse_loss, "bce": bce_loss, "ce": softmax_ce_loss}


def minmax_targets(r: np.ndarray) -> np.ndarray:
    """Per-example min-max normalization of rewards to [0, 1] (0.5 where constant)."""
    r = np.asarray(r, dtype=np.float64)
    lo = r.min(axis=-1, keepdims=True)
    span = r.max(axis=-1, keepdims=True) - lo
    safe = np.where(span > 0, span, 1.0)
    return np.where(span > 0, (r - lo) / safe, 0.5)


def loss_targets(dataset, kind: str) -> np.ndarray:
    if kind == "mse":
        return dataset.r
    if kind == "bce":
        return minmax_targets(dataset.r)
    if kind == "ce":
        return dataset.y
    raise ValueError(f"unknown loss kind {kind!r}; expected one of {LOSS_KINDS}")


def per_example_losses(scores: np.ndarray, targets: np.ndarray, kind: str) -> np.ndarray:
    """Plain-numpy loss of each example; the reference for surrogate risks."""
    s = np.asarray(scores, dtype=np.float64)
    if kind == "mse":
        return ((s - targets) ** 2).mean(axis=-1)
    if kind == "bce":
        e = np.exp(-np.abs(s))
        p = np.clip(np.where(s >= 0, 1.0, e) / (1.0 + e), BCE_CLAMP, 1 - BCE_CLAMP)
        return -(targets * np.log(p) + (1 - targets) * np.log(1 - p)).mean(axis=-1)
    if kind == "ce":
        m = s.max(axis=-1, keepdims=True)
        lse = np.log(np.exp(s - m).sum(axis=-1)) + m[..., 0]
        return lse - np.take_along_axis(s, np.asarray(targets)[..., None], axis=-1)[..., 0]
    raise ValueError(f"unknown loss kind {kind!r}")


# --------------------------------------------------------------------------
# Adam


@dataclass
class AdamState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], grads: dict[str, np.ndarray | None], state: AdamState) -> None:
    """One bias-corrected Adam update, applied in place."""
    for name, g in grads.items():
        if g is not None and not np.isfinite(g).all():
            raise NumericalError(f"non-finite gradient for parameter {name!r}")
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1**t
    c2 = 1.0 - state.beta2**t
    for name, p in params.items():
        g = grads.get(name)
        if g is None:
            continue
        if g.shape != p.shape:
            raise ValueError(f"gradient shape {g.shape} does not match parameter {name!r} {p.shape}")
        m = state.m.get(name)
        if m is None:
            m = state.m[name] = np.zeros_like(p.data)
            state.v[name] = np.zeros_like(p.data)
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * g
        v *= state.beta2
        v += (1.0 - state.beta2) * g * g
        p.data -= state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


# --------------------------------------------------------------------------
# Training loop


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    eval_top1_acc: float
    eval_surrogate_risk: float
    wall_ms: float


@dataclass
class TrainTrace:
    loss_kind: str
    records: list[EpochRecord] = field(default_factory=list)

    @property
    def train_losses(self) -> list[float]:
        return [r.train_loss for r in self.records]

    def metric_rows(self) -> list[tuple]:
        """Records without the timing column (the deterministic part)."""
        return [(r.epoch, r.train_loss, r.eval_top1_acc, r.eval_surrogate_risk) for r in self.records]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["epoch", "train_loss", "eval_top1_acc", "eval_surrogate_risk", "wall_ms"])
            for r in self.records:
                w.writerow([r.epoch, repr(r.train_loss), repr(r.eval_top1_acc), repr(r.eval_surrogate_risk), f"{r.wall_ms:.3f}"])


def check_pairing(model: Evaluator, loss_kind: str) -> None:
    if loss_kind not in LOSS_KINDS:
        raise ValueError(f"unknown loss kind {loss_kind!r}; expected one of {LOSS_KINDS}")
    if model.variant == "independent" and loss_kind == "ce":
        raise ValueError(
            "the independent evaluator trains with mse or bce only; a listwise loss would "
            "have to keep all K per-list graphs alive"
        )


def dataset_risk(model: Evaluator, dataset, loss_kind: str, scores: np.ndarray | None = None) -> float:
    s = model.scores(dataset) if scores is None else scores
    return float(per_example_losses(s, loss_targets(dataset, loss_kind), loss_kind).mean())


def train(
    model: Evaluator,
    dataset,
    loss_kind: str,
    epochs: int,
    batch_size: int,
    rng,
    eval_set=None,
    lr: float = 1e-3,
    state: AdamState | None = None,
) -> TrainTrace:
    """Epoch-shuffled minibatch Adam; the model is updated in place.

    ``train_loss`` of an epoch is the surrogate risk on the full training set
    after that epoch. ``rng`` is a seed or a numpy generator for shuffling.
    """
    check_pairing(model, loss_kind)
    if len(dataset) == 0:
        raise ValueError("training set is empty")
    if not isinstance(rng, np.random.Generator):
        rng = generator(int(rng), "shuffle")
    state = AdamState(lr=lr) if state is None else state
    loss_fn = LOSSES[loss_kind]
    targets = loss_targets(dataset, loss_kind)
    params = model.params
    trace = TrainTrace(loss_kind)
    n = len(dataset)
    for epoch in range(1, epochs + 1):
        t0 = time.perf_counter()
        order = rng.permutation(n)
        for start in range(0, n, batch_size):
            idx = order[start : start + batch_size]
            with Tape() as tape:
                scores = model.forward(dataset.ctx[idx], dataset.pool_feats[idx], dataset.lists[idx])
                loss = loss_fn(scores, targets[idx])
            tape.backward(loss)
            adam_step(params, {k: p.grad for k, p in params.items()}, state)
            for p in params.values():
                p.grad = None
        wall_ms = (time.perf_counter() - t0) * 1e3
        train_loss = dataset_risk(model, dataset, loss_kind)
        acc = risk = float("nan")
        if eval_set is not None:
            s = model.scores(eval_set)
            acc = float(np.mean(select_top1(s) == eval_set.y_bayes))
            risk = dataset_risk(model, eval_set, loss_kind, scores=s)
        trace.records.append(EpochRecord(epoch, train_loss, acc, risk, wall_ms))
    return trace
