"""Attention and MLP blocks shared by both evaluator architectures.

All blocks act on the trailing two axes, so the same code handles a single
example ``(s, d)``, a batch ``(B, s, d)`` or a batch of lists ``(B, K, s, d)``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, fields

import numpy as np

from . import tensor as T
from .tensor import Tensor


@dataclass
class AttentionParams:
    Wq: Tensor
    Wk: Tensor
    Wv: Tensor
    Wo: Tensor
    gamma: Tensor
    beta: Tensor
    n_heads: int = 1

    @property
    def d(self) -> int:
        return self.Wq.shape[0]

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.{f.name}": getattr(self, f.name) for f in fields(self) if f.name != "n_heads"}

    @classmethod
    def from_flat(cls, params: dict[str, Tensor], prefix: str, n_heads: int = 1) -> "AttentionParams":
        names = ("Wq", "Wk", "Wv", "Wo", "gamma", "beta")
        return cls(*(params[f"{prefix}.{n}"] for n in names), n_heads=n_heads)


@dataclass
class MlpParams:
    W1: Tensor
    b1: Tensor
    W2: Tensor
    b2: Tensor

    def named(self, prefix: str) -> dict[str, Tensor]:
        return {f"{prefix}.{f.name}": getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_flat(cls, params: dict[str, Tensor], prefix: str) -> "MlpParams":
        return cls(*(params[f"{prefix}.{n}"] for n in ("W1", "b1", "W2", "b2")))


def uniform_matrix(rng: np.random.Generator, rows: int, cols: int) -> Tensor:
    """Uniform(-1/sqrt(rows), 1/sqrt(rows)) entries; ``rows`` is the fan-in."""
    bound = 1.0 / math.sqrt(rows)
    return Tensor(rng.uniform(-bound, bound, size=(rows, cols)), requires_grad=True)


def init_attention(rng: np.random.Generator, d: int, n_heads: int = 1) -> AttentionParams:
    if d % n_heads:
        raise ValueError(f"model dim {d} is not divisible by {n_heads} heads")
    mats = [uniform_matrix(rng, d, d) for _ in range(4)]
    gamma = Tensor(np.ones(d), requires_grad=True)
    beta = Tensor(np.zeros(d), requires_grad=True)
    return AttentionParams(*mats, gamma, beta, n_heads=n_heads)


def init_mlp(rng: np.random.Generator, d_in: int, d_hidden: int, d_out: int = 1) -> MlpParams:
    return MlpParams(
        uniform_matrix(rng, d_in, d_hidden),
        Tensor(np.zeros(d_hidden), requires_grad=True),
        uniform_matrix(rng, d_hidden, d_out),
        Tensor(np.zeros(d_out), requires_grad=True),
    )


def _split_heads(x: Tensor, h: int) -> Tensor:
    *lead, s, d = x.shape
    x = T.reshape(x, (*lead, s, h, d // h))
    return T.swapaxes(x, -2, -3)


def _merge_heads(x: Tensor) -> Tensor:
    *lead, h, s, dh = x.shape
    x = T.swapaxes(x, -2, -3)
    return T.reshape(x, (*lead, s, h * dh))


def attend(x: Tensor, source: Tensor, p: AttentionParams, return_weights: bool = False):
    """Post-norm attention block: ``LayerNorm(x + Attn(x, source) Wo)``.

    Queries come from ``x``; keys and values from ``source``. There is no
    positional encoding and no masking.
    """
    d = p.d
    if x.shape[-1] != d or source.shape[-1] != d:
        raise ValueError(f"attention: inputs {x.shape}, {source.shape} do not match model dim {d}")
    q = T.matmul(x, p.Wq)
    k = T.matmul(source, p.Wk)
    v = T.matmul(source, p.Wv)
    h = p.n_heads
    if h > 1:
        q, k, v = _split_heads(q, h), _split_heads(k, h), _split_heads(v, h)
    logits = T.scale(T.matmul(q, T.transpose(k)), 1.0 / math.sqrt(d // h))
    weights = T.softmax(logits)
    o = T.matmul(weights, v)
    if h > 1:
        o = _merge_heads(o)
    out = T.layer_norm(T.add(x, T.matmul(o, p.Wo)), p.gamma, p.beta)
    if return_weights:
        return out, weights
    return out


def self_attention(x: Tensor, p: AttentionParams, return_weights: bool = False):
    return attend(x, x, p, return_weights)


def cross_attention(x: Tensor, ctx: Tensor, p: AttentionParams, return_weights: bool = False):
    return attend(x, ctx, p, return_weights)


def mlp_head(c: Tensor, p: MlpParams) -> Tensor:
    """``W2 gelu(W1 c + b1) + b2`` applied row-wise; one score per row."""
    if c.shape[-1] != p.W1.shape[0]:
        raise ValueError(f"mlp_head: input dim {c.shape[-1]} vs W1 {p.W1.shape}")
    hidden = T.gelu(T.broadcast_add(T.matmul(c, p.W1), p.b1))
    out = T.broadcast_add(T.matmul(hidden, p.W2), p.b2)
    return T.reshape(out, c.shape[:-1])
