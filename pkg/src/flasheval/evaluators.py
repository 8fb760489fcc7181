"""The independent (one list per pass) and joint (pool encoded once) list evaluators.

Inputs for one query:

* ``ctx``: ``(T, d)`` context embeddings,
* ``pool_feats``: ``(M, f)`` raw item features of the candidate pool,
* ``lists``: ``(K, l)`` integer matrix, row k holding the pool indices of list k.

A leading batch axis on all three is accepted everywhere; scores then have
shape ``(B, K)`` instead of ``(K,)``.

FLOPs are tagged by stage: ``item_encoding``, ``list_aggregation``,
``cross_list`` and ``scoring``.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, replace
from pathlib import Path

import numpy as np

from . import tensor as T
from .layers import (
    AttentionParams,
    MlpParams,
    attend,
    init_attention,
    init_mlp,
    mlp_head,
    uniform_matrix,
)
from .rng import generator
from .tensor import Tensor

VARIANTS = ("independent", "flash", "flash_no_listattn")


@dataclass(frozen=True)
class EvaluatorConfig:
    d: int = 64
    n_heads: int = 1
    f: int = 16
    T: int = 8
    M: int = 60
    K: int = 10
    l: int = 6
    d_ff: int = 64
    variant: str = "flash"
    pool_layers: int = 1
    ctx_layers: int = 1
    list_layers: int = 1
    xlist_layers: int = 1

    def __post_init__(self):
        for name in ("d", "n_heads", "f", "T", "M", "K", "l", "d_ff"):
            if getattr(self, name) < 1:
                raise ValueError(f"EvaluatorConfig.{name} must be positive, got {getattr(self, name)}")
        for name in ("pool_layers", "ctx_layers", "list_layers", "xlist_layers"):
            if getattr(self, name) < 0:
                raise ValueError(f"EvaluatorConfig.{name} must be >= 0")
        if self.l > self.M:
            raise ValueError(f"list length l={self.l} exceeds pool size M={self.M}")
        if self.d % self.n_heads:
            raise ValueError(f"d={self.d} not divisible by n_heads={self.n_heads}")
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")

    @property
    def rho(self) -> float:
        return self.K * self.l / self.M

    def with_(self, **changes) -> "EvaluatorConfig":
        return replace(self, **changes)


Params = dict[str, Tensor]


def init_params(config: EvaluatorConfig, rng: np.random.Generator | int) -> Params:
    """Fresh parameters for ``config.variant``; deterministic given the seed.

    Matrices are Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)), biases and
    layer-norm shifts zero, layer-norm scales one.
    """
    if not isinstance(rng, np.random.Generator):
        rng = generator(int(rng), "init")
    c = config
    params: Params = {"item_proj": uniform_matrix(rng, c.f, c.d)}
    stages = [("ctx", c.ctx_layers), ("list", c.list_layers)]
    if c.variant != "independent":
        stages.insert(0, ("pool", c.pool_layers))
    if c.variant == "flash":
        stages.append(("xlist", c.xlist_layers))
    for prefix, n in stages:
        for i in range(n):
            params.update(init_attention(rng, c.d, c.n_heads).named(f"{prefix}{i}"))
    bound = 1.0 / np.sqrt(c.d)
    params["pos"] = Tensor(rng.uniform(-bound, bound, size=(c.l + 1, c.d)), requires_grad=True)
    params["cls"] = Tensor(rng.uniform(-bound, bound, size=(c.d,)), requires_grad=True)
    params.update(init_mlp(rng, c.d, c.d_ff, 1).named("head"))
    for name, t in params.items():
        t.name = name
    return params


def _attn(params: Params, prefix: str, config: EvaluatorConfig) -> AttentionParams:
    return AttentionParams.from_flat(params, prefix, config.n_heads)


def _as_input(x) -> Tensor:
    return x if isinstance(x, Tensor) else Tensor(x)


def _check_inputs(ctx: Tensor, pool: Tensor, lists: np.ndarray, c: EvaluatorConfig) -> None:
    if ctx.shape[-1] != c.d:
        raise ValueError(f"context dim {ctx.shape[-1]} does not match d={c.d}")
    if pool.shape[-1] != c.f:
        raise ValueError(f"pool feature dim {pool.shape[-1]} does not match f={c.f}")
    if lists.shape[-1] != c.l:
        raise ValueError(f"list length {lists.shape[-1]} does not match l={c.l}")
    M = pool.shape[-2]
    if lists.size and (lists.min() < 0 or lists.max() >= M):
        raise IndexError(f"list index out of range for a pool of {M} items")


def _summarize_lists(rows: Tensor, params: Params, c: EvaluatorConfig) -> Tensor:
    """Prepend CLS, add position embeddings, list self-attention, read CLS row.

    ``rows`` has shape ``(..., l, d)``; the result has shape ``(..., d)``.
    """
    lead = rows.shape[:-2]
    cls = T.expand(params["cls"], lead + (1,))
    tokens = T.broadcast_add(T.concat([cls, rows], axis=-2), params["pos"])
    for i in range(c.list_layers):
        tokens = attend(tokens, tokens, _attn(params, f"list{i}", c))
    return T.take(tokens, 0, axis=-2)


def encode_pool(ctx, pool_feats, params: Params, c: EvaluatorConfig) -> Tensor:
    """Item encoding shared by every list: projection, pool self-attention, context cross-attention."""
    ctx, pool = _as_input(ctx), _as_input(pool_feats)
    with T.stage("item_encoding"):
        h = T.matmul(pool, params["item_proj"])
        for i in range(c.pool_layers):
            h = attend(h, h, _attn(params, f"pool{i}", c))
        for i in range(c.ctx_layers):
            h = attend(h, ctx, _attn(params, f"ctx{i}", c))
    return h


def _flash(ctx, pool_feats, lists, params: Params, c: EvaluatorConfig, cross_list: bool) -> Tensor:
    ctx, pool = _as_input(ctx), _as_input(pool_feats)
    lists = np.asarray(lists)
    _check_inputs(ctx, pool, lists, c)
    h2 = encode_pool(ctx, pool, params, c)
    with T.stage("list_aggregation"):
        emb = _summarize_lists(T.gather_rows(h2, lists), params, c)
    if cross_list:
        with T.stage("cross_list"):
            for i in range(c.xlist_layers):
                emb = attend(emb, emb, _attn(params, f"xlist{i}", c))
    with T.stage("scoring"):
        return mlp_head(emb, MlpParams.from_flat(params, "head"))


def flash_forward(ctx, pool_feats, lists, params: Params, config: EvaluatorConfig) -> Tensor:
    """Score all K lists in one pass; the pool is encoded exactly once."""
    return _flash(ctx, pool_feats, lists, params, config, cross_list=True)


def flash_forward_no_listattn(ctx, pool_feats, lists, params: Params, config: EvaluatorConfig) -> Tensor:
    """The joint evaluator with the cross-list attention layer removed."""
    return _flash(ctx, pool_feats, lists, params, config, cross_list=False)


def independent_forward(ctx, pool_feats, lists, params: Params, config: EvaluatorConfig) -> Tensor:
    """Score each list in its own full pass; nothing is shared between passes."""
    c = config
    ctx, pool = _as_input(ctx), _as_input(pool_feats)
    lists = np.asarray(lists)
    _check_inputs(ctx, pool, lists, c)
    head = MlpParams.from_flat(params, "head")
    scores = []
    for k in range(lists.shape[-2]):
        with T.stage("item_encoding"):
            h = T.matmul(T.gather_rows(pool, lists[..., k, :]), params["item_proj"])
            for i in range(c.ctx_layers):
                h = attend(h, ctx, _attn(params, f"ctx{i}", c))
        with T.stage("list_aggregation"):
            emb = _summarize_lists(h, params, c)
        with T.stage("scoring"):
            scores.append(mlp_head(T.reshape(emb, emb.shape[:-1] + (1, c.d)), head))
    with T.stage("scoring"):
        return T.reshape(T.stack(scores, axis=-1), lists.shape[:-1])


FORWARDS = {
    "independent": independent_forward,
    "flash": flash_forward,
    "flash_no_listattn": flash_forward_no_listattn,
}


def select_top1(scores) -> int | np.ndarray:
    """Argmax over the last axis; ties go to the lowest index."""
    s = scores.data if isinstance(scores, Tensor) else np.asarray(scores, dtype=np.float64)
    if s.size == 0 or s.shape[-1] == 0:
        raise ValueError("select_top1 needs at least one score")
    if s.ndim == 1:
        return int(np.argmax(s))
    return np.argmax(s, axis=-1)


class Evaluator:
    """A configured architecture plus its parameters."""

    def __init__(self, config: EvaluatorConfig, params: Params | None = None, seed: int = 0):
        self.config = config
        self.params = init_params(config, seed) if params is None else params

    @property
    def variant(self) -> str:
        return self.config.variant

    def forward(self, ctx, pool_feats, lists) -> Tensor:
        return FORWARDS[self.config.variant](ctx, pool_feats, lists, self.params, self.config)

    __call__ = forward

    def scores(self, dataset, batch_size: int = 256) -> np.ndarray:
        """Scores ``(n, K)`` for every example of a dataset, without recording a tape."""
        out = []
        for start in range(0, len(dataset), batch_size):
            sl = slice(start, start + batch_size)
            out.append(self.forward(dataset.ctx[sl], dataset.pool_feats[sl], dataset.lists[sl]).data)
        return np.concatenate(out, axis=0)

    def n_parameters(self) -> int:
        return int(sum(t.data.size for t in self.params.values()))

    def copy(self) -> "Evaluator":
        params = {}
        for name, t in self.params.items():
            params[name] = Tensor(t.data.copy(), requires_grad=True, name=name)
        return Evaluator(self.config, params)

    def to_bytes(self) -> bytes:
        return checkpoint_bytes(self.config, self.params)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Evaluator":
        config, params = read_checkpoint(Path(path).read_bytes())
        return cls(config, params)


# --------------------------------------------------------------------------
# Checkpoint layout (all integers little-endian):
#   8 bytes  magic b"FEVCKPT1"
#   u32      length of the config block, then the config as canonical JSON
#   u32      number of tensors
#   per tensor, in sorted name order:
#     u16 name length, UTF-8 name, u8 ndim, ndim x u32 dims,
#     prod(dims) float64 values in row-major order

CKPT_MAGIC = b"FEVCKPT1"


def checkpoint_bytes(config: EvaluatorConfig, params: Params) -> bytes:
    buf = io.BytesIO()
    buf.write(CKPT_MAGIC)
    blob = json.dumps(asdict(config), sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    buf.write(struct.pack("<I", len(params)))
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name].data, dtype="<f8")
        raw = name.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(arr.tobytes())
    return buf.getvalue()


def read_checkpoint(data: bytes) -> tuple[EvaluatorConfig, Params]:
    view = memoryview(data)
    if bytes(view[:8]) != CKPT_MAGIC:
        raise ValueError("not a flasheval checkpoint (bad magic)")
    pos = 8
    (n,) = struct.unpack_from("<I", view, pos)
    pos += 4
    config = EvaluatorConfig(**json.loads(bytes(view[pos : pos + n]).decode("utf-8")))
    pos += n
    (count,) = struct.unpack_from("<I", view, pos)
    pos += 4
    params: Params = {}
    for _ in range(count):
        (ln,) = struct.unpack_from("<H", view, pos)
        pos += 2
        name = bytes(view[pos : pos + ln]).decode("utf-8")
        pos += ln
        (ndim,) = struct.unpack_from("<B", view, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", view, pos)
        pos += 4 * ndim
        size = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(view, dtype="<f8", count=size, offset=pos).reshape(shape)
        pos += 8 * size
        params[name] = Tensor(arr.astype(np.float64), requires_grad=True, name=name)
    if pos != len(data):
        raise ValueError("trailing bytes after checkpoint tensors")
    return config, params
