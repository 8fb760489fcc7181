"""Synthetic queries, candidate lists, MNL labels and additive selection bias.

World ("ground truth") parameters come from a world seed; examples come from
a data seed. Independent random streams are derived per example and per
purpose, so e.g. changing K leaves the pool and context draws untouched and
changing a bias spec leaves labels' uniform draws untouched.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import asdict, dataclass, field

import numpy as np

from .evaluators import EvaluatorConfig
from .rng import derive_seed, generator

LABEL_MODES = ("clean", "biased")


@dataclass(frozen=True)
class BiasSpec:
    mu_mean: float = 0.0
    mu_std: float = 0.0
    nu_std: float = 0.0
    eps_std: float = 0.0
    regime: str = "train"

    def __post_init__(self):
        for name in ("mu_std", "nu_std", "eps_std"):
            if getattr(self, name) < 0:
                raise ValueError(f"BiasSpec.{name} must be >= 0")
        if self.regime not in ("train", "test"):
            raise ValueError(f"BiasSpec.regime must be 'train' or 'test', got {self.regime!r}")


NO_BIAS = BiasSpec()


@dataclass
class WorldWeights:
    """Fixed ground-truth parameters of one synthetic world."""

    ctx_basis: np.ndarray  # r x d, maps a user latent to context embeddings
    w_base: np.ndarray  # f, query-independent item preference
    w_ctx: np.ndarray  # f x d, context-dependent preference
    gamma: float = 0.85
    lambda_div: float = 0.3
    ctx_noise: float = 0.5
    seed: int = 0

    def preference(self, ctx: np.ndarray) -> np.ndarray:
        """Preference vector over item features for a ``(T, d)`` context."""
        f = self.w_base.shape[0]
        return (self.w_base + self.w_ctx @ ctx.mean(axis=0)) / np.sqrt(f)


def make_world(cfg: EvaluatorConfig, seed: int, rank: int = 4, gamma: float = 0.85, lambda_div: float = 0.3) -> WorldWeights:
    g = generator(seed, "world")
    return WorldWeights(
        ctx_basis=g.normal(0.0, 1.0 / np.sqrt(rank), size=(rank, cfg.d)),
        w_base=g.normal(size=cfg.f),
        w_ctx=g.normal(0.0, 1.0 / np.sqrt(cfg.d), size=(cfg.f, cfg.d)),
        gamma=gamma,
        lambda_div=lambda_div,
        seed=seed,
    )


def ground_truth_utility(ctx: np.ndarray, pool_feats: np.ndarray, items, world: WorldWeights) -> float:
    """Position-discounted relevance plus intra-list diversity of one list.

    ``sum_pos gamma**pos * <w(ctx), x_pos> + lambda_div * mean_{i<j} ||x_i - x_j||``
    with positions counted from 0.
    """
    feats = pool_feats[np.asarray(items)]
    rel = feats @ world.preference(ctx)
    utility = float(rel @ world.gamma ** np.arange(len(rel)))
    if world.lambda_div and len(feats) > 1:
        diff = feats[:, None, :] - feats[None, :, :]
        dist = np.sqrt((diff * diff).sum(-1))
        iu = np.triu_indices(len(feats), 1)
        utility += world.lambda_div * float(dist[iu].mean())
    return utility


def utilities(ctx: np.ndarray, pool_feats: np.ndarray, lists: np.ndarray, world: WorldWeights) -> np.ndarray:
    return np.array([ground_truth_utility(ctx, pool_feats, row, world) for row in lists])


def softmax_np(u: np.ndarray) -> np.ndarray:
    z = np.exp(u - np.max(u, axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def mnl_sample(u: np.ndarray, rng: np.random.Generator) -> int:
    """One multinomial-logit draw by inverse CDF on a single uniform."""
    cdf = np.cumsum(softmax_np(np.asarray(u, dtype=np.float64)))
    return int(min(np.searchsorted(cdf, rng.random(), side="right"), len(cdf) - 1))


@dataclass
class SsbDraw:
    r: np.ndarray
    mu: float
    nu: np.ndarray
    eps: np.ndarray


def apply_ssb(u: np.ndarray, spec: BiasSpec, rng: np.random.Generator) -> SsbDraw:
    """Observed rewards ``r = u + mu + nu + eps`` with ``sum(nu) == 0``.

    Draws are consumed even for zero standard deviations so that two specs
    evaluated on the same stream see the same underlying normals.
    """
    u = np.asarray(u, dtype=np.float64)
    K = u.shape[0]
    mu = spec.mu_mean + spec.mu_std * rng.standard_normal()
    nu = spec.nu_std * rng.standard_normal(K)
    nu = nu - nu.mean()
    eps = spec.eps_std * rng.standard_normal(K)
    return SsbDraw(u + mu + nu + eps, float(mu), nu, eps)


@dataclass
class Example:
    ctx: np.ndarray
    pool_feats: np.ndarray
    lists: np.ndarray
    u_star: np.ndarray
    y: int
    r: np.ndarray
    y_bayes: int
    mu: float = 0.0
    nu: np.ndarray | None = None
    eps: np.ndarray | None = None

    @property
    def rho(self) -> float:
        K, l = self.lists.shape
        return K * l / self.pool_feats.shape[0]


def gen_example(
    cfg: EvaluatorConfig,
    world: WorldWeights,
    seed: int,
    *,
    spec: BiasSpec = NO_BIAS,
    label_mode: str = "clean",
) -> Example:
    """One query: context, pool, K lists of l distinct items, utilities, label, rewards.

    ``seed`` roots the per-purpose streams of this example.
    """
    if cfg.l > cfg.M:
        raise ValueError(f"list length {cfg.l} exceeds pool size {cfg.M}")
    if label_mode not in LABEL_MODES:
        raise ValueError(f"label_mode must be one of {LABEL_MODES}")
    g_ctx = generator(seed, "context")
    z = g_ctx.standard_normal(world.ctx_basis.shape[0])
    latent = z + world.ctx_noise * g_ctx.standard_normal((cfg.T, z.shape[0]))
    ctx = latent @ world.ctx_basis
    pool = generator(seed, "pool").standard_normal((cfg.M, cfg.f))
    g_lists = generator(seed, "lists")
    lists = np.stack([g_lists.permutation(cfg.M)[: cfg.l] for _ in range(cfg.K)]).astype(np.int64)
    u = utilities(ctx, pool, lists, world)
    draw = apply_ssb(u, spec, generator(seed, "bias"))
    logits = u if label_mode == "clean" else u + draw.mu + draw.nu
    y = mnl_sample(logits, generator(seed, "labels"))
    return Example(ctx, pool, lists, u, y, draw.r, int(np.argmax(u)), draw.mu, draw.nu, draw.eps)


@dataclass
class Dataset:
    """Examples stacked along a leading axis."""

    ctx: np.ndarray
    pool_feats: np.ndarray
    lists: np.ndarray
    u_star: np.ndarray
    y: np.ndarray
    r: np.ndarray
    y_bayes: np.ndarray
    mu: np.ndarray
    nu: np.ndarray
    eps: np.ndarray
    header: dict = field(default_factory=dict)

    def __len__(self) -> int:
        return self.ctx.shape[0]

    def __getitem__(self, i: int) -> Example:
        return Example(
            self.ctx[i], self.pool_feats[i], self.lists[i], self.u_star[i], int(self.y[i]),
            self.r[i], int(self.y_bayes[i]), float(self.mu[i]), self.nu[i], self.eps[i],
        )

    @property
    def K(self) -> int:
        return self.lists.shape[1]

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(*(getattr(self, n)[idx] for n in _FIELDS), header=dict(self.header))

    @classmethod
    def from_examples(cls, examples: list[Example], header: dict | None = None) -> "Dataset":
        if not examples:
            raise ValueError("dataset needs at least one example")
        cols = {n: np.stack([np.asarray(getattr(e, n)) for e in examples]) for n in _FIELDS}
        for n in ("lists", "y", "y_bayes"):
            cols[n] = cols[n].astype(np.int64)
        return cls(**cols, header=header or {})

    def to_bytes(self) -> bytes:
        return dataset_bytes(self)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Dataset":
        return read_dataset(data)


_FIELDS = ("ctx", "pool_feats", "lists", "u_star", "y", "r", "y_bayes", "mu", "nu", "eps")


def gen_split(
    n: int,
    cfg: EvaluatorConfig,
    world: WorldWeights,
    spec: BiasSpec,
    seed: int,
    split: str,
    label_mode: str = "clean",
) -> Dataset:
    """``n`` examples of one split; example i is rooted at ``(seed, split, i)``."""
    if n < 1:
        raise ValueError("n must be >= 1")
    examples = [
        gen_example(cfg, world, derive_seed(seed, split, i), spec=spec, label_mode=label_mode)
        for i in range(n)
    ]
    header = {
        "config": asdict(cfg),
        "seed": int(seed),
        "world_seed": int(world.seed),
        "split": split,
        "label_mode": label_mode,
        "bias": asdict(spec),
    }
    return Dataset.from_examples(examples, header)


def gen_dataset(
    n: int,
    cfg: EvaluatorConfig,
    world: WorldWeights,
    train_spec: BiasSpec,
    test_spec: BiasSpec,
    seed: int,
    label_mode: str = "clean",
    n_test: int | None = None,
) -> tuple[Dataset, Dataset]:
    """Train and test splits sharing the context/pool/list law, biased per regime."""
    train = gen_split(n, cfg, world, train_spec, seed, "train", label_mode)
    test = gen_split(n if n_test is None else n_test, cfg, world, test_spec, seed, "test", label_mode)
    return train, test


# --------------------------------------------------------------------------
# Dataset dump layout (integers little-endian):
#   8 bytes magic b"FEVDATA1"
#   u32 header length, header as canonical JSON (config, seeds, split, bias)
#   u64 number of examples
#   per example, in this order:
#     ctx (T*d f8), pool_feats (M*f f8), lists (K*l i8), u_star (K f8),
#     y (i8), r (K f8), y_bayes (i8), mu (f8), nu (K f8), eps (K f8)

DATA_MAGIC = b"FEVDATA1"
_FLOAT = {"ctx", "pool_feats", "u_star", "r", "mu", "nu", "eps"}


def dataset_bytes(ds: Dataset) -> bytes:
    buf = io.BytesIO()
    buf.write(DATA_MAGIC)
    header = dict(ds.header)
    header["shapes"] = {n: list(getattr(ds, n).shape[1:]) for n in _FIELDS}
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    buf.write(struct.pack("<I", len(blob)))
    buf.write(blob)
    buf.write(struct.pack("<Q", len(ds)))
    cols = [np.ascontiguousarray(getattr(ds, n), dtype="<f8" if n in _FLOAT else "<i8") for n in _FIELDS]
    for i in range(len(ds)):
        for col in cols:
            buf.write(col[i].tobytes())
    return buf.getvalue()


def read_dataset(data: bytes) -> Dataset:
    view = memoryview(data)
    if bytes(view[:8]) != DATA_MAGIC:
        raise ValueError("not a flasheval dataset dump (bad magic)")
    (hlen,) = struct.unpack_from("<I", view, 8)
    header = json.loads(bytes(view[12 : 12 + hlen]).decode("utf-8"))
    pos = 12 + hlen
    (n,) = struct.unpack_from("<Q", view, pos)
    pos += 8
    shapes = {k: tuple(v) for k, v in header.pop("shapes").items()}
    cols = {k: [] for k in _FIELDS}
    for _ in range(n):
        for name in _FIELDS:
            dtype = "<f8" if name in _FLOAT else "<i8"
            count = int(np.prod(shapes[name])) if shapes[name] else 1
            arr = np.frombuffer(view, dtype=dtype, count=count, offset=pos).reshape(shapes[name])
            cols[name].append(arr)
            pos += 8 * count
    if pos != len(data):
        raise ValueError("trailing bytes after dataset records")
    stacked = {
        k: np.stack(v).astype(np.float64 if k in _FLOAT else np.int64) for k, v in cols.items()
    }
    return Dataset(**stacked, header=header)
