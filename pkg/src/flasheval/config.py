"""Experiment configuration: flat ``key = value`` files plus flag overrides.

A config file holds one assignment per line; blank lines and lines starting
with ``#`` are ignored. Bias parameters are namespaced by regime, e.g.
``train.mu_mean = 1.0``. Values given on the command line replace file
values. Every key has a per-experiment default, so an empty file is a valid
config once the experiment kind is known.
"""

from __future__ import annotations

import os
from dataclasses import asdict, dataclass, fields
from pathlib import Path

from .evaluators import VARIANTS, EvaluatorConfig
from .objectives import LOSS_KINDS
from .synthgen import LABEL_MODES, BiasSpec

KINDS = ("flops", "latency", "accuracy", "gengap", "ssb", "gradcheck")
RISK_KINDS = ("accuracy", "gengap", "ssb")


class ConfigError(ValueError):
    """Invalid configuration; ``where`` names the offending line or flag."""

    def __init__(self, message: str, where: str | None = None):
        self.where = where
        super().__init__(f"{where}: {message}" if where else message)


def _int_list(text: str) -> tuple[int, ...]:
    if not text.strip():
        return ()
    parts = [p.strip() for p in text.split(",")]
    if not parts or any(p == "" for p in parts):
        raise ValueError(f"expected a comma-separated list of integers, got {text!r}")
    return tuple(int(p) for p in parts)


_MODEL_KEYS = [f.name for f in fields(EvaluatorConfig) if f.name != "variant"]
_BIAS_KEYS = ["mu_mean", "mu_std", "nu_std", "eps_std"]

SCHEMA: dict[str, type | object] = {
    "kind": str,
    **{k: int for k in _MODEL_KEYS},
    "n_train": int,
    "n_eval": int,
    "loss": str,
    "epochs": int,
    "batch_size": int,
    "lr": float,
    "seeds": _int_list,
    "k_sweep": _int_list,
    "label_mode": str,
    "world_seed": int,
    **{f"train.{k}": float for k in _BIAS_KEYS},
    **{f"test.{k}": float for k in _BIAS_KEYS},
    "out": str,
    "reps": int,
    "warmup": int,
    "parallel": int,
    "variant": str,
}

# Small models keep the training experiments within minutes on one core; the
# cost experiments use the full-width operating point.
_TRAIN_MODEL = {"d": 16, "f": 8, "T": 4, "M": 12, "l": 3, "K": 8, "d_ff": 16}

_BASE: dict[str, object] = {
    "d": 64, "n_heads": 1, "f": 16, "T": 8, "M": 60, "K": 10, "l": 6, "d_ff": 64,
    "pool_layers": 1, "ctx_layers": 1, "list_layers": 1, "xlist_layers": 1,
    "n_train": 512, "n_eval": 500, "loss": "", "epochs": 20, "batch_size": 32, "lr": 1e-3,
    "seeds": (0,), "k_sweep": (), "label_mode": "clean", "world_seed": 1000,
    **{f"train.{k}": 0.0 for k in _BIAS_KEYS},
    **{f"test.{k}": 0.0 for k in _BIAS_KEYS},
    "out": "", "reps": 30, "warmup": 3, "parallel": 1, "variant": "",
}

KIND_DEFAULTS: dict[str, dict[str, object]] = {
    "flops": {"f": 2048, "T": 16, "k_sweep": (10, 20, 50)},
    "latency": {"f": 2048, "T": 16, "k_sweep": (10, 20, 30, 40, 50), "reps": 30},
    "accuracy": {**_TRAIN_MODEL, "seeds": tuple(range(20)), "train.eps_std": 1.0},
    "gengap": {
        **_TRAIN_MODEL, "M": 24, "k_sweep": (2, 8, 32), "n_train": 128, "epochs": 50,
        "seeds": tuple(range(20)),
    },
    "ssb": {
        **_TRAIN_MODEL, "n_train": 256, "n_eval": 300, "epochs": 10, "seeds": tuple(range(20)),
        "label_mode": "biased", "train.mu_mean": 1.0,
    },
    "gradcheck": {"d": 8, "n_heads": 2, "f": 5, "T": 3, "M": 6, "l": 3, "K": 4, "d_ff": 16},
}


@dataclass(frozen=True)
class ExperimentConfig:
    kind: str
    model: EvaluatorConfig
    n_train: int
    n_eval: int
    loss: str
    epochs: int
    batch_size: int
    lr: float
    seeds: tuple[int, ...]
    k_sweep: tuple[int, ...]
    label_mode: str
    world_seed: int
    train_bias: BiasSpec
    test_bias: BiasSpec
    out: str
    reps: int
    warmup: int
    parallel: int
    variant: str

    def flat(self) -> dict[str, object]:
        """The config as schema keys and typed values."""
        out: dict[str, object] = {"kind": self.kind}
        m = asdict(self.model)
        out.update({k: m[k] for k in _MODEL_KEYS})
        for f in fields(self):
            if f.name in ("kind", "model", "train_bias", "test_bias"):
                continue
            out[f.name] = getattr(self, f.name)
        for regime, spec in (("train", self.train_bias), ("test", self.test_bias)):
            for k in _BIAS_KEYS:
                out[f"{regime}.{k}"] = getattr(spec, k)
        return out

    def to_text(self) -> str:
        """Canonical form: sorted keys, one per line; parses back to an equal config."""
        return "".join(f"{k} = {_format(v)}\n" for k, v in sorted(self.flat().items()))

    def with_(self, **changes) -> "ExperimentConfig":
        flat = self.flat()
        flat.update(changes)
        return _build(flat)


def _format(v) -> str:
    if isinstance(v, tuple):
        return ",".join(str(x) for x in v)
    if isinstance(v, float):
        return repr(v)
    return str(v)


def defaults(kind: str) -> dict[str, object]:
    if kind not in KINDS:
        raise ConfigError(f"unknown experiment kind {kind!r}; expected one of {', '.join(KINDS)}")
    return {**_BASE, **KIND_DEFAULTS[kind], "kind": kind}


def _convert(key: str, raw: str, where: str):
    if key not in SCHEMA:
        raise ConfigError(f"unknown key {key!r}", where)
    conv = SCHEMA[key]
    try:
        return conv(raw.strip()) if conv is not str else raw.strip()
    except ValueError:
        name = "int" if conv is int else "float" if conv is float else "integer list"
        raise ConfigError(f"type error: {key} expects {name}, got {raw.strip()!r}", where) from None


def parse_text(text: str, source: str = "<config>") -> dict[str, tuple[object, str]]:
    """Parse file text into ``{key: (value, location)}``."""
    seen: dict[str, tuple[object, str]] = {}
    lines: dict[str, int] = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        where = f"{source}:{lineno}"
        if "=" not in stripped:
            raise ConfigError(f"expected 'key = value', got {stripped!r}", where)
        key, raw = (s.strip() for s in stripped.split("=", 1))
        if key in lines:
            raise ConfigError(f"duplicate key {key!r} on lines {lines[key]} and {lineno}", where)
        lines[key] = lineno
        seen[key] = (_convert(key, raw, where), where)
    return seen


def _build(flat: dict[str, object], where: dict[str, str] | None = None) -> ExperimentConfig:
    where = where or {}

    def fail(key: str, message: str):
        raise ConfigError(message, where.get(key))

    kind = flat.get("kind")
    if kind is None:
        raise ConfigError("missing required key 'kind'")
    if kind not in KINDS:
        fail("kind", f"unknown experiment kind {kind!r}; expected one of {', '.join(KINDS)}")
    try:
        model = EvaluatorConfig(**{k: flat[k] for k in _MODEL_KEYS})
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    biases = []
    for regime in ("train", "test"):
        try:
            biases.append(BiasSpec(**{k: flat[f"{regime}.{k}"] for k in _BIAS_KEYS}, regime=regime))
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
    if not flat["seeds"]:
        fail("seeds", "seed list must be nonempty")
    if kind in RISK_KINDS and flat["n_eval"] < 100:
        fail("n_eval", f"n_eval must be >= 100 for risk estimates, got {flat['n_eval']}")
    if flat["loss"] and flat["loss"] not in LOSS_KINDS:
        fail("loss", f"loss must be one of {LOSS_KINDS}, got {flat['loss']!r}")
    if flat["variant"] and flat["variant"] not in VARIANTS:
        fail("variant", f"variant must be one of {VARIANTS}, got {flat['variant']!r}")
    if flat["label_mode"] not in LABEL_MODES:
        fail("label_mode", f"label_mode must be one of {LABEL_MODES}, got {flat['label_mode']!r}")
    for key in ("n_train", "batch_size", "reps", "parallel"):
        if flat[key] < 1:
            fail(key, f"{key} must be >= 1, got {flat[key]}")
    for key in ("epochs", "warmup"):
        if flat[key] < 0:
            fail(key, f"{key} must be >= 0, got {flat[key]}")
    if any(k < 1 for k in flat["k_sweep"]):
        fail("k_sweep", "list counts in k_sweep must be >= 1")
    if not flat["lr"] > 0:
        fail("lr", "lr must be positive")
    return ExperimentConfig(
        kind=kind, model=model, n_train=flat["n_train"], n_eval=flat["n_eval"], loss=flat["loss"],
        epochs=flat["epochs"], batch_size=flat["batch_size"], lr=float(flat["lr"]),
        seeds=tuple(flat["seeds"]), k_sweep=tuple(flat["k_sweep"]), label_mode=flat["label_mode"],
        world_seed=flat["world_seed"], train_bias=biases[0], test_bias=biases[1], out=flat["out"],
        reps=flat["reps"], warmup=flat["warmup"], parallel=flat["parallel"], variant=flat["variant"],
    )


def parse_config(
    path: str | os.PathLike | None = None,
    overrides: dict[str, str] | None = None,
    *,
    text: str | None = None,
    kind: str | None = None,
) -> ExperimentConfig:
    """Build a config from a file (or ``text``) merged with string overrides.

    ``overrides`` map schema keys to raw strings, as given on the command
    line; they win over file values. ``kind`` is an override for the
    experiment kind.
    """
    if path is not None and text is not None:
        raise TypeError("pass either path or text, not both")
    entries: dict[str, tuple[object, str]] = {}
    if path is not None:
        try:
            text = Path(path).read_text(encoding="utf-8")
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc.strerror}", str(path)) from None
        entries = parse_text(text, str(path))
    elif text is not None:
        entries = parse_text(text)
    for key, raw in (overrides or {}).items():
        entries[key] = (_convert(key, raw, f"override {key}"), f"override {key}")
    if kind is not None:
        entries["kind"] = (kind, "override kind")
    if "kind" not in entries:
        raise ConfigError("missing required key 'kind'")
    flat = defaults(str(entries["kind"][0]))
    flat.update({k: v for k, (v, _) in entries.items()})
    return _build(flat, {k: w for k, (_, w) in entries.items()})


def default_config(kind: str, **changes) -> ExperimentConfig:
    flat = defaults(kind)
    flat.update(changes)
    return _build(flat)
