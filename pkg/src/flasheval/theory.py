"""Closed-form quantities experiments are checked against.

Cost models for both architectures, the selection-bias oracles, and the
risk functionals (Top-1 risk, surrogate risk, generalization gap).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .evaluators import select_top1
from .objectives import loss_targets, per_example_losses


@dataclass(frozen=True)
class CostModel:
    """Per-unit forward FLOP costs.

    ``c_item``: encode one item; ``c_list``: aggregate one list (independent
    evaluator); ``c_idx``: index one item occurrence into its list and
    aggregate it (joint evaluator); ``c_att_per_pair``: one pair of list
    embeddings in cross-list attention; ``c_score``: score one list embedding.
    Costs that are linear in K for cross-list attention (the projections)
    belong in ``c_score``.
    """

    c_item: float
    c_list: float = 0.0
    c_idx: float = 0.0
    c_att_per_pair: float = 0.0
    c_score: float = 0.0

    def __post_init__(self):
        for name in ("c_item", "c_list", "c_idx", "c_att_per_pair", "c_score"):
            if getattr(self, name) < 0:
                raise ValueError(f"CostModel.{name} must be >= 0")


def reuse_factor(K: int, l: int, M: int) -> float:
    """Total item occurrences over distinct items, ``K*l/M``."""
    if M <= 0:
        raise ValueError("pool size M must be positive")
    return K * l / M


def predicted_cost_ind(cm: CostModel, K: int, l: int) -> float:
    return K * l * cm.c_item + K * cm.c_list


def predicted_cost_joint(cm: CostModel, M: int, K: int, l: int) -> float:
    return M * cm.c_item + K * l * cm.c_idx + K * K * cm.c_att_per_pair + K * cm.c_score


def cost_ratio(cm: CostModel, M: int, K: int, l: int) -> float:
    den = predicted_cost_ind(cm, K, l)
    if den == 0:
        raise ZeroDivisionError("independent cost estimate is zero")
    return predicted_cost_joint(cm, M, K, l) / den


def calibrate_cost_model(single_list_stages: dict[str, int], l: int,
                         joint_runs: list[tuple[int, dict[str, int]]] | None = None) -> CostModel:
    """Fit a :class:`CostModel` from stage-tagged FLOP counts.

    ``single_list_stages`` are the stage totals of one independent pass over
    a single list of length ``l``: item encoding fixes ``c_item`` and the
    rest fixes ``c_list``. Joint-only costs come from ``joint_runs``, a list
    of ``(K, stages)`` for joint forwards at two or more list counts: the
    indexing stage fixes ``c_idx``, and the cross-list stage is split by least
    squares into a linear part (folded into ``c_score``) and a quadratic part
    (``c_att_per_pair``).
    """
    c_item = single_list_stages.get("item_encoding", 0) / l
    c_list = sum(v for k, v in single_list_stages.items() if k != "item_encoding")
    if not joint_runs:
        return CostModel(c_item, c_list)
    Ks = np.array([k for k, _ in joint_runs], dtype=np.float64)
    idx = np.array([st.get("list_aggregation", 0) for _, st in joint_runs]) / (Ks * l)
    score = np.array([st.get("scoring", 0) for _, st in joint_runs]) / Ks
    cross = np.array([st.get("cross_list", 0) for _, st in joint_runs], dtype=np.float64)
    if len(joint_runs) >= 2:
        (lin, quad), *_ = np.linalg.lstsq(np.stack([Ks, Ks * Ks], axis=1), cross, rcond=None)
    else:
        lin, quad = 0.0, float(cross[0] / Ks[0] ** 2)
    return CostModel(c_item, c_list, float(idx.mean()), max(float(quad), 0.0), float(score.mean()) + max(float(lin), 0.0))


# --------------------------------------------------------------------------
# Selection-bias oracles


@dataclass(frozen=True)
class SsbInstance:
    delta_mu: float
    delta_nu: np.ndarray
    p: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.p, dtype=np.float64)
        if (p < 0).any() or abs(p.sum() - 1.0) > 1e-9:
            raise ValueError("p must be a probability vector")
        if np.shape(self.delta_nu) != p.shape:
            raise ValueError("delta_nu and p must have the same length")


def ssb_bias_ind(inst: SsbInstance) -> float:
    """``delta_mu**2 + mean_k delta_nu_k**2``: excess pointwise risk under the shift."""
    dn = np.asarray(inst.delta_nu, dtype=np.float64)
    return float(inst.delta_mu**2 + np.mean(dn * dn))


def ssb_bias_joint_quadratic(delta_nu, p) -> float:
    """Half the variance of ``delta_nu`` under ``p``; the set-level shift never enters."""
    dn = np.asarray(delta_nu, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    m = float(p @ dn)
    return 0.5 * (float(p @ (dn * dn)) - m * m)


def ssb_bias_joint_exact_kl(u, nu_train, nu_test) -> float:
    """``KL(softmax(u + nu_test) || softmax(u + nu_train))``."""
    a = np.asarray(u, dtype=np.float64) + np.asarray(nu_test, dtype=np.float64)
    b = np.asarray(u, dtype=np.float64) + np.asarray(nu_train, dtype=np.float64)
    la = a - a.max()
    la = la - np.log(np.exp(la).sum())
    lb = b - b.max()
    lb = lb - np.log(np.exp(lb).sum())
    return float(np.exp(la) @ (la - lb))


# --------------------------------------------------------------------------
# Risks


def _scores(model, dataset) -> np.ndarray:
    if hasattr(model, "scores"):
        return np.asarray(model.scores(dataset))
    return np.asarray(model(dataset))


def top1_risk(model, dataset) -> float:
    """Fraction of examples whose selected list is not the utility argmax."""
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    picks = select_top1(_scores(model, dataset))
    return float(np.mean(np.asarray(picks) != dataset.y_bayes))


def surrogate_risk(model, dataset, loss_kind: str, streaming: bool = False) -> float:
    """Mean training loss over a dataset.

    ``streaming=True`` accumulates example by example instead of in one
    vectorized mean (same quantity, different summation order).
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    losses = per_example_losses(_scores(model, dataset), loss_targets(dataset, loss_kind), loss_kind)
    if not streaming:
        return float(losses.mean())
    total = 0.0
    for i, v in enumerate(losses, start=1):
        total += (float(v) - total) / i
    return total


def generalization_gap(model, train_set, heldout_set, loss_kind: str) -> float:
    return surrogate_risk(model, heldout_set, loss_kind) - surrogate_risk(model, train_set, loss_kind)
