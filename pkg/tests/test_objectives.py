import math

import numpy as np
import pytest

from flasheval.evaluators import Evaluator, EvaluatorConfig
from flasheval.objectives import (
    AdamState,
    adam_step,
    bce_loss,
    loss_targets,
    minmax_targets,
    mse_loss,
    per_example_losses,
    softmax_ce_loss,
    train,
)
from flasheval.synthgen import BiasSpec, gen_split, make_world
from flasheval.tensor import NumericalError, Tensor

from conftest import leaf, numeric_grad, rel_err, taped_grads


def test_mse_examples():
    s = np.array([0.3, -1.2, 2.0])
    assert mse_loss(Tensor(s), s).item() == 0.0
    assert mse_loss(Tensor([1.0, 0.0]), [0.0, 0.0]).item() == 0.5


def test_mse_gradient(rng):
    s, t = leaf(rng.normal(size=5)), rng.normal(size=5)
    (g,) = taped_grads(lambda: mse_loss(s, t), s)
    np.testing.assert_allclose(g, 2 * (s.data - t) / 5, rtol=1e-13)
    assert rel_err(g, numeric_grad(lambda: float(((s.data - t) ** 2).mean()), s.data)) < 1e-6


def test_mse_length_mismatch():
    with pytest.raises(ValueError):
        mse_loss(Tensor(np.zeros(3)), np.zeros(4))


def test_bce_half_half_is_ln2():
    assert bce_loss(Tensor(np.zeros(4)), np.full(4, 0.5)).item() == pytest.approx(math.log(2), abs=1e-15)


def test_bce_confident_prediction_hits_clamp_floor():
    loss = bce_loss(Tensor([1e3, -1e3]), [1.0, 0.0]).item()
    assert loss <= -math.log(1 - 1e-7) + 1e-16


def test_bce_vs_direct_formula(rng):
    s, t = rng.normal(size=(3, 6)), rng.uniform(size=(3, 6))
    p = 1 / (1 + np.exp(-s))
    direct = -(t * np.log(p) + (1 - t) * np.log(1 - p)).mean()
    assert bce_loss(Tensor(s), t).item() == pytest.approx(direct, abs=1e-12)
    assert per_example_losses(s, t, "bce").mean() == pytest.approx(direct, abs=1e-12)


def test_bce_gradient(rng):
    s, t = leaf(rng.normal(size=6)), rng.uniform(size=6)

    def f():
        p = 1 / (1 + np.exp(-s.data))
        return float(-(t * np.log(p) + (1 - t) * np.log(1 - p)).mean())

    (g,) = taped_grads(lambda: bce_loss(s, t), s)
    assert rel_err(g, numeric_grad(f, s.data)) < 1e-6


def test_bce_rejects_targets_outside_unit_interval():
    with pytest.raises(ValueError):
        bce_loss(Tensor(np.zeros(2)), [0.5, 1.5])


def test_bce_finite_across_score_range():
    s = np.linspace(-1e3, 1e3, 101)
    for t in (0.0, 0.3, 1.0):
        assert math.isfinite(bce_loss(Tensor(s), np.full_like(s, t)).item())


def test_ce_uniform_is_ln_k():
    assert softmax_ce_loss(Tensor(np.zeros(4)), 2).item() == pytest.approx(math.log(4), abs=1e-15)


@pytest.mark.parametrize("c", [-100.0, -10.0, -1.0, 0.5, 1.0, 10.0, 100.0])
def test_ce_shift_invariance(c, rng):
    s = rng.normal(size=6)
    a = softmax_ce_loss(Tensor(s), 3).item()
    b = softmax_ce_loss(Tensor(s + c), 3).item()
    assert abs(a - b) <= 1e-12


def test_ce_gradient_is_softmax_minus_onehot(rng):
    s = leaf(rng.normal(size=5))
    (g,) = taped_grads(lambda: softmax_ce_loss(s, 1), s)
    p = np.exp(s.data - s.data.max())
    p /= p.sum()
    np.testing.assert_allclose(g, p - np.eye(5)[1], atol=1e-15)

    def f():
        z = s.data - s.data.max()
        return float(np.log(np.exp(z).sum()) - z[1])

    assert rel_err(g, numeric_grad(f, s.data)) < 1e-6


def test_ce_batched_matches_per_example(rng):
    s, y = rng.normal(size=(4, 3)), np.array([0, 2, 1, 1])
    batched = softmax_ce_loss(Tensor(s), y).item()
    assert batched == pytest.approx(np.mean([softmax_ce_loss(Tensor(s[i]), y[i]).item() for i in range(4)]), abs=1e-14)
    assert per_example_losses(s, y, "ce").mean() == pytest.approx(batched, abs=1e-14)


def test_ce_label_out_of_range():
    with pytest.raises(IndexError):
        softmax_ce_loss(Tensor(np.zeros(3)), 3)


def test_minmax_targets():
    np.testing.assert_allclose(minmax_targets(np.array([[1.0, 3.0, 2.0], [5.0, 5.0, 5.0]])), [[0, 1, 0.5], [0.5, 0.5, 0.5]])


# -- Adam ---------------------------------------------------------------------


def test_adam_zero_gradient_leaves_parameters():
    w = leaf([0.3, -0.2])
    adam_step({"w": w}, {"w": np.zeros(2)}, AdamState())
    np.testing.assert_array_equal(w.data, [0.3, -0.2])


def test_adam_first_step_moves_by_lr():
    w = leaf([1.0])
    adam_step({"w": w}, {"w": np.array([1.0])}, AdamState())
    assert w.data[0] == pytest.approx(1.0 - 1e-3, abs=1e-10)


def adam_recurrence(w, lr, steps, b1=0.9, b2=0.999, eps=1e-8):
    m = v = 0.0
    for t in range(1, steps + 1):
        g = 2 * w
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        w -= lr * (m / (1 - b1**t)) / (math.sqrt(v / (1 - b2**t)) + eps)
    return w


def test_adam_quadratic_matches_recurrence():
    # at lr 1e-3 each step moves about lr, so 100 steps only reach ~0.90
    w = leaf([1.0])
    state = AdamState()
    for _ in range(100):
        adam_step({"w": w}, {"w": 2 * w.data}, state)
    assert w.data[0] == pytest.approx(adam_recurrence(1.0, 1e-3, 100), abs=1e-12)
    assert w.data[0] == pytest.approx(0.901743598078609, abs=1e-9)
    assert state.step == 100 and state.m["w"].shape == w.shape


def test_adam_minimizes_quadratic():
    w = leaf([1.0])
    state = AdamState(lr=1e-2)
    for _ in range(100):
        adam_step({"w": w}, {"w": 2 * w.data}, state)
    assert abs(w.data[0]) < 0.5


def test_adam_nan_gradient_names_parameter():
    w = leaf([1.0])
    with pytest.raises(NumericalError, match="head.W2"):
        adam_step({"head.W2": w}, {"head.W2": np.array([np.nan])}, AdamState())
    assert w.data[0] == 1.0


# -- training loop ---------------------------------------------------------------


SMALL = EvaluatorConfig(d=8, f=5, T=3, M=8, K=4, l=3, d_ff=8)


def small_data(n=64, seed=0, spec=BiasSpec()):
    return gen_split(n, SMALL, make_world(SMALL, 50 + seed), spec, seed, "train")


def test_zero_epochs_returns_initial_parameters():
    m = Evaluator(SMALL, seed=0)
    before = m.to_bytes()
    trace = train(m, small_data(), "ce", 0, 16, 0)
    assert trace.records == [] and m.to_bytes() == before


def test_training_loss_non_increasing_first_five_epochs():
    good = 0
    for seed in range(20):
        m = Evaluator(SMALL, seed=seed)
        losses = train(m, small_data(seed=seed), "ce", 5, 32, seed).train_losses
        good += all(b <= a for a, b in zip(losses, losses[1:]))
    assert good >= 18


def test_training_is_bitwise_deterministic():
    data = small_data()
    ev = small_data(seed=1)
    runs = []
    for _ in range(2):
        m = Evaluator(SMALL, seed=3)
        trace = train(m, data, "bce", 3, 16, 3, eval_set=ev)
        runs.append((trace.metric_rows(), m.to_bytes()))
    assert runs[0] == runs[1]


def test_independent_rejects_listwise_loss():
    with pytest.raises(ValueError, match="independent"):
        train(Evaluator(SMALL.with_(variant="independent")), small_data(), "ce", 1, 16, 0)
    with pytest.raises(ValueError):
        train(Evaluator(SMALL), small_data(), "hinge", 1, 16, 0)


@pytest.mark.parametrize("variant, loss", [("independent", "mse"), ("independent", "bce"), ("flash", "mse")])
def test_every_pairing_trains(variant, loss):
    m = Evaluator(SMALL.with_(variant=variant), seed=1)
    trace = train(m, small_data(32), loss, 2, 16, 1)
    assert len(trace.records) == 2 and all(math.isfinite(x) for x in trace.train_losses)


def test_loss_targets():
    data = small_data(8, spec=BiasSpec(eps_std=0.5))
    np.testing.assert_array_equal(loss_targets(data, "mse"), data.r)
    t = loss_targets(data, "bce")
    assert t.min() == 0.0 and t.max() == 1.0
    np.testing.assert_array_equal(loss_targets(data, "ce"), data.y)


def test_trace_csv(tmp_path):
    trace = train(Evaluator(SMALL), small_data(16), "ce", 2, 8, 0, eval_set=small_data(16, 1))
    path = tmp_path / "trace.csv"
    trace.write_csv(path)
    lines = path.read_text().splitlines()
    assert lines[0] == "epoch,train_loss,eval_top1_acc,eval_surrogate_risk,wall_ms"
    assert len(lines) == 3 and lines[1].startswith("1,")
