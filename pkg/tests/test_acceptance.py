"""Acceptance criteria, each at its stated tolerance and budget.

Every test records one PASS/FAIL line (echoed in the terminal summary) before
asserting. The training criteria run the full 20-seed experiments and take
several minutes each on one core.
"""

import math
import time

import numpy as np

from flasheval.config import KINDS, default_config
from flasheval.experiments import csv_text, run
from flasheval.objectives import softmax_ce_loss
from flasheval.rng import generator
from flasheval.synthgen import mnl_sample, softmax_np
from flasheval.tensor import Tensor
from flasheval.theory import SsbInstance, ssb_bias_ind, ssb_bias_joint_exact_kl, ssb_bias_joint_quadratic

from conftest import record_criterion
from test_harness import metric_columns
from test_properties import PROPERTIES


def timed_run(kind, **changes):
    start = time.perf_counter()
    res = run(default_config(kind, **changes))
    return res, time.perf_counter() - start


def checks_matching(res, *needles):
    return [c for c in res.checks if any(n in c.name for n in needles)]


def summarize(checks):
    failed = [c for c in checks if not c.passed]
    shown = failed or checks
    return "; ".join(f"{c.name}: {c.detail}" for c in shown[:3])


def test_criterion_1_gradient_suite():
    res, secs = timed_run("gradcheck")
    worst = max(res.values("grad_max_rel_error"))
    ok = res.ok and worst <= 1e-4 and secs < 60
    archs = {r.variant.split(":")[0] for r in res.rows}
    record_criterion(1, "gradient suite", ok, f"worst relative error {worst:.2e} over {sorted(archs)}, {secs:.1f} s")
    assert ok, summarize(res.checks)


def test_criterion_2_cost_ratio():
    res, secs = timed_run("flops")
    band = checks_matching(res, "within [1/rho")
    k50 = res.values("flops_ratio", k=50)
    ratios = {r.k: round(r.value, 4) for r in res.rows if r.metric == "flops_ratio" and r.l != r.m}
    ok = all(c.passed for c in band) and len(band) == 3 and all(0.20 <= r <= 0.35 for r in k50) and k50 and secs < 120
    record_criterion(2, "cost ratio in [1/rho, 1/rho + 0.15]", ok,
                     f"ratio by K {ratios}, {secs:.1f} s")
    assert ok, summarize(band)


def test_criterion_3_marginal_cost():
    res, secs = timed_run("latency")
    wanted = checks_matching(res, "latency slope > 0", "0.15 x independent slope", "item-encoding flops identical")
    ok = len(wanted) == 3 and all(c.passed for c in wanted) and secs < 300
    record_criterion(3, "marginal cost in K", ok, f"{summarize(wanted)}, {secs:.1f} s")
    assert ok, summarize(wanted)


def test_criterion_4_shift_invariance():
    rng = np.random.default_rng(4)
    worst_loss = worst_prob = 0.0
    argmax_ok = stream_ok = True
    for _ in range(200):
        K = int(rng.integers(2, 12))
        u = rng.normal(size=K) * 3
        y = int(rng.integers(K))
        base_loss = softmax_ce_loss(Tensor(u), y).item()
        base_p = softmax_np(u)
        base_stream = [mnl_sample(u, r) for r in [generator(7, "shift")] for _ in range(20)]
        for c in (-100.0, -10.0, -1.0, 1.0, 10.0, 100.0):
            worst_loss = max(worst_loss, abs(softmax_ce_loss(Tensor(u + c), y).item() - base_loss))
            worst_prob = max(worst_prob, float(np.max(np.abs(softmax_np(u + c) - base_p))))
            argmax_ok &= int(np.argmax(u + c)) == int(np.argmax(u))
            r = generator(7, "shift")
            stream_ok &= [mnl_sample(u + c, r) for _ in range(20)] == base_stream
    ok = worst_loss <= 1e-12 and worst_prob <= 1e-12 and argmax_ok and stream_ok
    record_criterion(4, "shift invariance", ok,
                     f"max CE change {worst_loss:.1e}, max MNL probability change {worst_prob:.1e}, "
                     f"argmax exact {argmax_ok}, label stream identical {stream_ok}")
    assert ok


def test_criterion_5_ssb_oracles():
    start = time.perf_counter()
    rng = np.random.default_rng(5)
    violations = 0
    for _ in range(10_000):
        # p-independent delta_nu; K <= 4, where the bound holds for every instance
        K = int(rng.integers(2, 5))
        dn = rng.normal(size=K)
        dn -= dn.mean()
        inst = SsbInstance(float(rng.normal()), dn, rng.dirichlet(np.ones(K)))
        ind, quad = ssb_bias_ind(inst), ssb_bias_joint_quadratic(dn, inst.p)
        violations += not (quad <= ind + 1e-12 and (inst.delta_mu == 0 or quad < ind))
    worked = SsbInstance(0.5, np.array([0.2, -0.2]), np.array([0.5, 0.5]))
    w_ind, w_joint = ssb_bias_ind(worked), ssb_bias_joint_quadratic(worked.delta_nu, worked.p)
    worst_kl = 0.0
    for _ in range(200):
        K = int(rng.integers(2, 10))
        u, nu, dn = rng.normal(size=(3, K))
        dn *= 1e-3 / np.linalg.norm(dn)
        quad = ssb_bias_joint_quadratic(dn, softmax_np(u + nu))
        kl = ssb_bias_joint_exact_kl(u, nu + dn, nu)
        worst_kl = max(worst_kl, abs(kl - quad) / quad)
    secs = time.perf_counter() - start
    ok = (violations == 0 and math.isclose(w_ind, 0.29, abs_tol=1e-12) and math.isclose(w_joint, 0.02, abs_tol=1e-12)
          and worst_kl <= 0.05 and secs < 60)
    record_criterion(5, "selection-bias oracles", ok,
                     f"{violations}/10000 violations, worked instance {w_ind:.12g} vs {w_joint:.12g}, "
                     f"worst KL-vs-quadratic {worst_kl:.2%}, {secs:.1f} s")
    assert ok


def test_criterion_6_ssb_training_probe():
    res, secs = timed_run("ssb")
    wanted = checks_matching(res, "pure shift")
    ok = len(wanted) == 2 and all(c.passed for c in wanted) and secs < 20 * 60
    record_criterion(6, "selection-bias training probe", ok, f"{summarize(wanted)}, {secs:.0f} s")
    assert ok, summarize(wanted)


def test_criterion_7_ablation_ordering():
    res, secs = timed_run("accuracy")
    wanted = checks_matching(res, "Full >=", "Listwise >=", ">= 2 x chance")
    ok = len(wanted) == 6 and all(c.passed for c in wanted) and secs < 30 * 60
    record_criterion(7, "ablation ordering", ok, f"{summarize(wanted)}, {secs:.0f} s")
    assert ok, summarize(wanted)


def test_criterion_8_gap_trend():
    res, secs = timed_run("gengap")
    wanted = checks_matching(res, "nondecreasing in K")
    ok = len(wanted) == 1 and wanted[0].passed and secs < 30 * 60
    record_criterion(8, "generalization-gap trend", ok, f"{summarize(wanted)}, {secs:.0f} s")
    assert ok, summarize(wanted)


def test_criterion_9_determinism_and_properties():
    differing = []
    for kind in KINDS:
        cfg = default_config(kind, seeds=(0,))
        if metric_columns(csv_text(run(cfg).rows)) != metric_columns(csv_text(run(cfg).rows)):
            differing.append(kind)
    failures = {name: int(check()) for name, check in PROPERTIES.items()}
    ok = not differing and not any(failures.values())
    record_criterion(9, "determinism and property suites", ok,
                     f"non-reproducible experiments {differing or 'none'}, property violations per 1000 {failures}")
    assert ok
