# # Encoding the pool once
#
# The independent evaluator re-encodes every item each time it shows up in a
# list. The joint evaluator encodes the pool of M items once and then only
# gathers. With K lists of length l drawn from M items, each item is reused
# rho = K*l/M times on average, and the FLOP ratio heads toward 1/rho.

from flasheval import tensor as T
from flasheval.evaluators import Evaluator, EvaluatorConfig
from flasheval.synthgen import gen_example, make_world
from flasheval.theory import reuse_factor

base = EvaluatorConfig(d=64, f=2048, T=16, M=60, l=6, K=10)
world = make_world(base, 1000)

for K in (10, 20, 50):
    cfg = base.with_(K=K)
    ex = gen_example(cfg, world, 0)
    totals = {}
    for variant in ("independent", "flash"):
        with T.counting() as c:
            Evaluator(cfg.with_(variant=variant), seed=0).forward(ex.ctx, ex.pool_feats, ex.lists)
        totals[variant] = c
    rho = reuse_factor(K, cfg.l, cfg.M)
    ratio = totals["flash"].total / totals["independent"].total
    print(f"K={K:3d} rho={rho:.2f} 1/rho={1 / rho:.3f} measured ratio={ratio:.3f}")

# Where the joint evaluator spends its budget at K=50: the item encoding
# stage is the same number it was at K=10.

print(totals["flash"].stage_totals())
