# # Training the two objectives
#
# The joint evaluator trains with softmax cross-entropy over the K lists,
# using the sampled choice as the label. The independent one trains list by
# list with BCE on min-max normalized rewards. Both are scored on how often
# their top pick is the utility-optimal list.

from flasheval.evaluators import Evaluator, EvaluatorConfig
from flasheval.objectives import train
from flasheval.synthgen import BiasSpec, gen_dataset, make_world
from flasheval.theory import top1_risk

cfg = EvaluatorConfig(d=16, f=8, T=4, M=12, l=3, K=8, d_ff=16)
world = make_world(cfg, 1000)
tr, te = gen_dataset(256, cfg, world, BiasSpec(eps_std=1.0), BiasSpec(regime="test"), seed=0, n_test=200)

for variant, loss in (("flash", "ce"), ("independent", "bce")):
    model = Evaluator(cfg.with_(variant=variant), seed=0)
    trace = train(model, tr, loss, epochs=5, batch_size=32, rng=0, eval_set=te)
    for rec in trace.records:
        print(variant, rec.epoch, round(rec.train_loss, 4), round(rec.eval_top1_acc, 3))
    print(f"{variant}: top-1 accuracy {1 - top1_risk(model, te):.3f} (chance {1 / cfg.K:.3f})")
