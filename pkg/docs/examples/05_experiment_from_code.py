# # Running an experiment without the CLI
#
# Every CLI experiment is a function of a config. Build one, run it, look at
# the checks, and write the same CSV the CLI would.

import sys

from flasheval.config import default_config
from flasheval.experiments import run, write_csv

cfg = default_config("flops", seeds=(0, 1), k_sweep=(10, 50))
print(cfg.to_text())

result = run(cfg)
for check in result.checks:
    print("PASS" if check.passed else "FAIL", check.name, check.detail)

write_csv([r for r in result.rows if r.metric == "flops_ratio"], sys.stdout)
