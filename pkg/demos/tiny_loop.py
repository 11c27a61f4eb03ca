"""Full two-stage closed loop on the desk grid with tiny budgets.

Runs in a few minutes; the numbers are not meaningful, but every artifact
of a real run is written under the output directory.

    python demos/tiny_loop.py [out_dir]
"""
import json
import sys

from geoclo.closed_loop import run_full_loop
from geoclo.config import default_config, merge

TINY = {"surrogate": {"epochs": 3, "epochs_stage1": 3},
        "de": {"n_ind": 8, "g_max": 3}, "ies": {"n_ensemble": 10, "max_iter": 2},
        "loop": {"n_train_stage1": 10, "n_train_stage2": 10, "n_test": 5,
                 "n_random_baseline": 5}}

out = sys.argv[1] if len(sys.argv) > 1 else "runs/tiny_loop"
report = run_full_loop(merge(default_config(desk=True), TINY), out)
keys = ("status", "realized_npv", "reference_npv", "realized_violation")
print(json.dumps({k: report.get(k) for k in keys}, indent=2))
print("artifacts in", out)
