"""Freezes scipy t-test results used as the reference oracle in metrics_test.

Run: python3 tests/gen_ttest_reference.py > tests/data/ttest_reference.json
"""
import json

import numpy as np
from scipy import stats

rng = np.random.default_rng(20240517)
paired = []
for i in range(50):
    n = int(rng.integers(2, 120))
    x = rng.normal(rng.uniform(-1, 1), rng.uniform(0.1, 3), n)
    y = x + rng.normal(rng.uniform(-0.5, 0.5), rng.uniform(0.05, 2), n)
    r = stats.ttest_rel(x, y)
    paired.append({"x": x.tolist(), "y": y.tolist(), "t": float(r.statistic), "p": float(r.pvalue)})

welch = []
for i in range(20):
    x = rng.normal(0, rng.uniform(0.1, 3), int(rng.integers(2, 60)))
    y = rng.normal(rng.uniform(-1, 1), rng.uniform(0.1, 3), int(rng.integers(2, 60)))
    r = stats.ttest_ind(x, y, equal_var=False)
    welch.append({"x": x.tolist(), "y": y.tolist(), "t": float(r.statistic), "p": float(r.pvalue)})

fixed_x = [2.1, 3.4, 1.8, 4.0, 2.9]
fixed_y = [1.9, 3.1, 1.7, 3.6, 2.8]
r = stats.ttest_rel(fixed_x, fixed_y)
fixed = {"x": fixed_x, "y": fixed_y, "t": float(r.statistic), "p": float(r.pvalue)}

print(json.dumps({"paired": paired, "welch": welch, "fixed": fixed}))
