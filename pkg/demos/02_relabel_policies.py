"""Compare the three training relabel policies.

Once a coarse cell is a unity cell, the finer cells under it are "done by
coarser" and need no supervision.  Naive supervises everything,
simple-fix drops descendants of every ground-truth unity cell, and final
drops them only when the unity head also predicts unity (a true positive).
"""

import numpy as np

from specfuse import PyramidSpec, derive_gt, relabel, supervised_counts
from specfuse.synth import SynthConfig, gen_sample

spec = PyramidSpec(num_levels=4, finest_stride=4, num_classes=6)
_, labels = gen_sample(SynthConfig(seed=3), 0)
gt = derive_gt(labels, spec)

rng = np.random.default_rng(0)
# a made-up unity prediction: right about half of the unity cells
pred = [np.where(rng.uniform(size=u.shape) < 0.5, 0.95, 0.2) for u in gt.unity]

for policy in ("naive", "final", "simple-fix"):
    out = relabel(gt, pred, policy)
    print(f"{policy:>10}: supervised cells per level {supervised_counts(out)}")

perfect = [(u == 1).astype(float) for u in gt.unity]
same = relabel(gt, perfect, "final") == relabel(gt, None, "simple-fix")
print("final with a perfect unity predictor equals simple-fix:", same)
