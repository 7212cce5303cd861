"""Derive the pyramidal ground truth of a small label map.

Every level splits the image into square cells.  A cell is UNITY when all
its pixels share one class, MIX when two or more classes meet inside it,
and DONT_CARE when it holds one class plus unlabeled pixels (or nothing
labeled at all).  Only UNITY cells carry a semantic label.
"""

import numpy as np

from specfuse import DONT_CARE, MIX, UNITY, U_DONT_CARE, PyramidSpec, derive_gt

CODES = {MIX: "M", UNITY: "U", U_DONT_CARE: "."}

labels = np.array([
    [0, 0, 0, 0, 1, 1, 2, 2],
    [0, 0, 0, 0, 1, 1, 2, 2],
    [0, 0, 0, 0, 1, 1, 1, 1],
    [0, 0, 0, 0, 1, 1, 1, 1],
    [3, 3, 3, 3, 3, 3, 3, 3],
    [3, 3, 3, 3, 3, 3, 3, 3],
    [3, 3, DONT_CARE, 3, 3, 3, 3, 3],
    [3, 3, 3, 3, 3, 3, 3, 3],
])

spec = PyramidSpec(num_levels=3, finest_stride=2, num_classes=4)
gt = derive_gt(labels, spec)

for level in spec.levels:
    print(f"level {level}: stride {spec.stride(level)}, grid {gt.semantic[level - 1].shape}")
    print("  semantic:", gt.semantic[level - 1].tolist())
    if level < spec.num_levels:
        codes = [[CODES[int(v)] for v in row] for row in gt.unity[level - 1]]
        print("  unity:   ", ["".join(row) for row in codes])

# The top-left quadrant is pure class 0, so its level-1 cell is UNITY; the
# bottom-left quadrant has an unlabeled pixel and can never count as unity.
