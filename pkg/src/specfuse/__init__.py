"""Pyramidal unity/semantic output representation for semantic segmentation."""

from .pyramid import DONT_CARE, CellIndex, PyramidSpec, children, level_stride, parent, validate_dims
from .gt import MIX, UNITY, U_DONT_CARE, GtPyramid, RelabelPolicy, derive_gt, relabel, supervised_counts
from .fuse import PredPyramid, fuse, fuse_assignment, onehot_prediction, parsimony_stats

__version__ = "0.1.0"
