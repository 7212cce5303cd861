"""Fusing predicted semantic and unity pyramids into one label map.

Every finest-grid position reads its scores from the coarsest level whose
(upsampled) unity probability reaches ``tau``.  The finest level has no
predicted unity and always counts as unity, so each position is assigned
exactly one level.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gt import UNITY, GtPyramid
from .pyramid import DONT_CARE, PyramidError, PyramidSpec, blocks, upsample


@dataclass
class PredPyramid:
    """Real-valued head outputs.

    ``semantic[l-1]`` has shape ``(C, H/s_l, W/s_l)`` (logits) for l in 1..L;
    ``unity[l-1]`` has shape ``(H/s_l, W/s_l)`` (probabilities) for l in 1..L-1.
    """

    spec: PyramidSpec
    semantic: list[np.ndarray]
    unity: list[np.ndarray]

    @property
    def finest_shape(self) -> tuple[int, int]:
        return self.semantic[-1].shape[-2:]

    def check(self) -> None:
        spec = self.spec
        if len(self.semantic) != spec.num_levels or len(self.unity) != spec.num_levels - 1:
            raise PyramidError(
                f"expected {spec.num_levels} semantic and {spec.num_levels - 1} unity levels, "
                f"got {len(self.semantic)} and {len(self.unity)}"
            )
        h, w = self.finest_shape
        for level in spec.levels:
            r = spec.ratio(level)
            want = (spec.num_classes, h // r, w // r)
            if h % r or w % r or self.semantic[level - 1].shape != want:
                raise PyramidError(f"semantic level {level} has shape {self.semantic[level - 1].shape}, expected {want}")
            if level < spec.num_levels and self.unity[level - 1].shape != want[1:]:
                raise PyramidError(f"unity level {level} has shape {self.unity[level - 1].shape}, expected {want[1:]}")


def fuse_assignment(unity: list[np.ndarray], spec: PyramidSpec, tau: float | None = None) -> np.ndarray:
    """Level index (1..L) each finest-grid position reads its label from."""
    tau = spec.tau if tau is None else tau
    if len(unity) != spec.num_levels - 1:
        raise PyramidError(f"expected {spec.num_levels - 1} unity levels, got {len(unity)}")
    h, w = (np.asarray(unity[0]).shape[0] * spec.ratio(1), np.asarray(unity[0]).shape[1] * spec.ratio(1))
    assignment = np.full((h, w), spec.num_levels, dtype=np.int64)
    open_ = np.ones((h, w), dtype=bool)
    for level in range(1, spec.num_levels):
        u = np.asarray(unity[level - 1])
        r = spec.ratio(level)
        if u.shape != (h // r, w // r):
            raise PyramidError(f"unity level {level} has shape {u.shape}, expected {(h // r, w // r)}")
        hit = open_ & upsample(u >= tau, r)
        assignment[hit] = level
        open_ &= ~hit
    return assignment


def fuse(pred: PredPyramid, tau: float | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Return ``(scores, labels)`` on the finest grid.  Ties go to the lowest class id."""
    pred.check()
    spec = pred.spec
    assignment = fuse_assignment(pred.unity, spec, tau)
    scores = select_levels(pred.semantic, assignment, spec)
    return scores, scores.argmax(0)


def select_levels(semantic: list[np.ndarray], assignment: np.ndarray, spec: PyramidSpec) -> np.ndarray:
    scores = np.empty((semantic[-1].shape[0],) + assignment.shape, dtype=semantic[-1].dtype)
    for level in spec.levels:
        mask = assignment == level
        if mask.any():
            scores[:, mask] = upsample(semantic[level - 1], spec.ratio(level))[:, mask]
    return scores


def level_masks(assignment: np.ndarray, spec: PyramidSpec) -> list[np.ndarray]:
    """Per-level status grids on each level's own cell grid.

    0 = cell left to a finer level, 1 = cell selected at this level,
    2 = cell already done by a coarser level.
    """
    out = []
    for level in spec.levels:
        cells = blocks(assignment, spec.ratio(level))
        status = np.zeros(cells.shape[:-1], dtype=np.uint8)
        status[(cells < level).all(-1)] = 2
        status[(cells == level).any(-1)] = 1
        out.append(status)
    return out


def parsimony_stats(assignment: np.ndarray, spec: PyramidSpec) -> dict:
    positions = assignment.size
    assigned, selected = [], []
    for level in spec.levels:
        mask = assignment == level
        assigned.append(int(mask.sum()))
        selected.append(int(blocks(mask, spec.ratio(level)).any(-1).sum()))
    return {
        "assigned_positions": assigned,
        "selected_cells": selected,
        "labels_read_ratio": sum(selected) / positions,
    }


def onehot_prediction(gt: GtPyramid, dtype=np.float32) -> PredPyramid:
    """Turn a ground-truth pyramid into a prediction that fuses back to it.

    Scores are 1 for the cell's class (0 where the class is DONT_CARE);
    unity probabilities are 1 on UNITY cells and 0 elsewhere.
    """
    c = gt.spec.num_classes
    semantic = []
    for sem in gt.semantic:
        onehot = np.zeros((c,) + sem.shape, dtype=dtype)
        rows, cols = np.nonzero(sem != DONT_CARE)
        onehot[sem[rows, cols], rows, cols] = 1
        semantic.append(onehot)
    unity = [(u == UNITY).astype(dtype) for u in gt.unity]
    return PredPyramid(gt.spec, semantic, unity)
