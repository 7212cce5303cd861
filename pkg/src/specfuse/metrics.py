"""Training loss on relabeled pyramids and evaluation analytics.

Confusion matrices are the unit of accumulation: compute them per image,
sum over a dataset, then turn them into IoUs.  Rows index the ground-truth
class and columns the predicted class.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .fuse import PredPyramid
from .gt import MIX, UNITY, GtPyramid
from .pyramid import DONT_CARE, PyramidError, PyramidSpec, blocks, upsample

BCE_EPS = 1e-7


def _log_softmax(logits: np.ndarray, axis: int = 0) -> np.ndarray:
    m = logits.max(axis=axis, keepdims=True)
    z = logits - m
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def masked_ce(logits: np.ndarray, target: np.ndarray) -> float:
    """Mean cross entropy over cells whose target is not DONT_CARE; 0 if none."""
    logits = np.asarray(logits, dtype=np.float64)
    if logits.shape[1:] != target.shape:
        raise PyramidError(f"logits {logits.shape} do not match targets {target.shape}")
    mask = target != DONT_CARE
    if not mask.any():
        return 0.0
    if target[mask].max() >= logits.shape[0]:
        raise PyramidError("target class id out of range")
    logp = _log_softmax(logits, 0)
    picked = np.take_along_axis(logp, np.where(mask, target, 0)[None], 0)[0]
    return float(-picked[mask].mean())


def masked_bce(probs: np.ndarray, target: np.ndarray) -> float:
    """Mean binary cross entropy over UNITY (1) / MIX (0) cells; 0 if none."""
    probs = np.asarray(probs, dtype=np.float64)
    if probs.shape != target.shape:
        raise PyramidError(f"probabilities {probs.shape} do not match targets {target.shape}")
    mask = (target == UNITY) | (target == MIX)
    if not mask.any():
        return 0.0
    p = np.clip(probs[mask], BCE_EPS, 1 - BCE_EPS)
    t = (target[mask] == UNITY)
    return float(-np.where(t, np.log(p), np.log1p(-p)).mean())


def pyramid_loss(pred: PredPyramid, target: GtPyramid) -> float:
    """Mean per-level CE over L levels plus mean per-level BCE over L-1 levels."""
    spec = pred.spec
    pred.check()
    for a in list(pred.semantic) + list(pred.unity):
        if not np.all(np.isfinite(a)):
            raise FloatingPointError("non-finite prediction passed to pyramid_loss")
    L = spec.num_levels
    ce = sum(masked_ce(p, t) for p, t in zip(pred.semantic, target.semantic)) / L
    bce = sum(masked_bce(p, t) for p, t in zip(pred.unity, target.unity)) / (L - 1)
    return ce + bce


@dataclass
class IouResult:
    per_class: dict[int, float]
    mean: float | None
    confusion: np.ndarray

    @property
    def no_pixels(self) -> bool:
        return self.mean is None

    def as_array(self) -> np.ndarray:
        """Per-class IoU with NaN for classes absent from both gt and prediction."""
        out = np.full(self.confusion.shape[0], np.nan)
        for k, v in self.per_class.items():
            out[k] = v
        return out


def confusion(pred: np.ndarray, gt: np.ndarray, num_classes: int, where: np.ndarray | None = None) -> np.ndarray:
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise PyramidError(f"prediction {pred.shape} and ground truth {gt.shape} differ in shape")
    valid = gt != DONT_CARE
    if where is not None:
        valid &= where
    idx = gt[valid].astype(np.int64) * num_classes + pred[valid].astype(np.int64)
    return np.bincount(idx, minlength=num_classes * num_classes).reshape(num_classes, num_classes)


def iou_from_confusion(cm: np.ndarray) -> IouResult:
    tp = np.diag(cm).astype(np.float64)
    denom = cm.sum(0) + cm.sum(1) - tp
    per_class = {int(k): float(tp[k] / denom[k]) for k in np.nonzero(denom)[0]}
    mean = float(np.mean(list(per_class.values()))) if per_class else None
    return IouResult(per_class, mean, cm)


def miou(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> IouResult:
    return iou_from_confusion(confusion(pred, gt, num_classes))


def pixel_accuracy(cm: np.ndarray) -> float:
    total = cm.sum()
    return float(np.trace(cm) / total) if total else float("nan")


def downsample_majority(labels: np.ndarray, k: int, num_classes: int) -> np.ndarray:
    """Block-majority label per ``k x k`` block; ties to the lowest id; all-DONT_CARE stays DONT_CARE."""
    if k == 1:
        return np.asarray(labels, dtype=np.int64)
    cells = blocks(np.asarray(labels, dtype=np.int64), k)
    counts = np.zeros(cells.shape[:-1] + (num_classes,), dtype=np.int64)
    for c in range(num_classes):
        counts[..., c] = (cells == c).sum(-1)
    out = counts.argmax(-1)
    out[counts.sum(-1) == 0] = DONT_CARE
    return out


def level_predictions(semantic: list[np.ndarray], spec: PyramidSpec) -> list[np.ndarray]:
    """argmax of each level's scores, replicated onto the finest grid."""
    return [upsample(s.argmax(0), spec.ratio(level)) for level, s in zip(spec.levels, semantic)]


def level_pair_confusion(semantic, assignment, gt, spec: PyramidSpec) -> np.ndarray:
    """``(L, L, C, C)`` counts; ``[l'-1, l-1]`` scores level l' on positions assigned level l."""
    L, C = spec.num_levels, spec.num_classes
    if assignment.shape != gt.shape:
        raise PyramidError(f"assignment {assignment.shape} and ground truth {gt.shape} differ in shape")
    out = np.zeros((L, L, C, C), dtype=np.int64)
    for i, pred in enumerate(level_predictions(semantic, spec)):
        for j, level in enumerate(spec.levels):
            out[i, j] = confusion(pred, gt, C, where=assignment == level)
    return out


def level_pair_matrix(cms: np.ndarray) -> np.ndarray:
    """mIoU per (semantic level, assigned level) pair; NaN where a group has no pixels."""
    L = cms.shape[0]
    out = np.full((L, L), np.nan)
    for i in range(L):
        for j in range(L):
            m = iou_from_confusion(cms[i, j]).mean
            if m is not None:
                out[i, j] = m
    return out


def level_pair_miou(semantic, assignment, gt, spec: PyramidSpec) -> np.ndarray:
    return level_pair_matrix(level_pair_confusion(semantic, assignment, gt, spec))


def level_confusions(semantic, fused_labels, gt, spec: PyramidSpec) -> tuple[np.ndarray, np.ndarray]:
    """Per-level whole-image confusion ``(L, C, C)`` and the fused one ``(C, C)``."""
    C = spec.num_classes
    per_level = np.stack([confusion(p, gt, C) for p in level_predictions(semantic, spec)])
    return per_level, confusion(fused_labels, gt, C)


def class_level_delta(per_level: np.ndarray, fused: np.ndarray) -> np.ndarray:
    """``(C, L)`` IoU of each level minus IoU of the fused prediction; NaN when absent."""
    base = iou_from_confusion(fused).as_array()
    return np.stack([iou_from_confusion(cm).as_array() - base for cm in per_level], axis=1)


def per_class_level_delta(semantic, fused_labels, gt, spec: PyramidSpec) -> np.ndarray:
    return class_level_delta(*level_confusions(semantic, fused_labels, gt, spec))
