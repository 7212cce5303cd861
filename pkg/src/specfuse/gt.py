"""Pyramidal ground truth and the "done by coarser" relabeling policies."""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .pyramid import DONT_CARE, PyramidError, PyramidSpec, blocks, upsample, validate_dims, validate_labels

# Unity grid codes; the values double as the on-disk byte encoding.
MIX = 0
UNITY = 1
U_DONT_CARE = 2


class RelabelPolicy(str, enum.Enum):
    NAIVE = "naive"
    SIMPLE_FIX = "simple-fix"
    FINAL = "final"


@dataclass
class GtPyramid:
    """Discrete ground truth: ``semantic[l-1]`` for l in 1..L, ``unity[l-1]`` for l in 1..L-1.

    Semantic grids are int64 with :data:`DONT_CARE`; unity grids are uint8
    holding :data:`MIX`, :data:`UNITY` or :data:`U_DONT_CARE`.
    """

    spec: PyramidSpec
    semantic: list[np.ndarray]
    unity: list[np.ndarray]

    @property
    def finest_shape(self) -> tuple[int, int]:
        return self.semantic[-1].shape

    def copy(self) -> "GtPyramid":
        return GtPyramid(self.spec, [s.copy() for s in self.semantic], [u.copy() for u in self.unity])

    def __eq__(self, other):
        if not isinstance(other, GtPyramid):
            return NotImplemented
        return (
            self.spec == other.spec
            and all(np.array_equal(a, b) for a, b in zip(self.semantic, other.semantic))
            and all(np.array_equal(a, b) for a, b in zip(self.unity, other.unity))
        )


def classify_cells(labels: np.ndarray, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Classify each ``k x k`` block of ``labels`` into (semantic, unity) codes.

    One class only -> UNITY / that class.  Two or more classes -> MIX /
    DONT_CARE, even when DONT_CARE pixels are also present.  One class plus
    DONT_CARE pixels, or nothing but DONT_CARE -> U_DONT_CARE / DONT_CARE.
    """
    cells = blocks(labels, k)
    valid = cells != DONT_CARE
    n_valid = valid.sum(-1)
    big = np.iinfo(np.int64).max
    lo = np.where(valid, cells, big).min(-1)
    hi = np.where(valid, cells, -1).max(-1)

    single = (n_valid > 0) & (lo == hi)
    unity_cell = single & (n_valid == k * k)
    mixed = (n_valid > 0) & (lo != hi)

    unity = np.full(cells.shape[:-1], U_DONT_CARE, dtype=np.uint8)
    unity[unity_cell] = UNITY
    unity[mixed] = MIX
    semantic = np.where(unity_cell, lo, DONT_CARE).astype(np.int64)
    return semantic, unity


def derive_gt(labels: np.ndarray, spec: PyramidSpec) -> GtPyramid:
    y = validate_labels(labels, spec.num_classes)
    validate_dims(spec, *y.shape)
    semantic, unity = [], []
    for level in spec.levels:
        sem, uni = classify_cells(y, spec.stride(level))
        semantic.append(sem)
        if level < spec.num_levels:
            unity.append(uni)
    return GtPyramid(spec, semantic, unity)


def relabel(
    gt: GtPyramid,
    pred_unity: list[np.ndarray] | None = None,
    policy: RelabelPolicy | str = RelabelPolicy.FINAL,
    tau: float | None = None,
) -> GtPyramid:
    """Mark descendants of qualifying unity cells as DONT_CARE.

    ``simple-fix`` qualifies every ground-truth unity cell; ``final`` only
    those also predicted unity (``pred >= tau``).  A descendant is relabeled
    when any ancestor qualifies.  The qualifying cells keep their labels.
    """
    policy = RelabelPolicy(policy)
    spec = gt.spec
    tau = spec.tau if tau is None else tau
    out = gt.copy()
    if policy is RelabelPolicy.NAIVE:
        return out
    if policy is RelabelPolicy.FINAL:
        if pred_unity is None:
            raise PyramidError("the final relabel policy needs predicted unity probabilities")
        if len(pred_unity) != spec.num_levels - 1:
            raise PyramidError(
                f"expected {spec.num_levels - 1} predicted unity levels, got {len(pred_unity)}"
            )

    done = np.zeros(gt.semantic[0].shape, dtype=bool)
    for i in range(spec.num_levels):
        out.semantic[i][done] = DONT_CARE
        if i == spec.num_levels - 1:
            break
        qualify = gt.unity[i] == UNITY
        if policy is RelabelPolicy.FINAL:
            p = np.asarray(pred_unity[i])
            if p.shape != qualify.shape:
                raise PyramidError(f"predicted unity level {i + 1} has shape {p.shape}, expected {qualify.shape}")
            qualify &= p >= tau
        out.unity[i][done] = U_DONT_CARE
        done = upsample(done | qualify, 2)
    return out


def supervised_counts(gt: GtPyramid) -> list[int]:
    """Number of non-DONT_CARE semantic cells per level."""
    return [int((s != DONT_CARE).sum()) for s in gt.semantic]
