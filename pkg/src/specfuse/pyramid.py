"""Pyramid geometry: level strides, cell parent/child arithmetic, label maps.

Level 1 is the coarsest level and level ``L`` the finest.  Each level
doubles the resolution of the one above it, so a level-``l`` cell covers
``level_stride(spec, l)`` pixels per side.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

#: Reserved "don't care" value for class-id grids.  Class ids are ``>= 0``.
DONT_CARE = -1


class PyramidError(ValueError):
    """Base class for pyramid geometry errors."""


class LevelRangeError(PyramidError, IndexError):
    pass


class DimensionError(PyramidError):
    def __init__(self, axis: str, size: int, stride: int):
        self.axis = axis
        self.size = size
        self.stride = stride
        super().__init__(
            f"{axis}={size} is not divisible by the coarsest stride {stride}"
        )


@dataclass(frozen=True)
class PyramidSpec:
    num_levels: int = 4
    finest_stride: int = 4
    num_classes: int = 6
    tau: float = 0.9

    def __post_init__(self):
        if int(self.num_levels) != self.num_levels or self.num_levels < 2:
            raise PyramidError(f"num_levels must be an integer >= 2, got {self.num_levels}")
        if int(self.finest_stride) != self.finest_stride or self.finest_stride < 1:
            raise PyramidError(f"finest_stride must be an integer >= 1, got {self.finest_stride}")
        if int(self.num_classes) != self.num_classes or self.num_classes < 2:
            raise PyramidError(f"num_classes must be an integer >= 2, got {self.num_classes}")
        if not 0.0 < self.tau < 1.0:
            raise PyramidError(f"tau must lie strictly inside (0, 1), got {self.tau}")

    @property
    def levels(self) -> range:
        return range(1, self.num_levels + 1)

    def stride(self, level: int) -> int:
        return level_stride(self, level)

    def ratio(self, level: int) -> int:
        """Finest-grid positions per side covered by one level-``level`` cell."""
        return level_stride(self, level) // self.finest_stride

    def level_shape(self, level: int, height: int, width: int) -> tuple[int, int]:
        s = level_stride(self, level)
        return height // s, width // s


class CellIndex(NamedTuple):
    level: int
    row: int
    col: int


def level_stride(spec: PyramidSpec, level: int) -> int:
    if not 1 <= level <= spec.num_levels:
        raise LevelRangeError(f"level {level} outside [1, {spec.num_levels}]")
    return spec.finest_stride * 2 ** (spec.num_levels - level)


def children(spec: PyramidSpec, cell: CellIndex) -> list[CellIndex]:
    """The four cells one level finer covering ``cell``, row-major."""
    level, r, c = cell
    level_stride(spec, level)
    if level == spec.num_levels:
        raise LevelRangeError(f"cell at finest level {level} has no children")
    return [CellIndex(level + 1, 2 * r + dr, 2 * c + dc) for dr in (0, 1) for dc in (0, 1)]


def parent(spec: PyramidSpec, cell: CellIndex) -> CellIndex:
    level, r, c = cell
    level_stride(spec, level)
    if level == 1:
        raise LevelRangeError("cell at coarsest level has no parent")
    return CellIndex(level - 1, r // 2, c // 2)


def validate_dims(spec: PyramidSpec, height: int, width: int) -> None:
    """Raise :class:`DimensionError` unless both sides divide the coarsest stride."""
    s = level_stride(spec, 1)
    if height % s:
        raise DimensionError("H", height, s)
    if width % s:
        raise DimensionError("W", width, s)


def validate_labels(labels: np.ndarray, num_classes: int) -> np.ndarray:
    """Return ``labels`` as an int64 grid, checking every id is a class or DONT_CARE."""
    y = np.asarray(labels)
    if y.ndim != 2:
        raise PyramidError(f"label map must be 2-D, got shape {y.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        raise PyramidError(f"label map must hold integers, got {y.dtype}")
    y = y.astype(np.int64, copy=False)
    bad = (y != DONT_CARE) & ((y < 0) | (y >= num_classes))
    if bad.any():
        raise PyramidError(
            f"label map holds ids outside [0, {num_classes}) other than DONT_CARE"
        )
    return y


def blocks(grid: np.ndarray, k: int) -> np.ndarray:
    """View an ``(..., h, w)`` grid as ``(..., h/k, w/k, k*k)`` blocks (row-major inside)."""
    *lead, h, w = grid.shape
    g = grid.reshape(*lead, h // k, k, w // k, k)
    g = np.moveaxis(g, -3, -2)
    return g.reshape(*lead, h // k, w // k, k * k)


def upsample(grid: np.ndarray, k: int) -> np.ndarray:
    """Nearest-neighbour replication by ``k`` on the last two axes."""
    if k == 1:
        return grid
    return np.repeat(np.repeat(grid, k, axis=-2), k, axis=-1)
