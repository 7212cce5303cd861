import numpy as np
import pytest

from specfuse.pyramid import (
    DONT_CARE,
    CellIndex,
    DimensionError,
    LevelRangeError,
    PyramidError,
    PyramidSpec,
    blocks,
    children,
    level_stride,
    parent,
    upsample,
    validate_dims,
    validate_labels,
)


@pytest.mark.parametrize("L,s,level,expected", [(4, 4, 1, 32), (4, 4, 4, 4), (2, 1, 1, 2), (4, 4, 2, 16)])
def test_level_stride(L, s, level, expected):
    assert level_stride(PyramidSpec(L, s), level) == expected


def test_level_stride_out_of_range():
    spec = PyramidSpec(4, 4)
    for level in (0, 5):
        with pytest.raises(LevelRangeError):
            level_stride(spec, level)


def test_children_examples():
    spec = PyramidSpec(4, 4)
    assert children(spec, CellIndex(1, 0, 0)) == [(2, 0, 0), (2, 0, 1), (2, 1, 0), (2, 1, 1)]
    assert children(spec, CellIndex(1, 1, 2)) == [(2, 2, 4), (2, 2, 5), (2, 3, 4), (2, 3, 5)]
    with pytest.raises(LevelRangeError):
        children(spec, CellIndex(4, 0, 0))


def test_parent_examples():
    spec = PyramidSpec(4, 4)
    assert parent(spec, CellIndex(2, 3, 5)) == (1, 1, 2)
    assert parent(spec, CellIndex(2, 0, 0)) == (1, 0, 0)
    with pytest.raises(LevelRangeError):
        parent(spec, CellIndex(1, 0, 0))


def test_parent_inverts_children():
    spec = PyramidSpec(4, 2)
    for level in (1, 2, 3):
        for r in range(3):
            for c in range(3):
                cell = CellIndex(level, r, c)
                assert all(parent(spec, ch) == cell for ch in children(spec, cell))


def test_validate_dims():
    validate_dims(PyramidSpec(4, 4), 64, 96)
    validate_dims(PyramidSpec(2, 1), 2, 2)
    with pytest.raises(DimensionError) as err:
        validate_dims(PyramidSpec(4, 4), 60, 64)
    assert err.value.axis == "H"
    with pytest.raises(DimensionError) as err:
        validate_dims(PyramidSpec(4, 4), 64, 70)
    assert err.value.axis == "W"


@pytest.mark.parametrize("kwargs", [dict(num_levels=1), dict(finest_stride=0), dict(num_classes=1),
                                    dict(tau=0.0), dict(tau=1.0)])
def test_spec_rejects_bad_values(kwargs):
    with pytest.raises(PyramidError):
        PyramidSpec(**kwargs)


def test_level_shape_and_ratio():
    spec = PyramidSpec(4, 4)
    assert [spec.level_shape(l, 64, 64) for l in spec.levels] == [(2, 2), (4, 4), (8, 8), (16, 16)]
    assert [spec.ratio(l) for l in spec.levels] == [8, 4, 2, 1]


def test_validate_labels():
    y = validate_labels(np.array([[0, 1], [DONT_CARE, 2]], dtype=np.int32), 3)
    assert y.dtype == np.int64
    with pytest.raises(PyramidError):
        validate_labels(np.array([[0, 3]]), 3)
    with pytest.raises(PyramidError):
        validate_labels(np.array([[0.0, 1.0]]), 3)
    with pytest.raises(PyramidError):
        validate_labels(np.array([-2, 0]).reshape(1, 2), 3)


def test_blocks_and_upsample(rng):
    g = rng.integers(0, 9, size=(2, 6, 4))
    b = blocks(g, 2)
    assert b.shape == (2, 3, 2, 4)
    assert list(b[1, 2, 1]) == [g[1, 4, 2], g[1, 4, 3], g[1, 5, 2], g[1, 5, 3]]
    up = upsample(g, 3)
    assert up.shape == (2, 18, 12)
    assert np.array_equal(up[:, ::3, ::3], g)
