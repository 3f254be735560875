import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from mieval.volcore import (
    LABEL_CODES,
    InvalidLabelError,
    LabelMap,
    StructureMask,
    Volume,
    extract_mask,
    label_histogram,
)

label_grids = arrays(np.uint8, st.tuples(st.integers(1, 4), st.integers(1, 5), st.integers(1, 5)), elements=st.integers(0, 4))


def test_extract_mask_all_background():
    lm = LabelMap(np.zeros((2, 3, 3), np.uint8))
    m = extract_mask(lm, {2})
    assert m.count() == 0 and m.shape == (2, 3, 3)


def test_extract_mask_singleton():
    arr = np.zeros((2, 3, 3), np.uint8)
    arr[1, 2, 0] = 3
    m = extract_mask(LabelMap(arr, (2.0, 1.0, 1.0)), {3, 4})
    assert m.count() == 1 and m.bits[1, 2, 0]
    assert m.spacing == (2.0, 1.0, 1.0)


def test_extract_mask_scan_oracle():
    lm = LabelMap(np.array([1, 2, 2, 3, 4, 0, 2, 2], np.uint8).reshape(2, 2, 2))
    m = extract_mask(lm, {2})
    expected = [v == 2 for v in [1, 2, 2, 3, 4, 0, 2, 2]]
    assert m.bits.ravel().tolist() == expected
    assert m.count() == 4


def test_extract_mask_rejects_bad_label():
    lm = LabelMap(np.zeros((1, 2, 2), np.uint8))
    with pytest.raises(InvalidLabelError):
        extract_mask(lm, {5})
    with pytest.raises(InvalidLabelError):
        extract_mask(lm, {-1})


def test_label_histogram_examples():
    assert label_histogram(LabelMap(np.zeros((1, 2, 2), np.uint8))) == {0: 4}
    h = label_histogram(LabelMap(np.array([0, 1, 1, 2], np.uint8).reshape(1, 2, 2)))
    assert h == {0: 1, 1: 2, 2: 1}


def test_labelmap_validation():
    with pytest.raises(InvalidLabelError):
        LabelMap(np.full((1, 2, 2), 5))
    with pytest.raises(ValueError):
        LabelMap(np.zeros((2, 2), np.uint8))
    with pytest.raises(ValueError):
        LabelMap(np.zeros((1, 2, 2), np.uint8), spacing=(1.0, 0.0, 1.0))


def test_volume_immutable_and_finite():
    src = np.arange(8, dtype=np.float64).reshape(2, 2, 2)
    v = Volume(src)
    src[0, 0, 0] = 99
    assert v.data[0, 0, 0] == 0
    with pytest.raises(ValueError):
        v.data[0, 0, 0] = 1
    with pytest.raises(ValueError):
        Volume(np.full((1, 2, 2), np.nan))


def test_structure_mask_shape():
    m = StructureMask(np.ones((1, 2, 3), bool))
    assert m.count() == 6 and m.shape == (1, 2, 3)


@settings(max_examples=60, deadline=None)
@given(label_grids, st.sets(st.integers(0, 4)), st.sets(st.integers(0, 4)))
def test_mask_algebra(arr, a, b):
    lm = LabelMap(arr)
    assert extract_mask(lm, LABEL_CODES).bits.all()
    assert not extract_mask(lm, set()).bits.any()
    ma, mb, mab = extract_mask(lm, a), extract_mask(lm, b), extract_mask(lm, a | b)
    assert np.array_equal(mab.bits, ma.bits | mb.bits)
    if not (a & b):
        assert not (ma.bits & mb.bits).any()


@settings(max_examples=60, deadline=None)
@given(label_grids)
def test_histogram_partition(arr):
    lm = LabelMap(arr)
    h = label_histogram(lm)
    assert sum(h.values()) == arr.size
    for code in LABEL_CODES:
        assert h.get(code, 0) == extract_mask(lm, {code}).count()
