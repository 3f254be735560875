import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

import oracles
from mieval.imgclassify import NORMAL, PATHOLOGICAL, SliceRuleConfig, classify_from_segmentation, pathological_slices
from mieval.volcore import LabelMap


def _lm(arr):
    return LabelMap(np.asarray(arr, np.uint8))


def test_no_pathology_is_normal():
    arr = np.zeros((5, 4, 4), np.uint8)
    arr[:, 1:3, 1:3] = 2
    assert classify_from_segmentation(_lm(arr)) == (NORMAL, [])


def test_two_of_seven_slices():
    arr = np.zeros((7, 4, 4), np.uint8)
    arr[2, 0, 0] = 3
    arr[5, 1, 1] = 4
    assert classify_from_segmentation(_lm(arr)) == (PATHOLOGICAL, [2, 5])


def test_one_slice_stays_normal():
    arr = np.zeros((7, 4, 4), np.uint8)
    arr[3, :2, :2] = 3
    assert classify_from_segmentation(_lm(arr))[0] == NORMAL
    assert classify_from_segmentation(_lm(arr), SliceRuleConfig(2, 10))[0] == NORMAL
    assert classify_from_segmentation(_lm(arr), SliceRuleConfig(1, 4))[0] == PATHOLOGICAL
    assert classify_from_segmentation(_lm(arr), SliceRuleConfig(1, 5))[0] == NORMAL


def test_config_validation():
    with pytest.raises(ValueError):
        SliceRuleConfig(0, 1)
    with pytest.raises(ValueError):
        SliceRuleConfig(2, 0)


@pytest.mark.parametrize("min_slices", [1, 2, 3, 4])
@pytest.mark.parametrize("min_pixels", [1, 2])
def test_exhaustive_four_slice_enumeration(min_slices, min_pixels):
    cfg = SliceRuleConfig(min_slices, min_pixels)
    n = 0
    for arr in oracles.enumerate_four_slice_maps():
        expect = oracles.slice_rule_oracle(arr.reshape(4, -1).tolist(), min_slices, min_pixels)
        assert classify_from_segmentation(LabelMap(arr), cfg)[0] == expect
        n += 1
    assert n == 9 ** 4


label_maps = arrays(np.uint8, st.tuples(st.integers(1, 6), st.integers(1, 4), st.integers(1, 4)), elements=st.integers(0, 4))


@settings(max_examples=80, deadline=None)
@given(label_maps, st.integers(0, 10_000))
def test_invariances(arr, seed):
    rng = np.random.default_rng(seed)
    base = classify_from_segmentation(_lm(arr))[0]
    # slice order
    assert classify_from_segmentation(_lm(arr[rng.permutation(len(arr))]))[0] == base
    # swapping 3 and 4
    swapped = arr.copy()
    swapped[arr == 3] = 4
    swapped[arr == 4] = 3
    assert classify_from_segmentation(_lm(swapped))[0] == base
    # adding pathology never flips pathological -> normal
    more = arr.copy()
    more.reshape(-1)[rng.integers(0, arr.size)] = 3
    if base == PATHOLOGICAL:
        assert classify_from_segmentation(_lm(more))[0] == PATHOLOGICAL
    # min slices 1 means "any pathological voxel"
    any_path = bool(np.isin(arr, (3, 4)).any())
    assert (classify_from_segmentation(_lm(arr), SliceRuleConfig(1, 1))[0] == PATHOLOGICAL) == any_path
    assert pathological_slices(_lm(arr)) == sorted(pathological_slices(_lm(arr)))
