import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

import oracles
from scenarios import random_mask_pairs
from mieval.metrics import (
    CaseReport,
    accuracy,
    dice3d,
    evaluate_case,
    format_table,
    hausdorff3d_mm,
    reports_to_csv,
    rvd,
    summarize,
    summarize_values,
)
from mieval.volcore import LabelMap, StructureMask


def M(bits, spacing=(1.0, 1.0, 1.0)):
    return StructureMask(np.asarray(bits, bool), spacing)


def test_dice_examples():
    a = np.zeros((2, 4, 4), bool)
    a[0, :2, :] = True  # 8 voxels
    b = np.zeros((2, 4, 4), bool)
    b[0, 1:3, :] = True  # 8 voxels, 4 shared
    assert dice3d(M(a), M(b)) == 0.5
    assert dice3d(M(a), M(a)) == 1.0
    assert dice3d(M(a), M(~a)) == 0.0
    assert dice3d(M(np.zeros((1, 2, 2))), M(np.zeros((1, 2, 2)))) == 1.0
    with pytest.raises(ValueError):
        dice3d(M(np.zeros((1, 2, 2))), M(np.zeros((1, 2, 3))))


def test_hausdorff_examples():
    a = np.zeros((1, 6, 6), bool)
    b = np.zeros((1, 6, 6), bool)
    a[0, 0, 0] = True
    b[0, 3, 4] = True
    assert hausdorff3d_mm(M(a), M(b)) == 5.0
    assert hausdorff3d_mm(M(a, (1, 2, 1)), M(b, (1, 2, 1))) == pytest.approx(math.sqrt(52), abs=1e-12)
    assert hausdorff3d_mm(M(a), M(a)) == 0.0
    assert hausdorff3d_mm(M(a), M(np.zeros_like(a))) is None
    with pytest.raises(ValueError):
        hausdorff3d_mm(M(a, (1, 1, 1)), M(b, (2, 1, 1)))


def test_hausdorff_across_slices():
    a = np.zeros((3, 2, 2), bool)
    b = np.zeros((3, 2, 2), bool)
    a[0, 0, 0] = True
    b[2, 1, 1] = True
    assert hausdorff3d_mm(M(a, (8, 1.5, 1.5)), M(b, (8, 1.5, 1.5))) == pytest.approx(math.sqrt(16**2 + 2 * 1.5**2))


def test_rvd_examples():
    g = np.zeros(200, bool)
    g[:100] = True
    a = np.zeros(200, bool)
    a[:120] = True
    shp = (1, 10, 20)
    assert rvd(M(a.reshape(shp)), M(g.reshape(shp))) == pytest.approx(0.2)
    assert rvd(M(g.reshape(shp)), M(g.reshape(shp))) == 0.0
    assert rvd(M(np.zeros(shp)), M(g.reshape(shp))) == 1.0
    assert rvd(M(g.reshape(shp)), M(np.zeros(shp))) is None


def test_metrics_match_brute_force_oracles():
    for a, b, spacing in random_mask_pairs():
        ma, mb = M(a, spacing), M(b, spacing)
        assert dice3d(ma, mb) == oracles.dice_brute(a, b)
        assert rvd(ma, mb) == oracles.rvd_brute(a, b)
        hd, ref = hausdorff3d_mm(ma, mb), oracles.hausdorff_brute(a, b, spacing)
        if ref is None:
            assert hd is None
        else:
            assert abs(hd - ref) <= 1e-9


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 2**31))
def test_metric_symmetry_and_ranges(seed):
    rng = np.random.default_rng(seed)
    shape = tuple(int(s) for s in rng.integers(1, 6, 3))
    a, b = rng.random(shape) < 0.4, rng.random(shape) < 0.4
    sp = tuple(float(s) for s in rng.uniform(0.5, 4, 3))
    d = dice3d(M(a, sp), M(b, sp))
    assert 0.0 <= d <= 1.0 and d == dice3d(M(b, sp), M(a, sp))
    h1, h2 = hausdorff3d_mm(M(a, sp), M(b, sp)), hausdorff3d_mm(M(b, sp), M(a, sp))
    assert h1 == h2
    r = rvd(M(a, sp), M(b, sp))
    assert r is None or r >= 0


def test_rvd_scale_free_under_refinement(rng):
    a = rng.random((2, 3, 3)) < 0.5
    g = rng.random((2, 3, 3)) < 0.5
    g[0, 0, 0] = True
    up = lambda x: np.repeat(np.repeat(x, 2, axis=1), 2, axis=2)
    assert rvd(M(up(a)), M(up(g))) == pytest.approx(rvd(M(a), M(g)), abs=1e-15)


def test_accuracy():
    assert accuracy(["a"] * 5, ["a"] * 5) == 1.0
    assert accuracy(["a", "b"], ["b", "a"]) == 0.0
    assert abs(accuracy(["p"] * 14 + ["n"], ["p"] * 15) - 0.9333) < 1e-4
    with pytest.raises(ValueError):
        accuracy([], [])
    with pytest.raises(ValueError):
        accuracy(["a"], ["a", "b"])


def test_summaries():
    s = summarize_values([0.90, 0.96])
    assert s.mean == pytest.approx(0.93) and s.min == 0.90 and s.max == 0.96
    assert s.std == pytest.approx(np.std([0.90, 0.96], ddof=1))
    one = summarize_values([0.5])
    assert (one.mean, one.min, one.max, one.std) == (0.5, 0.5, 0.5, 0.0)
    missing = summarize_values([None, None])
    assert missing.n == 0 and missing.n_missing == 2 and missing.mean is None
    pop = summarize_values([1.0, 3.0], ddof=0)
    assert pop.std == 1.0


def test_evaluate_case_perfect_prediction(rng):
    arr = rng.integers(0, 5, (3, 5, 5)).astype(np.uint8)
    gt = LabelMap(arr, (8.0, 1.4, 1.4))
    rep = evaluate_case(gt, gt, "c1")
    for s, m in rep.metrics.items():
        assert m["dsc"] == 1.0 and m["hd_mm"] == 0.0 and m["rvd"] == 0.0, s


def test_evaluate_case_missing_flags():
    gt = np.zeros((1, 4, 4), np.uint8)
    gt[0, 1:3, 1:3] = 2
    pred = gt.copy()
    pred[0, 1, 1] = 3
    rep = evaluate_case(LabelMap(pred), LabelMap(gt))
    inf = rep.metrics["infarction"]
    assert inf["dsc"] == 0.0 and inf["hd_mm"] is None and inf["rvd"] is None
    nr = rep.metrics["no_reflow"]
    assert nr["dsc"] == 1.0 and nr["hd_mm"] is None and nr["rvd"] is None
    # myocardium includes pathology, so it is unchanged
    assert rep.metrics["myocardium"]["dsc"] == 1.0


def test_summary_report_and_csv(rng):
    reports = []
    for i in range(6):
        gt = rng.integers(0, 5, (2, 6, 6)).astype(np.uint8)
        pred = gt.copy()
        pred[rng.random(gt.shape) < 0.2] = 0
        rep = evaluate_case(LabelMap(pred), LabelMap(gt), f"c{i}")
        rep.predicted_class, rep.true_class = "pathological", "pathological" if i else "normal"
        reports.append(rep)
    summ = summarize(reports)
    assert summ.accuracy == pytest.approx(5 / 6) and summ.n_cases == 6
    for s, ms in summ.stats.items():
        for m, st_ in ms.items():
            if st_.n:
                assert st_.min <= st_.mean <= st_.max
    doc = json.loads(summ.to_json())
    assert set(doc["structures"]) == {"lv_cavity", "myocardium", "infarction", "no_reflow"}
    assert set(doc["structures"]["lv_cavity"]["dsc"]) == {"mean", "std", "min", "max", "n", "n_missing"}
    rows = reports_to_csv(reports).splitlines()
    assert len(rows) == 1 + 6 * 4
    assert "mean ± std" in format_table(summ)
    with pytest.raises(ValueError):
        summarize([])
