"""3D segmentation metrics (Dice, Hausdorff in mm, relative volume difference),
classification accuracy and summary tables (mean, std, min, max)."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy import ndimage

from mieval.volcore import INFARCTION, LV_CAVITY, MYOCARDIUM, NO_REFLOW, LabelMap, StructureMask, extract_mask

# evaluated structures and the label sets that define them
STRUCTURES = {
    "lv_cavity": (LV_CAVITY,),
    "myocardium": (MYOCARDIUM, INFARCTION, NO_REFLOW),
    "infarction": (INFARCTION,),
    "no_reflow": (NO_REFLOW,),
}
METRIC_NAMES = ("dsc", "hd_mm", "rvd")


def _check_pair(a: StructureMask, b: StructureMask):
    if a.shape != b.shape:
        raise ValueError(f"mask shapes differ: {a.shape} vs {b.shape}")


def dice3d(a: StructureMask, b: StructureMask) -> float:
    _check_pair(a, b)
    na, nb = a.count(), b.count()
    if na + nb == 0:
        return 1.0
    inter = int(np.count_nonzero(a.bits & b.bits))
    return 2.0 * inter / (na + nb)


def _directed_hd(src: np.ndarray, dst: np.ndarray, spacing) -> float:
    # exact Euclidean distance transform to the nearest dst voxel
    dist = ndimage.distance_transform_edt(~dst, sampling=spacing)
    return float(dist[src].max())


def hausdorff3d_mm(a: StructureMask, b: StructureMask) -> Optional[float]:
    """Symmetric Hausdorff distance between voxel-center sets, in mm.

    Returns ``None`` when either mask is empty.
    """
    _check_pair(a, b)
    if not np.allclose(a.spacing, b.spacing):
        raise ValueError(f"mask spacings differ: {a.spacing} vs {b.spacing}")
    if a.count() == 0 or b.count() == 0:
        return None
    return max(_directed_hd(a.bits, b.bits, a.spacing), _directed_hd(b.bits, a.bits, a.spacing))


def rvd(a: StructureMask, b_gt: StructureMask) -> Optional[float]:
    """|V_pred - V_gt| / V_gt, or ``None`` for an empty ground truth."""
    _check_pair(a, b_gt)
    g = b_gt.count()
    if g == 0:
        return None
    return abs(a.count() - g) / g


def accuracy(preds: Sequence, truths: Sequence) -> float:
    if len(preds) != len(truths):
        raise ValueError(f"{len(preds)} predictions vs {len(truths)} truths")
    if not preds:
        raise ValueError("accuracy of an empty list")
    return sum(p == t for p, t in zip(preds, truths)) / len(preds)


@dataclass
class CaseReport:
    case_id: str
    # structure -> metric -> value (None = missing)
    metrics: dict = field(default_factory=dict)
    predicted_class: Optional[str] = None
    true_class: Optional[str] = None


def evaluate_case(pred: LabelMap, gt: LabelMap, case_id: str = "") -> CaseReport:
    if pred.shape != gt.shape:
        raise ValueError(f"case {case_id}: prediction {pred.shape} vs ground truth {gt.shape}")
    rep = CaseReport(case_id or gt.case_id)
    for name, codes in STRUCTURES.items():
        a = extract_mask(pred, codes)
        g = extract_mask(gt, codes)
        rep.metrics[name] = {
            "dsc": dice3d(a, g),
            "hd_mm": hausdorff3d_mm(a, g),
            "rvd": rvd(a, g),
        }
    return rep


@dataclass
class MetricSummary:
    mean: Optional[float]
    std: Optional[float]
    min: Optional[float]
    max: Optional[float]
    n: int
    n_missing: int


@dataclass
class SummaryReport:
    # structure -> metric -> MetricSummary
    stats: dict = field(default_factory=dict)
    accuracy: Optional[float] = None
    n_cases: int = 0

    def to_dict(self) -> dict:
        return {
            "n_cases": self.n_cases,
            "accuracy": self.accuracy,
            "structures": {
                s: {m: vars(v) for m, v in ms.items()} for s, ms in self.stats.items()
            },
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"


def summarize_values(values: Sequence[Optional[float]], ddof: int = 1) -> MetricSummary:
    present = [float(v) for v in values if v is not None]
    missing = len(values) - len(present)
    if not present:
        return MetricSummary(None, None, None, None, 0, missing)
    arr = np.asarray(present)
    std = float(arr.std(ddof=ddof)) if len(arr) > ddof else 0.0
    return MetricSummary(float(arr.mean()), std, float(arr.min()), float(arr.max()), len(arr), missing)


def summarize(reports: Sequence[CaseReport], ddof: int = 1) -> SummaryReport:
    if not reports:
        raise ValueError("no case reports to summarize")
    out = SummaryReport(n_cases=len(reports))
    structures = list(reports[0].metrics)
    for s in structures:
        out.stats[s] = {
            m: summarize_values([r.metrics[s][m] for r in reports], ddof) for m in METRIC_NAMES
        }
    labelled = [(r.predicted_class, r.true_class) for r in reports if r.predicted_class and r.true_class]
    if labelled:
        out.accuracy = accuracy([p for p, _ in labelled], [t for _, t in labelled])
    return out


def _fmt(v) -> str:
    if v is None:
        return ""
    return repr(float(v))


def reports_to_csv(reports: Sequence[CaseReport]) -> str:
    """One row per case and structure."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["case_id", "structure", *METRIC_NAMES, "predicted_class", "true_class"])
    for r in reports:
        for s, ms in r.metrics.items():
            w.writerow([r.case_id, s, *(_fmt(ms[m]) for m in METRIC_NAMES), r.predicted_class or "", r.true_class or ""])
    return buf.getvalue()


def format_table(summary: SummaryReport) -> str:
    """Plain-text table: mean ± std, min, max per structure and metric."""
    lines = [f"{'structure':<12} {'metric':<6} {'mean ± std':>22} {'min':>9} {'max':>9} {'n':>4} {'miss':>4}"]
    for s, ms in summary.stats.items():
        for m, st in ms.items():
            if st.n == 0:
                lines.append(f"{s:<12} {m:<6} {'-':>22} {'-':>9} {'-':>9} {0:>4} {st.n_missing:>4}")
                continue
            ms_txt = f"{st.mean:.4g} ± {st.std:.3g}"
            lines.append(f"{s:<12} {m:<6} {ms_txt:>22} {st.min:>9.4g} {st.max:>9.4g} {st.n:>4} {st.n_missing:>4}")
    if summary.accuracy is not None:
        lines.append(f"accuracy: {summary.accuracy:.4f}")
    return "\n".join(lines)


