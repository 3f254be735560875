"""Case-level decision from a merged segmentation: a case is pathological when
infarction or no-reflow shows up on enough slices."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from mieval.volcore import INFARCTION, NO_REFLOW, LabelMap

NORMAL = "normal"
PATHOLOGICAL = "pathological"


@dataclass(frozen=True)
class SliceRuleConfig:
    min_pathological_slices: int = 2
    min_pixels_per_slice: int = 1

    def __post_init__(self):
        if self.min_pathological_slices < 1 or self.min_pixels_per_slice < 1:
            raise ValueError("slice rule thresholds must be >= 1")


def pathological_slices(lm: LabelMap, cfg: SliceRuleConfig = SliceRuleConfig()) -> list[int]:
    per_slice = np.isin(lm.labels, (INFARCTION, NO_REFLOW)).sum(axis=(1, 2))
    return [int(i) for i in np.flatnonzero(per_slice >= cfg.min_pixels_per_slice)]


def classify_from_segmentation(lm: LabelMap, cfg: SliceRuleConfig = SliceRuleConfig()) -> tuple[str, list[int]]:
    slices = pathological_slices(lm, cfg)
    label = PATHOLOGICAL if len(slices) >= cfg.min_pathological_slices else NORMAL
    return label, slices
