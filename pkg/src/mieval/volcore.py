"""Image, label and mask value types.

All grids are slice-major ``(S, H, W)`` and spacing is ``(dz, dy, dx)`` in mm.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable

import numpy as np

BACKGROUND = 0
LV_CAVITY = 1
MYOCARDIUM = 2
INFARCTION = 3
NO_REFLOW = 4

LABEL_CODES = (BACKGROUND, LV_CAVITY, MYOCARDIUM, INFARCTION, NO_REFLOW)
LABEL_NAMES = {
    BACKGROUND: "background",
    LV_CAVITY: "lv_cavity",
    MYOCARDIUM: "myocardium",
    INFARCTION: "infarction",
    NO_REFLOW: "no_reflow",
}


class InvalidLabelError(ValueError):
    """A label code outside {0, 1, 2, 3, 4}."""


def _check_spacing(spacing) -> tuple[float, float, float]:
    sp = tuple(float(s) for s in spacing)
    if len(sp) != 3:
        raise ValueError(f"spacing must have 3 components, got {len(sp)}")
    if not all(np.isfinite(s) and s > 0 for s in sp):
        raise ValueError(f"spacing components must be finite and > 0, got {sp}")
    return sp  # type: ignore[return-value]


def _check_grid(arr: np.ndarray, what: str) -> None:
    if arr.ndim != 3:
        raise ValueError(f"{what} must be 3D (S, H, W), got shape {arr.shape}")
    if min(arr.shape) < 1:
        raise ValueError(f"{what} has an empty axis: {arr.shape}")


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class Volume:
    """A stack of 2D DE-MRI slices."""

    data: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    case_id: str = ""

    def __post_init__(self):
        data = np.asarray(self.data)
        if not np.issubdtype(data.dtype, np.floating):
            data = data.astype(np.float32)
        _check_grid(data, "volume")
        if not np.all(np.isfinite(data)):
            raise ValueError("volume contains non-finite voxels")
        object.__setattr__(self, "data", _frozen(data))
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape  # type: ignore[return-value]


@dataclass(frozen=True, eq=False)
class LabelMap:
    """Per-voxel labels in the 5-code space (see ``LABEL_NAMES``)."""

    labels: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)
    case_id: str = ""

    def __post_init__(self):
        labels = np.asarray(self.labels)
        if labels.dtype.kind == "f":
            if not np.all(np.isfinite(labels)) or np.any(labels != np.round(labels)):
                raise InvalidLabelError("label map contains non-integer values")
        _check_grid(labels, "label map")
        bad = (labels < 0) | (labels > NO_REFLOW)
        if np.any(bad):
            raise InvalidLabelError(f"invalid label codes: {sorted(set(np.unique(labels[bad]).tolist()))}")
        object.__setattr__(self, "labels", _frozen(labels.astype(np.uint8)))
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.labels.shape  # type: ignore[return-value]


@dataclass(frozen=True, eq=False)
class StructureMask:
    bits: np.ndarray
    spacing: tuple[float, float, float] = (1.0, 1.0, 1.0)

    def __post_init__(self):
        bits = np.asarray(self.bits, dtype=bool)
        _check_grid(bits, "mask")
        object.__setattr__(self, "bits", _frozen(bits))
        object.__setattr__(self, "spacing", _check_spacing(self.spacing))

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.bits.shape  # type: ignore[return-value]

    def count(self) -> int:
        return int(np.count_nonzero(self.bits))


def extract_mask(lm: LabelMap, labels: Iterable[int]) -> StructureMask:
    """Boolean mask of voxels whose label is in ``labels``."""
    wanted = sorted({int(v) for v in labels})
    bad = [v for v in wanted if v not in LABEL_CODES]
    if bad:
        raise InvalidLabelError(f"label ids outside 0..4: {bad}")
    return StructureMask(np.isin(lm.labels, wanted), lm.spacing)


def label_histogram(lm: LabelMap) -> dict[int, int]:
    """Voxel count per label present in the map."""
    values, counts = np.unique(lm.labels, return_counts=True)
    return {int(v): int(c) for v, c in zip(values, counts)}
