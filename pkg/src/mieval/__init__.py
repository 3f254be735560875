"""Myocardial infarction evaluation from DE-MRI and clinical records.

Segmentation with two encoder-decoder networks (anatomy and pathology),
anatomical masking of the pathology output, cascaded SVM classification of
clinical records, slice-count classification of segmentations and 3D
evaluation metrics.
"""

from mieval.volcore import (
    BACKGROUND,
    INFARCTION,
    LV_CAVITY,
    MYOCARDIUM,
    NO_REFLOW,
    LabelMap,
    StructureMask,
    Volume,
    extract_mask,
    label_histogram,
)

__version__ = "0.1.0"

__all__ = [
    "BACKGROUND",
    "LV_CAVITY",
    "MYOCARDIUM",
    "INFARCTION",
    "NO_REFLOW",
    "Volume",
    "LabelMap",
    "StructureMask",
    "extract_mask",
    "label_histogram",
]
