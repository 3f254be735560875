"""Synthetic DE-MRI-like cases and clinical files for smoke runs and tests.

Each slice holds a bright LV blood-pool disk inside a dark myocardial ring on
a noisy background. Pathological cases get a hyperenhanced infarct sector in
the ring, optionally with a dark no-reflow core.
"""

from __future__ import annotations

from pathlib import Path
from typing import Optional

import numpy as np

from mieval.dataio import save_nifti
from mieval.volcore import INFARCTION, LV_CAVITY, MYOCARDIUM, NO_REFLOW, LabelMap, Volume

_INTENSITY = {0: 0.45, LV_CAVITY: 1.0, MYOCARDIUM: 0.05, INFARCTION: 0.85, NO_REFLOW: 0.2}


def make_case(
    rng: np.random.Generator,
    size: int = 32,
    n_slices: int = 2,
    pathological: bool = False,
    no_reflow: bool = True,
    spacing=(8.0, 1.5, 1.5),
    noise: float = 0.05,
    case_id: str = "",
) -> tuple[Volume, LabelMap]:
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    labels = np.zeros((n_slices, size, size), dtype=np.uint8)
    cy = size / 2 + rng.uniform(-1.5, 1.5)
    cx = size / 2 + rng.uniform(-1.5, 1.5)
    r_in = size * rng.uniform(0.16, 0.22)
    r_out = r_in + size * rng.uniform(0.09, 0.12)
    # pathology on every slice except possibly the first
    start = 1 if n_slices > 2 else 0
    sector = rng.uniform(0, 2 * np.pi)
    for s in range(n_slices):
        shrink = 1.0 - 0.08 * s / max(n_slices - 1, 1)
        r = np.hypot(yy - cy, xx - cx)
        lab = labels[s]
        lab[r < r_out * shrink] = MYOCARDIUM
        lab[r < r_in * shrink] = LV_CAVITY
        if pathological and s >= start:
            ang = np.angle((xx - cx) + 1j * (yy - cy))
            dang = np.angle(np.exp(1j * (ang - sector)))
            ring = lab == MYOCARDIUM
            inf = ring & (np.abs(dang) < 0.9)
            lab[inf] = INFARCTION
            if no_reflow:
                core = inf & (np.abs(dang) < 0.35) & (np.abs(r - (r_in + r_out) * shrink / 2) < (r_out - r_in) * shrink / 4)
                lab[core] = NO_REFLOW
    img = np.vectorize(_INTENSITY.get)(labels).astype(np.float64)
    img += rng.normal(0.0, noise, img.shape)
    bg = labels == 0
    img[bg] += rng.normal(0.0, 0.1, int(bg.sum()))
    img = (img * 400.0).astype(np.float32)
    return Volume(img, spacing, case_id), LabelMap(labels, spacing, case_id)


def make_clinical_text(rng: np.random.Generator, pathological: bool) -> str:
    p = pathological
    fields = [
        ("Sex", "M" if rng.random() < (0.75 if p else 0.55) else "F"),
        ("Age", f"{rng.normal(62 if p else 55, 10):.0f}"),
        ("Tobacco", "Y" if rng.random() < 0.4 else "N"),
        ("Overweight", "1" if rng.random() < 0.45 else "0"),
        ("Arterial hypertension", "1" if rng.random() < (0.5 if p else 0.35) else "0"),
        ("Diabetes", "1" if rng.random() < (0.25 if p else 0.15) else "0"),
        ("Familial history of coronary artery disease", "1" if rng.random() < 0.3 else "0"),
        ("ECG (ST +)", "1" if rng.random() < (0.8 if p else 0.3) else "0"),
        ("Troponin", f"{abs(rng.normal(60 if p else 8, 25 if p else 6)):.1f}"),
        ("Killip Max", str(int(rng.choice([1, 2, 3, 4], p=[0.6, 0.25, 0.1, 0.05] if p else [0.9, 0.08, 0.02, 0.0])))),
        ("FEVG", f"{rng.normal(45 if p else 58, 8):.0f}"),
        ("NTProBNP", f"{abs(rng.normal(1400 if p else 500, 700)):.0f}"),
    ]
    return "\n".join(f"{k}: {v}" for k, v in fields) + "\n"


def write_dataset(
    root,
    n_normal: int = 2,
    n_pathological: int = 2,
    seed: int = 0,
    size: int = 32,
    n_slices: int = 3,
    raw_size: Optional[int] = None,
) -> list[str]:
    """Write an EMIDEC-style tree (``Case_N###`` / ``Case_P###`` folders).

    ``raw_size`` renders images at a different in-plane size than ``size`` so
    that the resize path gets exercised; labels follow the same grid.
    """
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    ids = []
    plan = [("Case_N", i, False) for i in range(n_normal)] + [("Case_P", i, True) for i in range(n_pathological)]
    for prefix, i, path in plan:
        cid = f"{prefix}{i + 1:03d}"
        vol, lm = make_case(rng, raw_size or size, n_slices, path, case_id=cid)
        folder = root / cid
        (folder / "Images").mkdir(parents=True, exist_ok=True)
        (folder / "Contours").mkdir(parents=True, exist_ok=True)
        save_nifti(vol, folder / "Images" / f"{cid}.nii.gz")
        save_nifti(lm, folder / "Contours" / f"{cid}.nii.gz")
        (folder / f"{cid}.txt").write_text(make_clinical_text(rng, path), encoding="utf-8")
        ids.append(cid)
    return ids
