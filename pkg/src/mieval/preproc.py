"""In-plane resizing and per-case intensity normalization."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from mieval.volcore import LabelMap, Volume


@dataclass(frozen=True)
class PreprocConfig:
    target_h: int = 256
    target_w: int = 256
    epsilon_std: float = 1e-8

    def __post_init__(self):
        for name in ("target_h", "target_w"):
            v = getattr(self, name)
            if v < 8 or v % 2:
                raise ValueError(f"{name} must be even and >= 8, got {v}")
        if not self.epsilon_std > 0:
            raise ValueError("epsilon_std must be > 0")


def _src_coords(n_in: int, n_out: int) -> np.ndarray:
    # half-pixel centers (align_corners=False), clamped to the valid range
    c = (np.arange(n_out, dtype=np.float64) + 0.5) * (n_in / n_out) - 0.5
    return np.clip(c, 0.0, n_in - 1)


def _bilinear_axis(n_in: int, n_out: int):
    c = _src_coords(n_in, n_out)
    lo = np.floor(c).astype(np.intp)
    hi = np.minimum(lo + 1, n_in - 1)
    return lo, hi, c - lo


def bilinear_resize(data: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    """Bilinearly resample the last two axes of ``data``."""
    h, w = data.shape[-2:]
    if (h, w) == (out_h, out_w):
        return data.copy()
    y0, y1, fy = _bilinear_axis(h, out_h)
    x0, x1, fx = _bilinear_axis(w, out_w)
    d = data.astype(np.float64)
    top = d[..., y0, :]
    bot = d[..., y1, :]
    rows = top + (bot - top) * fy[:, None]
    left = rows[..., x0]
    right = rows[..., x1]
    return left + (right - left) * fx


def nearest_indices(n_in: int, n_out: int) -> np.ndarray:
    idx = np.floor((np.arange(n_out) + 0.5) * (n_in / n_out)).astype(np.intp)
    return np.minimum(idx, n_in - 1)


def nearest_resize(data: np.ndarray, out_h: int, out_w: int) -> np.ndarray:
    h, w = data.shape[-2:]
    return data[..., nearest_indices(h, out_h), :][..., nearest_indices(w, out_w)]


def _rescaled_spacing(spacing, h, w, out_h, out_w):
    dz, dy, dx = spacing
    return (dz, dy * h / out_h, dx * w / out_w)


def resize_volume(v: Volume, cfg: PreprocConfig = PreprocConfig()) -> Volume:
    _, h, w = v.shape
    out = bilinear_resize(v.data, cfg.target_h, cfg.target_w).astype(v.data.dtype)
    return Volume(out, _rescaled_spacing(v.spacing, h, w, cfg.target_h, cfg.target_w), v.case_id)


def resize_labels(lm: LabelMap, cfg: PreprocConfig = PreprocConfig()) -> LabelMap:
    _, h, w = lm.shape
    out = nearest_resize(lm.labels, cfg.target_h, cfg.target_w)
    return LabelMap(out, _rescaled_spacing(lm.spacing, h, w, cfg.target_h, cfg.target_w), lm.case_id)


def resize_labels_to(lm: LabelMap, shape: tuple[int, int], spacing) -> LabelMap:
    """Bring a label map back to a native in-plane grid (nearest neighbour)."""
    out = nearest_resize(lm.labels, shape[0], shape[1])
    return LabelMap(out, spacing, lm.case_id)


def normalize_intensity(v: Volume, cfg: PreprocConfig = PreprocConfig()) -> Volume:
    """Zero-mean, unit-std over the whole 3D case."""
    d = v.data.astype(np.float64)
    if np.all(d == d.flat[0]):
        return Volume(np.zeros_like(v.data), v.spacing, v.case_id)
    std = max(float(d.std()), cfg.epsilon_std)
    out = (d - d.mean()) / std
    return Volume(out.astype(v.data.dtype), v.spacing, v.case_id)


def preprocess(v: Volume, cfg: PreprocConfig = PreprocConfig()) -> Volume:
    # resize first; normalization is the last step before the network
    return normalize_intensity(resize_volume(v, cfg), cfg)
