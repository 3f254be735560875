"""Shared fixtures for the slower end-to-end checks."""

import json
from pathlib import Path

import numpy as np

from mieval import cli, segnet
from mieval.preproc import normalize_intensity
from mieval.synthetic import make_case


def overfit_cases(seed=0, n=4, size=32, n_slices=2):
    rng = np.random.default_rng(seed)
    cases = []
    for i in range(n):
        v, lm = make_case(rng, size, n_slices, pathological=bool(i % 2))
        cases.append((normalize_intensity(v), lm))
    return cases


def foreground_dice(model, cases):
    """Per-case Dice of the union of non-background classes, in the model's class space."""
    out = []
    for v, lm in cases:
        pred = segnet.predict_case(model, v).labels > 0
        tgt = segnet.targets_for(model.role, lm.labels) > 0
        denom = pred.sum() + tgt.sum()
        out.append(1.0 if denom == 0 else 2.0 * (pred & tgt).sum() / denom)
    return out


def overfit_run(role, epochs=200, seed=0, depth=2, size=32):
    cases = overfit_cases(seed, size=size)
    model = segnet.build_unet(segnet.default_spec(role, depth=depth, input_size=size), seed, role)
    cfg = segnet.TrainConfig(max_epochs=epochs, early_stop_patience=epochs, seed=seed)
    result = segnet.train(model, cases, cases, cfg)
    return model, result, cases


# -- clinical generative model -------------------------------------------------

# two informative features; Mahalanobis class separation 2.563 gives
# Phi(2.563 / 2) = 0.90 Bayes accuracy under equal priors
CLIN_DELTA = 2.563
CLIN_INFORMATIVE = (1, 6)


def clinical_generative(seed, n=100, n_path=67, delta=CLIN_DELTA, d=11, informative=CLIN_INFORMATIVE):
    rng = np.random.default_rng(seed)
    y = np.r_[np.ones(n_path), -np.ones(n - n_path)]
    y = y[rng.permutation(n)]
    X = rng.normal(size=(n, d))
    shift = delta / (2 * np.sqrt(len(informative)))
    for j in informative:
        X[:, j] += y * shift
    return X, y


def separable_set(seed, n=20, d=2, gap=0.15):
    """Random linearly separable points with a margin band removed."""
    rng = np.random.default_rng(seed)
    X = rng.normal(size=(4 * n, d))
    wt = rng.normal(size=d)
    m = X @ wt / np.linalg.norm(wt) + rng.uniform(-0.5, 0.5)
    keep = np.abs(m) > gap
    X, m = X[keep][:n], m[keep][:n]
    return X, np.sign(m)


def circles(seed, n_each=20):
    rng = np.random.default_rng(seed)
    r = np.r_[rng.uniform(0, 1, n_each), rng.uniform(2, 3, n_each)]
    t = rng.uniform(0, 2 * np.pi, 2 * n_each)
    X = np.c_[r * np.cos(t), r * np.sin(t)]
    y = np.r_[np.ones(n_each), -np.ones(n_each)]
    return X, y


# -- metric masks ---------------------------------------------------------------


def random_mask_pairs(n=200, seed=0):
    rng = np.random.default_rng(seed)
    for i in range(n):
        shape = tuple(int(s) for s in rng.integers(1, 7, 3))
        p = rng.uniform(0.05, 0.6)
        a = rng.random(shape) < p
        b = rng.random(shape) < rng.uniform(0.05, 0.6)
        if i % 4 == 0:
            spacing = (1.0, 1.0, 1.0)
        else:
            spacing = tuple(float(s) for s in rng.uniform(0.3, 10.0, 3))
        yield a, b, spacing


# -- CLI runs -----------------------------------------------------------------


def smoke_config(root, out, **extra):
    doc = {
        "seed": 0,
        "output_dir": str(out),
        "dataset": {"root": str(root)},
        "split": {"n_val": 2, "val_pathological": 1, "val_normal": 1},
        "preproc": {"target_h": 16, "target_w": 16},
        "anatomical": {"base_features": 4, "depth": 1},
        "pathological": {"base_features": 4, "depth": 1},
        "train": {"max_epochs": 3, "early_stop_patience": 3},
        "svm": {"linear_epochs": 30},
        "folds": 2,
    }
    doc.update(extra)
    return doc


def write_cfg(path, doc):
    path.write_text(json.dumps(doc), encoding="utf-8")
    return path


def run_all(cfg_path):
    codes = [
        cli.main(["train-seg", "--role", "anatomical", "--config", str(cfg_path)]),
        cli.main(["train-seg", "--role", "pathological", "--config", str(cfg_path)]),
        cli.main(["predict", "--config", str(cfg_path)]),
        cli.main(["fit-clinical", "--config", str(cfg_path)]),
        cli.main(["classify", "--mode", "both", "--config", str(cfg_path)]),
        cli.main(["evaluate", "--config", str(cfg_path)]),
        cli.main(["crossval", "--config", str(cfg_path)]),
    ]
    return codes


def snapshot(root):
    """Relative path -> bytes for every file under ``root``."""
    root = Path(root)
    return {str(p.relative_to(root)): p.read_bytes() for p in sorted(root.rglob("*")) if p.is_file()}
