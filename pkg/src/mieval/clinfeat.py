"""Clinical-record encoding and the cascaded SVM classifier.

A linear hinge-loss SVM trained on standardized features ranks features by
weight magnitude; the retained features feed an RBF-kernel SVM (solved by
SMO) that makes the normal / pathological decision.
"""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from mieval.dataio import RawClinicalRecord

log = logging.getLogger(__name__)

NORMAL = -1
PATHOLOGICAL = 1
CLASS_NAMES = {NORMAL: "normal", PATHOLOGICAL: "pathological"}
CLASS_CODES = {v: k for k, v in CLASS_NAMES.items()}


class ClinicalEncodeError(ValueError):
    pass


class SvmTrainingError(ValueError):
    pass


class NotFittedError(RuntimeError):
    pass


# -- schema ------------------------------------------------------------------


@dataclass(frozen=True)
class FeatureSpec:
    name: str
    kind: str  # "sex" | "binary" | "killip" | "continuous"
    aliases: tuple


FEATURES = (
    FeatureSpec("sex", "sex", ("sex", "gender")),
    FeatureSpec("age", "continuous", ("age",)),
    FeatureSpec("overweight", "binary", ("overweight",)),
    FeatureSpec("arterial_hypertension", "binary", ("arterialhypertension", "hypertension", "hta")),
    FeatureSpec("diabetes", "binary", ("diabetes",)),
    FeatureSpec(
        "familial_history",
        "binary",
        ("familialhistoryofcoronaryarterydisease", "familialhistory", "familyhistory"),
    ),
    FeatureSpec("troponin", "continuous", ("troponin",)),
    FeatureSpec("killip_max", "killip", ("killipmax", "killip")),
    FeatureSpec("ejection_fraction", "continuous", ("ejectionfraction", "fevg", "lvef", "ef")),
    FeatureSpec("nt_probnp", "continuous", ("ntprobnp", "ventricularnatriureticpeptide", "bnp")),
    FeatureSpec("st_segment", "binary", ("stsegment", "ecgst", "st")),
)
FEATURE_NAMES = tuple(f.name for f in FEATURES)
N_FEATURES = len(FEATURES)

_MISSING = {"", "na", "n/a", "nan", "?", "none", "missing", "unknown"}
_TRUE = {"1", "yes", "y", "true", "+", "oui"}
_FALSE = {"0", "no", "n", "false", "non"}
_ROMAN = {"i": 1, "ii": 2, "iii": 3, "iv": 4}


def _norm_key(key: str) -> str:
    return re.sub(r"[^a-z0-9]", "", key.lower())


_ALIAS_INDEX = {alias: i for i, f in enumerate(FEATURES) for alias in f.aliases}


def feature_index(key: str) -> Optional[int]:
    return _ALIAS_INDEX.get(_norm_key(key))


def _parse_value(spec: FeatureSpec, raw: str) -> float:
    v = raw.strip().lower()
    if v in _MISSING:
        return np.nan
    if spec.kind == "sex":
        if v in ("m", "male", "h", "1"):
            return 1.0
        if v in ("f", "female", "w", "0"):
            return 0.0
    elif spec.kind == "binary":
        if v in _TRUE:
            return 1.0
        if v in _FALSE:
            return 0.0
    elif spec.kind == "killip":
        k = _ROMAN.get(v)
        if k is None:
            try:
                k = float(v)
            except ValueError:
                k = None
        if k is not None and k in (1, 2, 3, 4):
            return float(k)
    else:
        try:
            return float(v.replace(",", "."))
        except ValueError:
            pass
    raise ClinicalEncodeError(f"cannot parse {spec.name} value {raw!r}")


@dataclass
class ClinicalRecord:
    """Features in ``FEATURE_NAMES`` order; NaN marks a value to impute."""

    features: np.ndarray
    label: Optional[int] = None
    case_id: str = ""


def encode_record(raw: RawClinicalRecord, strict: bool = False, label: Optional[int] = None, case_id: str = "") -> ClinicalRecord:
    """Map raw ``key: value`` pairs onto the fixed 11-feature vector.

    Sex is coded F=0, M=1; yes/no fields 0/1; Killip class 1..4 (arabic or
    roman); continuous values pass through. Absent or empty fields become NaN.
    Unknown keys are ignored unless ``strict``.
    """
    x = np.full(N_FEATURES, np.nan)
    for key, value in raw.items:
        idx = feature_index(key)
        if idx is None:
            if strict:
                raise ClinicalEncodeError(f"unrecognized clinical key {key!r}")
            continue
        x[idx] = _parse_value(FEATURES[idx], value)
    if label is not None and label not in (NORMAL, PATHOLOGICAL):
        raise ClinicalEncodeError(f"label must be -1 or +1, got {label}")
    return ClinicalRecord(x, label, case_id)


def records_to_arrays(records: Sequence[ClinicalRecord]) -> tuple[np.ndarray, Optional[np.ndarray]]:
    X = np.vstack([r.features for r in records]).astype(np.float64)
    if all(r.label is not None for r in records):
        return X, np.array([r.label for r in records], dtype=np.float64)
    return X, None


# -- standardization ---------------------------------------------------------


@dataclass
class StandardizerStats:
    mean: np.ndarray
    std: np.ndarray
    impute: np.ndarray

    def to_dict(self) -> dict:
        return {"mean": self.mean.tolist(), "std": self.std.tolist(), "impute": self.impute.tolist()}

    @classmethod
    def from_dict(cls, d) -> "StandardizerStats":
        return cls(*(np.asarray(d[k], dtype=np.float64) for k in ("mean", "std", "impute")))


STD_GUARD = 1e-12


def fit_standardizer(X: np.ndarray) -> StandardizerStats:
    """Median imputation values and z-score statistics from training rows only."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2 or len(X) < 2:
        raise ValueError("standardizer needs at least 2 training records")
    impute = np.zeros(X.shape[1])
    for j in range(X.shape[1]):
        col = X[:, j]
        present = col[~np.isnan(col)]
        impute[j] = np.median(present) if present.size else 0.0
    filled = np.where(np.isnan(X), impute, X)
    std = filled.std(axis=0)
    std = np.where(std < STD_GUARD, 1.0, std)
    return StandardizerStats(filled.mean(axis=0), std, impute)


def apply_standardizer(stats: StandardizerStats, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=np.float64)
    filled = np.where(np.isnan(X), stats.impute, X)
    return (filled - stats.mean) / stats.std


# -- linear SVM --------------------------------------------------------------


def _check_labels(y: np.ndarray):
    vals = set(np.unique(y).tolist())
    if not vals <= {-1.0, 1.0}:
        raise SvmTrainingError(f"labels must be -1/+1, got {sorted(vals)}")
    if len(vals) < 2:
        raise SvmTrainingError("training data contains a single class")


def primal_objective(w: np.ndarray, b: float, X: np.ndarray, y: np.ndarray, C: float) -> float:
    """0.5 * ||w||^2 + C * sum of hinge losses."""
    return float(0.5 * w @ w + C * np.maximum(0.0, 1.0 - y * (X @ w + b)).sum())


@dataclass
class LinearSvmModel:
    w: np.ndarray
    b: float
    C: float
    trained: bool = True
    objective_history: list = field(default_factory=list)

    def decision_function(self, X: np.ndarray) -> np.ndarray:
        return np.asarray(X) @ self.w + self.b

    def predict(self, X: np.ndarray) -> np.ndarray:
        return np.where(self.decision_function(X) >= 0, 1.0, -1.0)


def train_linear_svm(X: np.ndarray, y: np.ndarray, C: float = 1.0, epochs: int = 300, seed: int = 0) -> LinearSvmModel:
    """Hinge-loss linear SVM by stochastic subgradient descent.

    Minimizes the scaled primal ``lam/2 ||w||^2 + mean hinge`` with
    ``lam = 1 / (C n)`` (same minimizer as ``0.5 ||w||^2 + C sum hinge``).
    The bias is unregularized. Step size ``1 / (lam (t + n))``; the returned
    model is the best, by primal objective, of the running averages of the
    iterates over the second half of training, so the logged objective never
    increases.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    _check_labels(y)
    if C <= 0 or epochs < 1:
        raise SvmTrainingError("C must be > 0 and epochs >= 1")
    n, d = X.shape
    lam = 1.0 / (C * n)
    rng = np.random.default_rng(seed)
    w = np.zeros(d)
    b = 0.0
    w_avg = np.zeros(d)
    b_avg = 0.0
    n_avg = 0
    best = (np.inf, w.copy(), 0.0)
    history = []
    t = 0
    start_avg = epochs // 2
    for epoch in range(epochs):
        for i in rng.permutation(n):
            t += 1
            eta = 1.0 / (lam * (t + n))
            margin = y[i] * (X[i] @ w + b)
            w *= 1.0 - eta * lam
            if margin < 1.0:
                w += eta * y[i] * X[i]
                b += eta * y[i]
        if epoch >= start_avg:
            n_avg += 1
            w_avg += (w - w_avg) / n_avg
            b_avg += (b - b_avg) / n_avg
            obj = primal_objective(w_avg, b_avg, X, y, C)
            if obj < best[0]:
                best = (obj, w_avg.copy(), b_avg)
            history.append(best[0])
    return LinearSvmModel(best[1], float(best[2]), C, True, history)


def select_features(model: LinearSvmModel, tau: float = 0.1) -> list[int]:
    """Indices with |w_i| >= tau * max|w|; never empty."""
    mag = np.abs(model.w)
    top = float(mag.max()) if mag.size else 0.0
    if top == 0.0:
        return [int(np.argmax(mag))]
    keep = [int(i) for i in np.flatnonzero(mag >= tau * top)]
    return keep or [int(np.argmax(mag))]


# -- RBF SVM (SMO) -----------------------------------------------------------


def rbf_kernel(A: np.ndarray, B: np.ndarray, gamma: float) -> np.ndarray:
    sq = (A * A).sum(1)[:, None] + (B * B).sum(1)[None, :] - 2.0 * A @ B.T
    return np.exp(-gamma * np.maximum(sq, 0.0))


def default_gamma(X: np.ndarray) -> float:
    var = float(np.var(X))
    d = X.shape[1]
    return 1.0 / (d * var) if var > 0 else 1.0 / d


@dataclass
class RbfSvmModel:
    support_vectors: np.ndarray
    dual_coef: np.ndarray  # alpha_i * y_i for the support vectors
    b: float
    gamma: float
    C: float
    features: list = field(default_factory=list)
    alpha: Optional[np.ndarray] = None  # full alpha vector over the training set
    n_iter: int = 0

    def decision_function(self, X: np.ndarray) -> np.ndarray:
        X = np.asarray(X, dtype=np.float64)
        if len(self.dual_coef) == 0:
            return np.full(len(X), self.b)
        return rbf_kernel(X, self.support_vectors, self.gamma) @ self.dual_coef + self.b

    def predict(self, X: np.ndarray) -> np.ndarray:
        # decision value 0 counts as pathological
        return np.where(self.decision_function(X) >= 0, 1.0, -1.0)


def dual_objective(alpha: np.ndarray, y: np.ndarray, K: np.ndarray) -> float:
    """sum(alpha) - 0.5 * alpha^T Q alpha, Q = yy^T * K (to be maximized)."""
    ay = alpha * y
    return float(alpha.sum() - 0.5 * ay @ K @ ay)


def smo_solve(K: np.ndarray, y: np.ndarray, C: float, tol: float = 1e-3, max_iter: int = 100_000):
    """Solve the soft-margin dual with second-order working-set selection.

    Returns ``(alpha, b, n_iter)``. Stops when the maximal KKT violation
    ``max_{I_up} -y G - min_{I_low} -y G`` drops below ``tol``.
    """
    n = len(y)
    alpha = np.zeros(n)
    G = -np.ones(n)  # gradient of 0.5 a^T Q a - e^T a
    diag = np.diag(K)
    it = 0
    while it < max_iter:
        pos = y > 0
        up = (pos & (alpha < C)) | (~pos & (alpha > 0))
        low = (pos & (alpha > 0)) | (~pos & (alpha < C))
        score = -y * G
        if not up.any() or not low.any():
            break
        i = int(np.flatnonzero(up)[np.argmax(score[up])])
        m_up = score[i]
        m_low = score[low].min()
        if m_up - m_low < tol:
            break
        cand = low & (score < m_up)
        bdiff = m_up - score[cand]
        a = diag[i] + diag[cand] - 2.0 * K[i, cand]
        a = np.where(a > 1e-12, a, 1e-12)
        idx = np.flatnonzero(cand)
        j = int(idx[np.argmin(-(bdiff * bdiff) / a)])
        quad = max(diag[i] + diag[j] - 2.0 * K[i, j], 1e-12)
        delta = (m_up - score[j]) / quad
        lim_i = C - alpha[i] if y[i] > 0 else alpha[i]
        lim_j = alpha[j] if y[j] > 0 else C - alpha[j]
        delta = min(delta, lim_i, lim_j)
        old_i, old_j = alpha[i], alpha[j]
        alpha[i] += y[i] * delta
        alpha[j] -= y[j] * delta
        # snap to the box to keep the bound sets exact
        if delta == lim_i:
            alpha[i] = C if y[i] > 0 else 0.0
        if delta == lim_j:
            alpha[j] = 0.0 if y[j] > 0 else C
        di = alpha[i] - old_i
        dj = alpha[j] - old_j
        G += y * (K[:, i] * (y[i] * di) + K[:, j] * (y[j] * dj))
        it += 1
    else:
        log.warning("SMO hit max_iter=%d before reaching tol=%g", max_iter, tol)

    score = -y * G
    free = (alpha > 0) & (alpha < C)
    if free.any():
        b = float(score[free].mean())
    else:
        pos = y > 0
        up = (pos & (alpha < C)) | (~pos & (alpha > 0))
        low = (pos & (alpha > 0)) | (~pos & (alpha < C))
        hi = score[up].max() if up.any() else score.max()
        lo = score[low].min() if low.any() else score.min()
        b = float((hi + lo) / 2)
    return alpha, b, it


def train_rbf_svm(
    X: np.ndarray,
    y: np.ndarray,
    C: float = 1.0,
    gamma: Optional[float] = None,
    features: Optional[Sequence[int]] = None,
    tol: float = 1e-3,
) -> RbfSvmModel:
    """``X`` holds only the selected feature columns; ``features`` records which."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    _check_labels(y)
    if C <= 0:
        raise SvmTrainingError("C must be > 0")
    g = default_gamma(X) if gamma is None else float(gamma)
    K = rbf_kernel(X, X, g)
    alpha, b, it = smo_solve(K, y, C, tol)
    sv = alpha > 0
    return RbfSvmModel(
        X[sv].copy(), (alpha * y)[sv], b, g, C,
        list(features) if features is not None else list(range(X.shape[1])),
        alpha, it,
    )


# -- cascade -----------------------------------------------------------------


@dataclass
class SvmHyperparams:
    linear_C: float = 1.0
    rbf_C: float = 1.0
    gamma: Optional[float] = None  # None -> 1 / (d_sel * Var)
    tau: float = 0.1
    linear_epochs: int = 300
    grid_search: bool = False
    seed: int = 0


@dataclass
class ClinicalPipeline:
    stats: Optional[StandardizerStats] = None
    linear: Optional[LinearSvmModel] = None
    selected: list = field(default_factory=list)
    rbf: Optional[RbfSvmModel] = None

    FORMAT = "mieval-clinical-pipeline"
    VERSION = 1

    def _require(self):
        if self.stats is None or self.rbf is None:
            raise NotFittedError("clinical pipeline is not fitted")

    def decision_function(self, X: np.ndarray) -> np.ndarray:
        self._require()
        Z = apply_standardizer(self.stats, np.atleast_2d(X))
        return self.rbf.decision_function(Z[:, self.selected])

    def predict(self, X: np.ndarray) -> np.ndarray:
        return np.where(self.decision_function(X) >= 0, 1.0, -1.0)

    def to_json(self) -> str:
        self._require()
        doc = {
            "format": self.FORMAT,
            "version": self.VERSION,
            "feature_names": list(FEATURE_NAMES),
            "standardizer": self.stats.to_dict(),
            "linear": {"w": self.linear.w.tolist(), "b": self.linear.b, "C": self.linear.C} if self.linear else None,
            "selected": list(self.selected),
            "rbf": {
                "support_vectors": self.rbf.support_vectors.tolist(),
                "dual_coef": self.rbf.dual_coef.tolist(),
                "b": self.rbf.b,
                "gamma": self.rbf.gamma,
                "C": self.rbf.C,
            },
        }
        return json.dumps(doc, indent=1, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "ClinicalPipeline":
        doc = json.loads(text)
        if doc.get("format") != cls.FORMAT or doc.get("version") != cls.VERSION:
            raise ValueError("not a version-1 clinical pipeline document")
        lin = doc.get("linear")
        linear = LinearSvmModel(np.asarray(lin["w"]), lin["b"], lin["C"]) if lin else None
        r = doc["rbf"]
        sv = np.asarray(r["support_vectors"], dtype=np.float64).reshape(-1, len(doc["selected"]))
        rbf = RbfSvmModel(sv, np.asarray(r["dual_coef"], dtype=np.float64), r["b"], r["gamma"], r["C"], doc["selected"])
        return cls(StandardizerStats.from_dict(doc["standardizer"]), linear, list(doc["selected"]), rbf)


def _fit_cascade(X: np.ndarray, y: np.ndarray, hp: SvmHyperparams, rbf_C: float, gamma_scale: Optional[float]) -> ClinicalPipeline:
    stats = fit_standardizer(X)
    Z = apply_standardizer(stats, X)
    lin = train_linear_svm(Z, y, hp.linear_C, hp.linear_epochs, hp.seed)
    sel = select_features(lin, hp.tau)
    Zs = Z[:, sel]
    gamma = hp.gamma
    if gamma is None:
        gamma = default_gamma(Zs)
    if gamma_scale is not None:
        gamma = gamma * gamma_scale
    rbf = train_rbf_svm(Zs, y, rbf_C, gamma, sel)
    return ClinicalPipeline(stats, lin, sel, rbf)


GRID_C = (0.1, 1.0, 10.0)
GRID_GAMMA_SCALE = (0.01, 0.1, 1.0)


def fit_pipeline(X: np.ndarray, y: np.ndarray, hp: SvmHyperparams = SvmHyperparams()) -> ClinicalPipeline:
    """Standardize, select features with the linear SVM, fit the RBF SVM.

    With ``hp.grid_search`` the RBF ``C`` and a multiplier on the gamma
    heuristic are picked by an inner stratified 3-fold CV on ``X`` alone.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    _check_labels(y)
    if not hp.grid_search:
        return _fit_cascade(X, y, hp, hp.rbf_C, None)
    best = (-1.0, hp.rbf_C, None)
    folds = stratified_folds(y, 3, hp.seed)
    for C in GRID_C:
        for gs in GRID_GAMMA_SCALE:
            accs = []
            for k in range(3):
                te = folds == k
                try:
                    p = _fit_cascade(X[~te], y[~te], hp, C, gs)
                except SvmTrainingError:
                    continue
                accs.append(float((p.predict(X[te]) == y[te]).mean()))
            score = float(np.mean(accs)) if accs else -1.0
            if score > best[0]:
                best = (score, C, gs)
    return _fit_cascade(X, y, hp, best[1], best[2])


def predict_clinical(pipeline: ClinicalPipeline, record) -> tuple[str, float]:
    """Class name and decision value for one record (raw, encoded or vector)."""
    if isinstance(record, RawClinicalRecord):
        record = encode_record(record)
    x = record.features if isinstance(record, ClinicalRecord) else np.asarray(record, dtype=np.float64)
    value = float(pipeline.decision_function(x[None, :])[0])
    return CLASS_NAMES[PATHOLOGICAL if value >= 0 else NORMAL], value


# -- cross-validation --------------------------------------------------------


def stratified_folds(y: np.ndarray, k: int, seed: int) -> np.ndarray:
    """Fold id per sample. Classes are shuffled then dealt round-robin,
    continuing the deal across classes so fold sizes differ by at most one."""
    y = np.asarray(y)
    rng = np.random.default_rng(seed)
    fold = np.empty(len(y), dtype=np.intp)
    pos = 0
    for cls in np.unique(y):
        idx = np.flatnonzero(y == cls)
        idx = idx[rng.permutation(len(idx))]
        fold[idx] = (pos + np.arange(len(idx))) % k
        pos += len(idx)
    return fold


@dataclass
class CrossValResult:
    fold_accuracies: list
    selected_features: list
    n_folds: int
    seed: int
    # fitted pipeline per fold, in fold order
    pipelines: list = field(default_factory=list, repr=False)

    @property
    def mean_accuracy(self) -> float:
        return float(np.mean(self.fold_accuracies))

    def to_csv(self) -> str:
        lines = ["fold,accuracy,selected_features"]
        for i, (a, s) in enumerate(zip(self.fold_accuracies, self.selected_features)):
            names = ";".join(FEATURE_NAMES[j] if j < N_FEATURES else str(j) for j in s)
            lines.append(f"{i},{a!r},{names}")
        lines.append(f"mean,{self.mean_accuracy!r},")
        return "\n".join(lines) + "\n"


def crossval_5fold(X: np.ndarray, y: np.ndarray, hp: SvmHyperparams = SvmHyperparams(), seed: int = 0, k: int = 5) -> CrossValResult:
    """Stratified k-fold CV; every statistic is fit on the training folds only."""
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    _check_labels(y)
    for cls in (-1.0, 1.0):
        if (y == cls).sum() < k:
            raise SvmTrainingError(f"need at least {k} records per class for {k}-fold CV")
    folds = stratified_folds(y, k, seed)
    accs, sels, pipes = [], [], []
    for f in range(k):
        te = folds == f
        pipe = fit_pipeline(X[~te], y[~te], hp)
        accs.append(float((pipe.predict(X[te]) == y[te]).mean()))
        sels.append(list(pipe.selected))
        pipes.append(pipe)
    return CrossValResult(accs, sels, k, seed, pipes)
