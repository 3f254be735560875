"""Run configuration: one JSON document, every field optional.

Defaults are the full-scale settings (256x256 input, 32 base features,
Adam at 1e-3, 500 epochs, patience 200, 5 folds, two-slice rule).
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Optional

from mieval.clinfeat import SvmHyperparams
from mieval.dataio import DatasetLayout
from mieval.imgclassify import SliceRuleConfig
from mieval.preproc import PreprocConfig
from mieval.segnet import ANATOMICAL, PATHOLOGICAL, TrainConfig, UNetSpec, role_classes


class ConfigError(ValueError):
    def __init__(self, path: str, msg: str):
        super().__init__(f"{path}: {msg}" if path else msg)
        self.path = path


@dataclass
class DatasetConfig:
    root: Optional[str] = None
    layout: DatasetLayout = field(default_factory=DatasetLayout)
    clinical_csv: Optional[str] = None


@dataclass
class SplitConfig:
    # n_val = 0 trains and validates on the same cases (smoke runs)
    n_val: int = 15
    val_pathological: int = 10
    val_normal: int = 5


@dataclass
class NetConfig:
    base_features: int = 32
    depth: int = 4
    units_per_stage: int = 2
    se_ratio: int = 16


@dataclass
class RunConfig:
    seed: int = 0
    output_dir: str = "runs/default"
    dataset: DatasetConfig = field(default_factory=DatasetConfig)
    split: SplitConfig = field(default_factory=SplitConfig)
    preproc: PreprocConfig = field(default_factory=PreprocConfig)
    anatomical: NetConfig = field(default_factory=NetConfig)
    pathological: NetConfig = field(default_factory=NetConfig)
    train: dict = field(default_factory=dict)
    svm: dict = field(default_factory=dict)
    slice_rule: SliceRuleConfig = field(default_factory=SliceRuleConfig)
    folds: int = 5
    checkpoints: dict = field(default_factory=dict)

    # -- derived objects --

    def out(self) -> Path:
        return Path(self.output_dir)

    def unet_spec(self, role: str) -> UNetSpec:
        net = self.anatomical if role == ANATOMICAL else self.pathological
        if self.preproc.target_h != self.preproc.target_w:
            raise ConfigError("preproc", "networks need a square input (target_h == target_w)")
        try:
            return UNetSpec(
                base_features=net.base_features,
                depth=net.depth,
                num_classes=len(role_classes(role)),
                input_size=self.preproc.target_h,
                units_per_stage=net.units_per_stage,
                se_ratio=net.se_ratio,
            )
        except ValueError as exc:
            raise ConfigError(role, str(exc)) from exc

    def train_config(self) -> TrainConfig:
        try:
            return TrainConfig(seed=self.seed, **self.train)
        except (TypeError, ValueError) as exc:
            raise ConfigError("train", str(exc)) from exc

    def svm_params(self) -> SvmHyperparams:
        try:
            return SvmHyperparams(seed=self.seed, **self.svm)
        except TypeError as exc:
            raise ConfigError("svm", str(exc)) from exc

    def checkpoint_path(self, name: str) -> Path:
        defaults = {
            ANATOMICAL: "anatomical.ckpt",
            PATHOLOGICAL: "pathological.ckpt",
            "clinical": "clinical_pipeline.json",
        }
        p = self.checkpoints.get(name)
        return Path(p) if p else self.out() / defaults[name]

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def sha256(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, default=str).encode("utf-8")
        return hashlib.sha256(blob).hexdigest()


_SECTIONS = {
    "dataset": DatasetConfig,
    "split": SplitConfig,
    "preproc": PreprocConfig,
    "anatomical": NetConfig,
    "pathological": NetConfig,
    "slice_rule": SliceRuleConfig,
}


def _build(cls, data: Any, path: str):
    if not isinstance(data, dict):
        raise ConfigError(path, f"expected an object, got {type(data).__name__}")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = set(data) - set(names)
    if unknown:
        raise ConfigError(f"{path}.{sorted(unknown)[0]}" if path else sorted(unknown)[0], "unknown field")
    kwargs = {}
    for key, value in data.items():
        fpath = f"{path}.{key}" if path else key
        if cls is DatasetConfig and key == "layout":
            value = _build(DatasetLayout, value, fpath)
        elif cls is RunConfig and key in _SECTIONS:
            value = _build(_SECTIONS[key], value, fpath)
        elif cls is RunConfig and key in ("train", "svm", "checkpoints") and not isinstance(value, dict):
            raise ConfigError(fpath, "expected an object")
        kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(path, str(exc)) from exc


def config_from_dict(data: dict) -> RunConfig:
    cfg = _build(RunConfig, data, "")
    for key, cls in (("train", TrainConfig), ("svm", SvmHyperparams)):
        allowed = {f.name for f in dataclasses.fields(cls)} - {"seed"}
        bad = set(getattr(cfg, key)) - allowed
        if bad:
            raise ConfigError(f"{key}.{sorted(bad)[0]}", "unknown field")
    if not isinstance(cfg.seed, int):
        raise ConfigError("seed", "must be an integer")
    if cfg.folds < 2:
        raise ConfigError("folds", "must be >= 2")
    # surface spec/train errors at load time
    cfg.unet_spec(ANATOMICAL)
    cfg.unet_spec(PATHOLOGICAL)
    cfg.train_config()
    return cfg


def load_config(path) -> RunConfig:
    path = Path(path)
    try:
        data = json.loads(path.read_text(encoding="utf-8"))
    except FileNotFoundError as exc:
        raise ConfigError("--config", f"file {path} not found") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError("--config", f"invalid JSON: {exc}") from exc
    return config_from_dict(data)


def require_dataset_root(cfg: RunConfig) -> Path:
    if not cfg.dataset.root:
        raise ConfigError("dataset.root", "not set")
    root = Path(cfg.dataset.root)
    if not root.is_dir():
        raise ConfigError("dataset.root", f"directory {root} does not exist")
    return root
