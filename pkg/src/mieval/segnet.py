"""Anatomical and pathological encoder-decoder networks.

Both networks share one architecture: per stage two units of
3x3 conv -> ELU -> batch norm -> squeeze-and-excitation, 2x2 max pooling
between encoder stages, 2x2 up-convolution plus skip concatenation in the
decoder, and a 1x1 convolution with channel softmax at the output. Feature
maps start at ``base_features`` and double after every pooling step.
"""

from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np

from mieval.nn import functional as F
from mieval.nn.checkpoint import load_checkpoint, save_checkpoint
from mieval.nn.layers import Conv2d, ConvBlock, Module, UpConv2d
from mieval.nn.optim import Adam, AdamState
from mieval.nn.tensor import Tensor, no_grad
from mieval.volcore import INFARCTION, LV_CAVITY, MYOCARDIUM, NO_REFLOW, LabelMap, Volume

log = logging.getLogger(__name__)

ANATOMICAL = "anatomical"
PATHOLOGICAL = "pathological"

ANATOMICAL_CLASSES = ("background", "lv_cavity", "myocardium")
PATHOLOGICAL_CLASSES = ("background", "normal_myocardium", "infarction", "no_reflow")

# pathological network class indices
P_NORMAL, P_INFARCT, P_NOREFLOW = 1, 2, 3


class SpecError(ValueError):
    pass


class TrainConfigError(ValueError):
    pass


@dataclass(frozen=True)
class UNetSpec:
    in_channels: int = 1
    base_features: int = 32
    depth: int = 4
    num_classes: int = 3
    input_size: int = 256
    units_per_stage: int = 2
    se_ratio: int = 16

    def __post_init__(self):
        if self.depth < 1:
            raise SpecError("depth must be >= 1")
        if self.num_classes < 2:
            raise SpecError("num_classes must be >= 2")
        if self.input_size % (2**self.depth):
            raise SpecError(f"input_size {self.input_size} is not divisible by 2**depth = {2**self.depth}")
        if self.base_features < 1 or self.in_channels < 1 or self.units_per_stage < 1:
            raise SpecError("channel counts and units_per_stage must be positive")

    def features(self) -> list[int]:
        """Channel width per level, encoder stages then bottleneck."""
        return [self.base_features * 2**i for i in range(self.depth + 1)]


@dataclass(frozen=True)
class TrainConfig:
    max_epochs: int = 500
    lr: float = 1e-3
    early_stop_patience: int = 200
    batch_size: int = 8
    seed: int = 0
    include_background_in_dice: bool = True

    def __post_init__(self):
        if self.max_epochs < 1:
            raise TrainConfigError("max_epochs must be >= 1")
        if not 0 <= self.early_stop_patience <= self.max_epochs:
            raise TrainConfigError("early_stop_patience must lie in [0, max_epochs]")
        if self.batch_size < 1:
            raise TrainConfigError("batch_size must be >= 1")
        if not self.lr > 0:
            raise TrainConfigError("lr must be > 0")


class UNet(Module):
    def __init__(self, spec: UNetSpec, rng: np.random.Generator, dtype=np.float32):
        super().__init__()
        self.spec = spec
        feats = spec.features()
        kw = dict(n_units=spec.units_per_stage, dtype=dtype, se_ratio=spec.se_ratio)
        self.down = []
        cin = spec.in_channels
        for i in range(spec.depth):
            self.down.append(self.add_child(f"down{i}", ConvBlock(cin, feats[i], rng, **kw)))
            cin = feats[i]
        self.bottom = self.add_child("bottom", ConvBlock(cin, feats[-1], rng, **kw))
        self.ups = []
        self.up_blocks = []
        for i in reversed(range(spec.depth)):
            self.ups.append(self.add_child(f"upconv{i}", UpConv2d(feats[i + 1], feats[i], rng, dtype)))
            self.up_blocks.append(self.add_child(f"up{i}", ConvBlock(2 * feats[i], feats[i], rng, **kw)))
        self.head = self.add_child("head", Conv2d(feats[0], spec.num_classes, 1, rng, dtype))

    def logits(self, x: Tensor) -> Tensor:
        skips = []
        for block in self.down:
            x = block(x)
            skips.append(x)
            x = F.maxpool2(x)
        x = self.bottom(x)
        for up, block, skip in zip(self.ups, self.up_blocks, reversed(skips)):
            x = block(F.concat_channels(skip, up(x)))
        return self.head(x)

    def forward(self, x: Tensor) -> Tensor:
        return F.softmax_channels(self.logits(x))


@dataclass
class SegModel:
    role: str
    spec: UNetSpec
    net: UNet
    classes: tuple
    seed: int = 0
    dtype: str = "float32"

    def num_parameters(self) -> int:
        return self.net.num_parameters()


def role_classes(role: str) -> tuple:
    if role == ANATOMICAL:
        return ANATOMICAL_CLASSES
    if role == PATHOLOGICAL:
        return PATHOLOGICAL_CLASSES
    raise SpecError(f"unknown role {role!r}")


def build_unet(spec: UNetSpec, seed: int, role: str = ANATOMICAL, dtype=np.float32) -> SegModel:
    classes = role_classes(role)
    if spec.num_classes != len(classes):
        raise SpecError(f"{role} network needs {len(classes)} classes, spec has {spec.num_classes}")
    net = UNet(spec, np.random.default_rng(seed), dtype)
    return SegModel(role, spec, net, classes, seed, np.dtype(dtype).name)


def default_spec(role: str, **overrides) -> UNetSpec:
    return UNetSpec(num_classes=len(role_classes(role)), **overrides)


# -- targets -----------------------------------------------------------------


def anatomical_targets(labels: np.ndarray) -> np.ndarray:
    """5-code labels -> {0 background, 1 LV cavity, 2 myocardium incl. pathology}."""
    out = np.zeros_like(labels, dtype=np.uint8)
    out[labels == LV_CAVITY] = 1
    out[np.isin(labels, (MYOCARDIUM, INFARCTION, NO_REFLOW))] = 2
    return out


def pathological_targets(labels: np.ndarray) -> np.ndarray:
    """5-code labels -> {0 background (incl. LV), 1 normal myo, 2 infarct, 3 no-reflow}."""
    out = np.zeros_like(labels, dtype=np.uint8)
    out[labels == MYOCARDIUM] = P_NORMAL
    out[labels == INFARCTION] = P_INFARCT
    out[labels == NO_REFLOW] = P_NOREFLOW
    return out


def targets_for(role: str, labels: np.ndarray) -> np.ndarray:
    return anatomical_targets(labels) if role == ANATOMICAL else pathological_targets(labels)


# -- training ----------------------------------------------------------------


@dataclass
class TrainResult:
    model: SegModel
    history: list = field(default_factory=list)
    best_epoch: int = 0
    best_val_loss: float = float("inf")
    stopped_early: bool = False
    optimizer: Optional[AdamState] = None

    def history_csv(self) -> str:
        lines = ["epoch,train_loss,val_loss"]
        lines += [f"{h['epoch']},{h['train_loss']:.9g},{h['val_loss']:.9g}" for h in self.history]
        return "\n".join(lines) + "\n"


def _stack_slices(role: str, cases: Sequence, dtype) -> tuple[np.ndarray, np.ndarray]:
    xs, ys = [], []
    for vol, lm in cases:
        if vol.shape != lm.shape:
            raise TrainConfigError(f"case {vol.case_id}: image {vol.shape} vs labels {lm.shape}")
        xs.append(vol.data)
        ys.append(targets_for(role, lm.labels))
    x = np.concatenate(xs, axis=0)[:, None].astype(dtype)
    y = np.concatenate(ys, axis=0)
    return x, y


def _check_size(model: SegModel, x: np.ndarray):
    size = model.spec.input_size
    if x.shape[-2:] != (size, size):
        raise SpecError(f"network expects {size}x{size} slices, got {x.shape[-2:]}; resize first")


def evaluate_loss(model: SegModel, x: np.ndarray, y: np.ndarray, batch_size: int, include_background: bool = True) -> float:
    net = model.net
    net.eval()
    total, count = 0.0, 0
    with no_grad():
        for start in range(0, len(x), batch_size):
            xb = x[start : start + batch_size]
            yb = F.one_hot(y[start : start + batch_size], model.spec.num_classes, xb.dtype)
            loss = F.combined_loss(net(Tensor(xb)), yb, include_background)
            total += float(loss.data) * len(xb)
            count += len(xb)
    return total / count


def train(model: SegModel, train_cases: Sequence, val_cases: Sequence, cfg: TrainConfig = TrainConfig()) -> TrainResult:
    """Train with Adam on the mean of Dice and cross-entropy losses.

    ``train_cases`` / ``val_cases`` are ``(Volume, LabelMap)`` pairs already
    preprocessed to the network input size, labels in the 5-code space. Keeps
    the parameters of the epoch with the lowest validation loss and stops once
    the validation loss has not improved for ``early_stop_patience`` epochs.
    """
    if not train_cases:
        raise TrainConfigError("empty training set")
    if not val_cases:
        raise TrainConfigError("empty validation set")
    dtype = np.dtype(model.dtype)
    x_tr, y_tr = _stack_slices(model.role, train_cases, dtype)
    x_va, y_va = _stack_slices(model.role, val_cases, dtype)
    _check_size(model, x_tr)
    _check_size(model, x_va)
    k = model.spec.num_classes
    net = model.net
    opt = Adam(net.parameters(), lr=cfg.lr)
    rng = np.random.default_rng(cfg.seed)
    incl_bg = cfg.include_background_in_dice

    result = TrainResult(model)
    best_state = net.state_dict()
    wait = 0
    for epoch in range(1, cfg.max_epochs + 1):
        net.train()
        order = rng.permutation(len(x_tr))
        running, seen = 0.0, 0
        for start in range(0, len(order), cfg.batch_size):
            idx = order[start : start + cfg.batch_size]
            xb = x_tr[idx]
            yb = F.one_hot(y_tr[idx], k, dtype)
            opt.zero_grad()
            loss = F.combined_loss(net(Tensor(xb)), yb, incl_bg)
            loss.backward()
            opt.step()
            lval = float(loss.data)
            if not np.isfinite(lval):
                raise FloatingPointError(f"non-finite training loss at epoch {epoch}")
            running += lval * len(idx)
            seen += len(idx)
        val_loss = evaluate_loss(model, x_va, y_va, cfg.batch_size, incl_bg)
        result.history.append({"epoch": epoch, "train_loss": running / seen, "val_loss": val_loss})
        if val_loss < result.best_val_loss:
            result.best_val_loss = val_loss
            result.best_epoch = epoch
            best_state = net.state_dict()
            wait = 0
        else:
            wait += 1
            if wait >= cfg.early_stop_patience:
                result.stopped_early = True
                log.info("early stop at epoch %d (best %d)", epoch, result.best_epoch)
                break
    net.load_state_dict(best_state)
    net.eval()
    result.optimizer = opt.state
    return result


# -- inference ---------------------------------------------------------------


def predict_slices(model: SegModel, x: np.ndarray, batch_size: int = 8) -> np.ndarray:
    """(S, H, W) preprocessed slices -> (S, H, W) class indices."""
    x = np.asarray(x, dtype=model.dtype)[:, None]
    _check_size(model, x)
    net = model.net
    net.eval()
    out = []
    with no_grad():
        for start in range(0, len(x), batch_size):
            probs = net(Tensor(x[start : start + batch_size])).data
            out.append(probs.argmax(axis=1).astype(np.uint8))  # first max wins ties
    return np.concatenate(out, axis=0)


def predict_case(model: SegModel, v: Volume, batch_size: int = 8) -> LabelMap:
    return LabelMap(predict_slices(model, v.data, batch_size), v.spacing, v.case_id)


def refine_and_merge(anat: LabelMap, path: LabelMap) -> LabelMap:
    """Mask pathology by the anatomical myocardium and merge into the 5-code space.

    Outside the anatomical myocardium the anatomical label is kept. Inside it,
    infarction and no-reflow from the pathological network become 3 and 4,
    anything else becomes myocardium (2).
    """
    if anat.shape != path.shape:
        raise ValueError(f"shape mismatch: anatomical {anat.shape} vs pathological {path.shape}")
    a = anat.labels
    p = path.labels
    out = a.copy()
    myo = a == MYOCARDIUM
    out[myo & (p == P_INFARCT)] = INFARCTION
    out[myo & (p == P_NOREFLOW)] = NO_REFLOW
    return LabelMap(out, anat.spacing, anat.case_id)


# -- checkpoints -------------------------------------------------------------


def save_model(model: SegModel, path, optimizer: Optional[AdamState] = None, extra_meta: Optional[dict] = None) -> None:
    tensors = dict(model.net.state_dict())
    meta = {
        "kind": "segmodel",
        "role": model.role,
        "spec": asdict(model.spec),
        "classes": list(model.classes),
        "seed": model.seed,
        "dtype": model.dtype,
    }
    if optimizer is not None and optimizer.m:
        names = [n for n, _ in model.net.named_parameters()]
        for n, m, v in zip(names, optimizer.m, optimizer.v):
            tensors[f"adam.m.{n}"] = m
            tensors[f"adam.v.{n}"] = v
        meta["adam"] = {k: getattr(optimizer, k) for k in ("lr", "beta1", "beta2", "eps", "t")}
    if extra_meta:
        meta.update(extra_meta)
    save_checkpoint(path, tensors, meta)


def load_model(path) -> tuple[SegModel, Optional[AdamState], dict]:
    tensors, meta = load_checkpoint(path)
    if meta.get("kind") != "segmodel":
        raise ValueError(f"{path} is not a segmentation model checkpoint")
    spec = UNetSpec(**meta["spec"])
    model = build_unet(spec, meta.get("seed", 0), meta["role"], np.dtype(meta.get("dtype", "float32")))
    model.net.load_state_dict(tensors)
    model.net.eval()
    opt = None
    if "adam" in meta:
        a = meta["adam"]
        names = [n for n, _ in model.net.named_parameters()]
        opt = AdamState(a["lr"], a["beta1"], a["beta2"], a["eps"], a["t"])
        opt.m = [tensors[f"adam.m.{n}"] for n in names]
        opt.v = [tensors[f"adam.v.{n}"] for n in names]
    return model, opt, meta
