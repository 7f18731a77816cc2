"""Optimisation, augmentation, metrics and the train/eval loops."""
from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from typing import Callable, Iterable, Sequence

import numpy as np

from .autodiff import Tape, Tensor
from .lattice import PointCloud
from .network import Hierarchy, LatticeNet, LayerSpec, loss as model_loss

logger = logging.getLogger(__name__)


class NonFiniteGradientError(FloatingPointError):
    pass


# --------------------------------------------------------------------------- optimiser


@dataclass
class OptimState:
    lr: float = 1e-3
    weight_decay: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    decoupled: bool = False
    step: int = 0
    exp_avg: dict[str, np.ndarray] = field(default_factory=dict)
    exp_avg_sq: dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(params: dict[str, Tensor], state: OptimState, strict: bool = False) -> None:
    """One Adam update in place.

    Weight decay is added to the gradient (``decoupled=False``) or applied
    directly to the parameters scaled by the learning rate (``decoupled=True``).
    Parameters without a gradient are left untouched.
    """
    if strict:
        for name, p in params.items():
            if p.grad is not None and not np.all(np.isfinite(p.grad)):
                raise NonFiniteGradientError(f"non-finite gradient for {name}")
    state.step += 1
    b1, b2 = state.betas
    t = state.step
    c1 = 1 - b1**t
    c2 = 1 - b2**t
    for name, p in params.items():
        if p.grad is None:
            continue
        g = p.grad.astype(np.float64)
        w = p.data.astype(np.float64)
        if state.weight_decay and not state.decoupled:
            g = g + state.weight_decay * w
        m = state.exp_avg.get(name)
        v = state.exp_avg_sq.get(name)
        if m is None:
            m = np.zeros_like(g)
            v = np.zeros_like(g)
        if m.shape != g.shape:
            raise ValueError(f"optimizer state for {name} has shape {m.shape}, gradient {g.shape}")
        m = b1 * m + (1 - b1) * g
        v = b2 * v + (1 - b2) * g * g
        state.exp_avg[name] = m
        state.exp_avg_sq[name] = v
        update = state.lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
        if state.weight_decay and state.decoupled:
            w = w - state.lr * state.weight_decay * w
        p.data = (w - update).astype(p.data.dtype)


@dataclass
class PlateauScheduler:
    """Divide the learning rate by ``factor`` once the loss stops improving.

    An epoch improves when ``loss < best * (1 - threshold)``.  After more than
    ``patience`` consecutive epochs without improvement the rate is reduced and
    the counter restarts.  The rate always equals ``initial_lr * factor**-k``
    unless clamped at ``min_lr``.
    """

    initial_lr: float = 1e-3
    patience: int = 10
    threshold: float = 1e-3
    factor: float = 10.0
    min_lr: float = 1e-6
    best: float = math.inf
    bad_epochs: int = 0
    reductions: int = 0

    @property
    def lr(self) -> float:
        return max(self.initial_lr / self.factor**self.reductions, self.min_lr)

    def step(self, loss: float) -> float:
        if loss < self.best * (1 - self.threshold):
            self.best = loss
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs > self.patience:
                if self.initial_lr / self.factor**self.reductions > self.min_lr:
                    self.reductions += 1
                self.bad_epochs = 0
        return self.lr


def plateau_schedule(losses: Iterable[float], initial_lr: float = 1e-3, **kwargs) -> list[float]:
    """Learning rate after each loss of ``losses``."""
    sched = PlateauScheduler(initial_lr=initial_lr, **kwargs)
    return [sched.step(float(x)) for x in losses]


# --------------------------------------------------------------------------- augmentation


@dataclass
class AugmentConfig:
    mirror: bool = True
    mirror_axes: tuple[int, ...] = (0, 1)
    translation: float = 0.0
    color_jitter: float = 0.0


COLOR_CHANNELS = ("r", "g", "b")
NORMAL_CHANNELS = ("nx", "ny", "nz")


def mirror_cloud(cloud: PointCloud, axes: Sequence[int]) -> PointCloud:
    """Reflect positions (and normals) across the given coordinate planes."""
    pos = cloud.positions.copy()
    feats = cloud.features.copy()
    for axis in axes:
        pos[:, axis] = -pos[:, axis]
        name = NORMAL_CHANNELS[axis] if axis < 3 else None
        if name in cloud.channels:
            col = cloud.channels.index(name)
            feats[:, col] = -feats[:, col]
    return cloud.replace(positions=pos, features=feats)


def augment(cloud: PointCloud, rng: np.random.Generator, config: AugmentConfig | None = None) -> PointCloud:
    """Random per-axis mirroring, a uniform translation and additive colour jitter."""
    config = config or AugmentConfig()
    axes = []
    if config.mirror:
        for axis in config.mirror_axes:
            if axis < cloud.dim and rng.random() < 0.5:
                axes.append(axis)
    out = mirror_cloud(cloud, axes) if axes else cloud
    if config.translation > 0:
        shift = rng.uniform(-config.translation, config.translation, size=cloud.dim)
        out = out.replace(positions=out.positions + shift)
    if config.color_jitter > 0:
        cols = [out.channels.index(c) for c in COLOR_CHANNELS if c in out.channels]
        if cols:
            feats = out.features.copy()
            noise = rng.normal(0.0, config.color_jitter, size=(feats.shape[0], len(cols)))
            feats[:, cols] = np.clip(feats[:, cols] + noise, 0.0, 1.0)
            out = out.replace(features=feats)
    return out


# --------------------------------------------------------------------------- metrics


@dataclass
class Metrics:
    confusion: np.ndarray

    @classmethod
    def empty(cls, num_classes: int) -> "Metrics":
        return cls(np.zeros((num_classes, num_classes), dtype=np.int64))

    def update(self, pred, gt, ignore_index: int = -1) -> "Metrics":
        pred = np.asarray(pred, dtype=np.int64)
        gt = np.asarray(gt, dtype=np.int64)
        if pred.shape != gt.shape:
            raise ValueError(f"prediction shape {pred.shape} != label shape {gt.shape}")
        keep = gt != ignore_index
        K = self.confusion.shape[0]
        pred, gt = pred[keep], gt[keep]
        if np.any((gt < 0) | (gt >= K) | (pred < 0) | (pred >= K)):
            raise ValueError(f"labels or predictions outside [0, {K})")
        self.confusion += np.bincount(gt * K + pred, minlength=K * K).reshape(K, K)
        return self

    @property
    def num_classes(self) -> int:
        return self.confusion.shape[0]

    @property
    def iou(self) -> np.ndarray:
        """Per-class IoU with NaN for classes absent from both prediction and truth."""
        tp = np.diag(self.confusion).astype(np.float64)
        union = self.confusion.sum(axis=0) + self.confusion.sum(axis=1) - tp
        with np.errstate(invalid="ignore", divide="ignore"):
            return np.where(union > 0, tp / union, np.nan)

    @property
    def miou(self) -> float:
        iou = self.iou
        present = ~np.isnan(iou)
        return float(iou[present].mean()) if present.any() else 0.0

    @property
    def accuracy(self) -> float:
        total = self.confusion.sum()
        return float(np.trace(self.confusion) / total) if total else 0.0


def compute_metrics(pred, gt, num_classes: int, ignore_index: int = -1) -> Metrics:
    return Metrics.empty(num_classes).update(pred, gt, ignore_index)


def evaluate(model: LatticeNet, dataset: Sequence[PointCloud], ignore_index: int = -1) -> Metrics:
    """Confusion over every point of every labelled cloud."""
    if not dataset:
        raise ValueError("evaluation dataset is empty")
    metrics = Metrics.empty(model.spec.num_classes)
    for cloud in dataset:
        if cloud.labels is None:
            raise ValueError("evaluation clouds must carry labels")
        metrics.update(model.predict(cloud), cloud.labels, ignore_index)
    return metrics


# --------------------------------------------------------------------------- loop


@dataclass
class TrainConfig:
    epochs: int = 200
    lr: float = 1e-3
    weight_decay: float = 1e-4
    decoupled_weight_decay: bool = False
    patience: int = 10
    threshold: float = 1e-3
    min_lr: float = 1e-6
    seed: int = 0
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    stop_miou: float | None = None
    ignore_index: int = -1
    strict: bool = True

    @classmethod
    def from_dict(cls, data: dict) -> "TrainConfig":
        data = dict(data)
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown training keys: {sorted(unknown)}")
        aug = data.pop("augment", None)
        cfg = cls(**data)
        if aug is not None:
            if isinstance(aug, dict):
                aug = dict(aug)
                if "mirror_axes" in aug:
                    aug["mirror_axes"] = tuple(aug["mirror_axes"])
                aug = AugmentConfig(**aug)
            cfg.augment = aug
        return cfg

    def to_dict(self) -> dict:
        out = asdict(self)
        out["augment"]["mirror_axes"] = list(self.augment.mirror_axes)
        return out


@dataclass
class TrainResult:
    model: LatticeNet
    best_state: dict[str, np.ndarray]
    best_miou: float
    history: list[dict]


def epoch_record(epoch: int, lr: float, train_loss: float, metrics: Metrics | None) -> dict:
    rec = {"epoch": epoch, "lr": lr, "train_loss": round(float(train_loss), 8)}
    if metrics is not None:
        rec["val_miou"] = round(metrics.miou, 8)
        rec["val_iou"] = [None if np.isnan(x) else round(float(x), 8) for x in metrics.iou]
    return rec


def format_record(rec: dict) -> str:
    return json.dumps(rec, sort_keys=False, separators=(",", ":"))


def train_step(model: LatticeNet, cloud: PointCloud, state: OptimState, config: TrainConfig, hierarchy: Hierarchy | None = None) -> float:
    """Forward, backward and one optimiser update on a single cloud; returns the loss."""
    model.zero_grad()
    with Tape() as tape:
        res = model.forward(cloud, hierarchy)
        value = model_loss(
            res.logits,
            cloud.labels,
            res.offsets,
            model.spec.regularizer_weight,
            ignore_index=config.ignore_index,
        )
    tape.backward(value)
    adam_step(model.params, state, strict=config.strict)
    return value.item()


def fit(
    model: LatticeNet,
    train_set: Sequence[PointCloud],
    val_set: Sequence[PointCloud] = (),
    config: TrainConfig | None = None,
    on_epoch: Callable[[dict], None] | None = None,
) -> TrainResult:
    """Train one cloud per step, tracking the best validation mIoU.

    Deterministic for a fixed seed: the shuffle and augmentation of each epoch
    draw from a generator seeded by ``(seed, epoch)``.
    """
    config = config or TrainConfig()
    if not train_set:
        raise ValueError("training set is empty")
    for cloud in train_set:
        if cloud.labels is None:
            raise ValueError("training clouds must carry labels")
    state = OptimState(
        lr=config.lr,
        weight_decay=config.weight_decay,
        decoupled=config.decoupled_weight_decay,
    )
    sched = PlateauScheduler(
        initial_lr=config.lr,
        patience=config.patience,
        threshold=config.threshold,
        min_lr=config.min_lr,
    )
    best_state = {k: v.copy() for k, v in model.state_dict().items()}
    best_miou = -1.0
    history: list[dict] = []
    for epoch in range(config.epochs):
        rng = np.random.default_rng([config.seed, epoch])
        order = rng.permutation(len(train_set))
        losses = []
        for i in order:
            cloud = augment(train_set[i], rng, config.augment)
            losses.append(train_step(model, cloud, state, config))
        train_loss = float(np.mean(losses))
        metrics = evaluate(model, val_set, config.ignore_index) if val_set else None
        rec = epoch_record(epoch, state.lr, train_loss, metrics)
        history.append(rec)
        logger.info(format_record(rec))
        if on_epoch is not None:
            on_epoch(rec)
        score = metrics.miou if metrics is not None else -train_loss
        if score > best_miou:
            best_miou = score
            best_state = {k: v.copy() for k, v in model.state_dict().items()}
        state.lr = sched.step(train_loss)
        if config.stop_miou is not None and metrics is not None and metrics.miou >= config.stop_miou:
            break
    return TrainResult(model, best_state, best_miou, history)
