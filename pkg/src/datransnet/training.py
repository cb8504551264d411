"""SoftIoU loss, Adam, the step learning-rate schedule and the epoch loop."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import tensor as T
from .layers import Module, Parameter
from .metrics import evaluate
from .network import ConfigError, predict, save_checkpoint
from .tensor import DimensionError, Tensor

logger = logging.getLogger(__name__)

LOG_HEADER = ("epoch", "loss", "lr", "miou", "f1", "pd", "fa")


class TrainingDiverged(FloatingPointError):
    """The loss or a gradient stopped being finite."""


@dataclass(frozen=True)
class TrainConfig:
    lr0: float = 5e-4
    drop1_epoch: int = 200
    drop1_lr: float = 5e-5
    drop2_epoch: int = 300
    drop2_lr: float = 5e-6
    epochs: int = 400
    batch_size: int = 4
    seed: int = 0
    threshold: float = 0.5
    match_radius: float = 3.0

    def __post_init__(self) -> None:
        if self.epochs < 1:
            raise ConfigError("epochs", f"must be >= 1, got {self.epochs}")
        if self.batch_size < 1:
            raise ConfigError("batch_size", f"must be >= 1, got {self.batch_size}")
        for name in ("lr0", "drop1_lr", "drop2_lr"):
            if not getattr(self, name) > 0:
                raise ConfigError(name, "learning rates must be positive")
        if not 0 < self.drop1_epoch < self.drop2_epoch:
            raise ConfigError("drop2_epoch", "drop epochs must be positive and ascending")
        if not 0.0 < self.threshold < 1.0:
            raise ConfigError("threshold", f"must lie in (0, 1), got {self.threshold}")


def lr_at(config: TrainConfig, epoch: int) -> float:
    """Piecewise-constant schedule. Drop epochs at or beyond ``epochs`` simply never trigger."""
    if not 0 <= epoch < config.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {config.epochs})")
    if epoch < config.drop1_epoch:
        return config.lr0
    if epoch < config.drop2_epoch:
        return config.drop1_lr
    return config.drop2_lr


def soft_iou_loss(p: Tensor, g, eps: float = 1e-6) -> Tensor:
    """``1 - (sum(p*g) + eps) / (sum(p) + sum(g) - sum(p*g) + eps)``, summed over every element.

    A batch is pooled into one intersection and one union. The ``eps`` in
    both numerator and denominator makes an empty prediction of an empty
    mask score 0 and still pushes ``p`` down on target-free images.
    """
    if not isinstance(g, Tensor):
        g = Tensor(g)
    if p.shape != g.shape:
        raise DimensionError(f"soft_iou_loss: prediction {p.shape} vs mask {g.shape}")
    inter = T.sum_(p * g)
    union = T.sum_(p) + T.sum_(g) - inter
    return 1.0 - (inter + eps) / (union + eps)


@dataclass
class AdamState:
    params: list[Parameter]
    names: list[str]
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: list[np.ndarray] = field(default_factory=list)
    v: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def for_module(cls, module: Module) -> "AdamState":
        named = list(module.named_parameters())
        return cls([p for _, p in named], [n for n, _ in named])

    def __post_init__(self) -> None:
        if not self.m:
            self.m = [np.zeros(p.shape) for p in self.params]
            self.v = [np.zeros(p.shape) for p in self.params]


def adam_step(state: AdamState, lr: float) -> None:
    """Bias-corrected Adam update using each parameter's accumulated ``grad``.

    A parameter without a gradient is treated as having gradient zero.
    """
    grads = []
    for name, p in zip(state.names, state.params):
        g = np.zeros(p.shape) if p.grad is None else p.grad
        if not np.all(np.isfinite(g)):
            raise TrainingDiverged(f"non-finite gradient in parameter {name}")
        grads.append(g)
    state.t += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1.0 - b1**state.t
    c2 = 1.0 - b2**state.t
    for p, g, m, v in zip(state.params, grads, state.m, state.v):
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        p.data -= lr * (m / c1) / (np.sqrt(v / c2) + state.eps)


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    lr: float
    miou: float
    f1: float
    pd: float
    fa: float  # false alarms per 10^6 pixels

    def row(self) -> list[str]:
        return [str(self.epoch)] + [repr(float(x)) for x in (self.loss, self.lr, self.miou, self.f1, self.pd, self.fa)]


@dataclass
class FitResult:
    log: list[EpochRecord]
    best_epoch: int
    best_miou: float


def _stack(samples, idx) -> tuple[np.ndarray, np.ndarray]:
    return (
        np.stack([samples[i].image for i in idx]),
        np.stack([samples[i].mask for i in idx]),
    )


def fit(
    net: Module,
    train_set: Sequence,
    val_set: Sequence,
    config: TrainConfig,
    out_dir: Optional[Path] = None,
    stop_at_miou: Optional[float] = None,
    on_epoch: Optional[Callable[[EpochRecord], None]] = None,
) -> FitResult:
    """Train with SoftIoU + Adam, validating after every epoch.

    With ``out_dir`` set, writes ``train_log.csv``, ``best.datn`` (highest
    validation mIoU, earliest epoch on ties) and ``final.datn``.
    ``stop_at_miou`` ends training after the first epoch reaching that
    validation mIoU.
    """
    if not train_set or not val_set:
        raise ValueError("fit needs non-empty training and validation sets")
    rng = np.random.default_rng(config.seed)
    state = AdamState.for_module(net)
    log: list[EpochRecord] = []
    best_epoch, best_miou = -1, -math.inf
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
    val_images = np.stack([s.image for s in val_set])
    val_masks = np.stack([s.mask for s in val_set])

    for epoch in range(config.epochs):
        lr = lr_at(config, epoch)
        order = rng.permutation(len(train_set))
        losses = []
        for start in range(0, len(order), config.batch_size):
            images, masks = _stack(train_set, order[start : start + config.batch_size])
            net.zero_grad()
            loss = soft_iou_loss(net(Tensor(images)), masks)
            value = loss.item()
            if not math.isfinite(value):
                raise TrainingDiverged(f"loss became {value} at epoch {epoch}")
            loss.backward()
            adam_step(state, lr)
            losses.append(value)
        probs = predict(net, val_images, config.batch_size)
        summary = evaluate(probs, val_masks, config.threshold, config.match_radius)
        rec = EpochRecord(
            epoch, float(np.mean(losses)), lr, summary.miou, summary.f1, summary.pd, summary.fa * 1e6
        )
        log.append(rec)
        logger.info(
            "epoch %d loss %.4f lr %.1e miou %.4f f1 %.4f pd %.4f fa %.2f",
            epoch, rec.loss, lr, rec.miou, rec.f1, rec.pd, rec.fa,
        )
        if rec.miou > best_miou:
            best_epoch, best_miou = epoch, rec.miou
            if out_dir is not None:
                save_checkpoint(net, out_dir / "best.datn")
        if out_dir is not None:
            write_log(log, out_dir / "train_log.csv")
        if on_epoch is not None:
            on_epoch(rec)
        if stop_at_miou is not None and rec.miou >= stop_at_miou:
            break
    if out_dir is not None:
        save_checkpoint(net, out_dir / "final.datn")
    return FitResult(log, best_epoch, best_miou)


def write_log(log: Sequence[EpochRecord], path: Path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(LOG_HEADER)
        for rec in log:
            writer.writerow(rec.row())


def read_log(path: Path) -> list[EpochRecord]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        return [
            EpochRecord(int(r["epoch"]), *(float(r[k]) for k in LOG_HEADER[1:]))
            for r in reader
        ]
