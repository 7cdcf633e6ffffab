"""SGD with momentum and weight decay, cosine annealing, and the training loop."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Sequence

import numpy as np

from . import checkpoint
from . import functional as F
from .autograd import backward, precision
from .data import AugmentConfig, SegmentationSample, augment, to_batch
from .errors import ConfigError, ShapeError, TrainingDiverged
from .metrics import ConfusionMatrix, accumulate, compute_metrics
from .models import SegmentationNet

log = logging.getLogger(__name__)


@dataclass
class TrainConfig:
    epochs: int = 20
    batch_size: int = 4
    lr0: float = 0.05
    momentum: float = 0.99
    weight_decay: float = 0.0005
    seed: int = 0
    precision: str = "single"
    eval_every: int = 1
    steps: int | None = None  # overrides epochs when set

    def __post_init__(self):
        if not self.lr0 > 0:
            raise ConfigError(f"lr0 must be positive, got {self.lr0}")
        if not 0 <= self.momentum < 1:
            raise ConfigError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.batch_size < 1 or self.epochs < 0 or self.eval_every < 1:
            raise ConfigError("batch_size and eval_every must be >= 1, epochs >= 0")
        if self.steps is not None and self.steps < 0:
            raise ConfigError(f"steps must be >= 0, got {self.steps}")
        if self.precision not in ("single", "double"):
            raise ConfigError(f"precision must be 'single' or 'double', got {self.precision!r}")

    @classmethod
    def paper_recipe(cls, **overrides) -> "TrainConfig":
        """300 epochs, batch 4, lr 0.3, momentum 0.99, weight decay 5e-4."""
        return cls(**{"epochs": 300, "batch_size": 4, "lr0": 0.3, "momentum": 0.99,
                      "weight_decay": 0.0005, **overrides})

    @classmethod
    def desk(cls, **overrides) -> "TrainConfig":
        return cls(**{"epochs": 20, "batch_size": 4, "lr0": 0.2, "momentum": 0.9,
                      "weight_decay": 0.0005, **overrides})

    @classmethod
    def preset(cls, name: str, **overrides) -> "TrainConfig":
        presets = {"paper": cls.paper_recipe, "paper-recipe": cls.paper_recipe, "desk": cls.desk}
        if name not in presets:
            raise ConfigError(f"unknown training preset {name!r}; expected one of {sorted(presets)}")
        return presets[name](**overrides)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)

    @classmethod
    def field_names(cls) -> set[str]:
        return {f.name for f in fields(cls)}


def cosine_lr(t: int, total: int, lr0: float) -> float:
    """0.5 * lr0 * (1 + cos(pi * t / total)), annealing to 0 at ``t == total``."""
    if total <= 0:
        raise ConfigError("cosine_lr needs total steps > 0")
    if not 0 <= t <= total:
        raise ConfigError(f"step {t} outside [0, {total}]")
    return max(0.0, 0.5 * lr0 * (1.0 + math.cos(math.pi * t / total)))


def sgd_step(params: Sequence[np.ndarray], grads: Sequence[np.ndarray | None],
             velocity: list[np.ndarray], lr: float, momentum: float, weight_decay: float) -> None:
    """In-place update ``v <- mu v + (g + wd theta); theta <- theta - lr v``.

    A missing gradient counts as zero, so weight decay still applies.
    """
    for p, g, v in zip(params, grads, velocity):
        if g is not None and g.shape != p.shape:
            raise ShapeError(f"sgd_step: gradient {g.shape} does not match parameter {p.shape}")
        step = weight_decay * p if g is None else g + weight_decay * p
        v *= momentum
        v += step
        p -= lr * v


class SGD:
    def __init__(self, model: SegmentationNet, momentum: float, weight_decay: float):
        self.params = model.parameters()
        self.velocity = [np.zeros_like(p.data) for p in self.params]
        self.momentum, self.weight_decay = momentum, weight_decay

    def step(self, lr: float) -> None:
        sgd_step([p.data for p in self.params], [p.grad for p in self.params], self.velocity,
                 lr, self.momentum, self.weight_decay)


@dataclass
class TrainReport:
    step_losses: list[float] = field(default_factory=list)
    lrs: list[float] = field(default_factory=list)
    epoch_losses: list[float] = field(default_factory=list)
    epoch_metrics: list[dict] = field(default_factory=list)
    checkpoints: dict[str, str] = field(default_factory=dict)
    best_epoch: int | None = None
    best_mean_iu: float | None = None

    def smoothed(self, window: int = 10) -> np.ndarray:
        losses = np.asarray(self.step_losses)
        if losses.size == 0:
            return losses
        kernel = np.ones(min(window, losses.size))
        return np.convolve(losses, kernel, mode="valid") / kernel.size


def evaluate(model: SegmentationNet, samples: Sequence[SegmentationSample], batch_size: int = 8) -> ConfusionMatrix:
    cm = ConfusionMatrix(model.spec.num_classes)
    dtype = model.parameters()[0].dtype
    for i in range(0, len(samples), batch_size):
        images, masks = to_batch(samples[i:i + batch_size], dtype=dtype)
        accumulate(cm, model.predict(images), masks)
    return cm


def train(model: SegmentationNet, dataset: Sequence[SegmentationSample], cfg: TrainConfig,
          augment_cfg: AugmentConfig | None = None, eval_set: Sequence[SegmentationSample] | None = None,
          out_dir=None) -> TrainReport:
    """Train in place.  Deterministic for a fixed ``cfg.seed`` and precision.

    Each epoch visits the data in a seeded random order; every sample in a
    batch is augmented with its own stream keyed on (augment seed, epoch,
    index).  The learning rate follows a per-step cosine schedule over all
    steps.  With ``out_dir`` set, a JSON-lines loss log and checkpoints
    (``best.ckpt`` at the best evaluated mean IU, ``final.ckpt``) are written.
    ``eval_set`` defaults to the unaugmented training data.
    """
    if not dataset:
        raise ConfigError("training dataset is empty")
    augment_cfg = augment_cfg or AugmentConfig(p=0.0)
    eval_set = dataset if eval_set is None else eval_set
    out = Path(out_dir) if out_dir is not None else None
    report = TrainReport()
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    n = len(dataset)
    per_epoch = math.ceil(n / cfg.batch_size)
    total = cfg.steps if cfg.steps is not None else cfg.epochs * per_epoch
    epochs = math.ceil(total / per_epoch) if cfg.steps is not None else cfg.epochs

    if total == 0:
        if out is not None:
            report.checkpoints["initial"] = str(checkpoint.save(model, out / "initial.ckpt"))
        return report

    dtype = model.parameters()[0].dtype
    opt = SGD(model, cfg.momentum, cfg.weight_decay)
    order_rng = np.random.default_rng(cfg.seed)
    log_fh = open(out / "train_log.jsonl", "w") if out is not None else None
    step = 0
    try:
        with precision(cfg.precision):
            for epoch in range(1, epochs + 1):
                order = order_rng.permutation(n)
                epoch_losses = []
                for b in range(per_epoch):
                    if step >= total:
                        break
                    idx = order[b * cfg.batch_size:(b + 1) * cfg.batch_size]
                    batch = [augment(dataset[i], augment_cfg, np.random.default_rng([augment_cfg.seed, epoch, int(i)]))
                             for i in idx]
                    images, masks = to_batch(batch, dtype=dtype)
                    lr = cosine_lr(step, total, cfg.lr0)

                    model.train()
                    model.zero_grad()
                    loss = F.softmax_cross_entropy(model(images), masks)
                    value = float(loss.data)
                    if not math.isfinite(value):
                        raise TrainingDiverged(epoch, step, lr, value)
                    backward(loss)
                    opt.step(lr)

                    report.step_losses.append(value)
                    report.lrs.append(lr)
                    epoch_losses.append(value)
                    if log_fh is not None:
                        log_fh.write(json.dumps({"epoch": epoch, "step": step, "lr": lr, "loss": value}) + "\n")
                    step += 1
                report.epoch_losses.append(float(np.mean(epoch_losses)))

                if epoch % cfg.eval_every == 0 or epoch == epochs:
                    metrics = compute_metrics(evaluate(model, eval_set))
                    metrics["epoch"] = epoch
                    report.epoch_metrics.append(metrics)
                    log.info("epoch %d loss %.4f mean IU %.4f", epoch, report.epoch_losses[-1], metrics["mean_iu"])
                    if report.best_mean_iu is None or metrics["mean_iu"] > report.best_mean_iu:
                        report.best_mean_iu, report.best_epoch = metrics["mean_iu"], epoch
                        if out is not None:
                            report.checkpoints["best"] = str(
                                checkpoint.save(model, out / "best.ckpt", {"epoch": epoch, "mean_iu": metrics["mean_iu"]}))
    finally:
        if log_fh is not None:
            log_fh.close()

    if out is not None:
        report.checkpoints["final"] = str(checkpoint.save(model, out / "final.ckpt", {"epoch": epochs}))
    return report
