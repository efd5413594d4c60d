"""Class-weighted BCE training with early stopping and best-epoch checkpoints.

One optimizer step per sequence volume. Validation runs once per epoch at the
study level (sequence probabilities of a study are averaged); the epoch with
the highest validation accuracy is kept, earliest epoch winning ties.
"""

from __future__ import annotations

import copy
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np
import torch
import torch.nn as nn

from .errors import ProbabilityDomainError, WeightingError
from .evaluate import roc_auc
from .models import logit_to_probability, save_model
from .preprocess import AugmentPolicy, augment_copy

EPS = 1e-7
LR_RANGE = (1e-8, 1e-1)
WD_RANGE = (1e-6, 1e-1)
DROPOUT_RANGE = (0.0, 0.5)
SCHEDULERS = ("cosine_annealing", "reduce_on_plateau")


@dataclass(frozen=True)
class SchedulerSpec:
    kind: str = "cosine_annealing"
    t_max: int = 10
    factor: float = 0.5
    patience: int = 3

    def __post_init__(self):
        if self.kind not in SCHEDULERS:
            raise ValueError(f"unknown scheduler {self.kind!r}")

    @classmethod
    def cosine(cls, t_max: int = 10) -> "SchedulerSpec":
        return cls("cosine_annealing", t_max=t_max)

    @classmethod
    def plateau(cls, factor: float = 0.5, patience: int = 3) -> "SchedulerSpec":
        return cls("reduce_on_plateau", factor=factor, patience=patience)


@dataclass(frozen=True)
class HyperParams:
    learning_rate: float
    weight_decay: float
    dropout: float
    scheduler: SchedulerSpec = SchedulerSpec()

    def __post_init__(self):
        checks = (
            ("learning_rate", self.learning_rate, LR_RANGE),
            ("weight_decay", self.weight_decay, WD_RANGE),
            ("dropout", self.dropout, DROPOUT_RANGE),
        )
        for name, value, (lo, hi) in checks:
            if not lo <= value <= hi:
                raise ValueError(f"{name}={value} outside [{lo}, {hi}]")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: Mapping) -> "HyperParams":
        return cls(
            float(d["learning_rate"]),
            float(d["weight_decay"]),
            float(d["dropout"]),
            SchedulerSpec(**d.get("scheduler", {})),
        )


@dataclass(frozen=True)
class TrainBudget:
    max_epochs: int
    patience: int = 10

    def __post_init__(self):
        if self.max_epochs < 1 or self.patience < 1:
            raise ValueError("max_epochs and patience must be >= 1")

    @classmethod
    def tuning(cls) -> "TrainBudget":
        return cls(20)

    @classmethod
    def cv(cls) -> "TrainBudget":
        return cls(30)

    @classmethod
    def final(cls) -> "TrainBudget":
        return cls(100)


@dataclass
class Sample:
    """One preprocessed sequence: ``voxels`` is (slices, 224, 224)."""

    study_id: str
    voxels: np.ndarray
    label: int


@dataclass
class TrainResult:
    best_epoch: int
    best_val_accuracy: float
    val_auc_at_best: float
    checkpoint: str | None
    history: list[dict] = field(default_factory=list)
    epochs_run: int = 0
    status: str = "completed"
    message: str = ""
    class_weights: tuple[float, float] = (1.0, 1.0)
    best_state: dict | None = field(default=None, repr=False)

    def to_dict(self) -> dict:
        d = asdict(self)
        d.pop("best_state")
        return d


# ---------------------------------------------------------------------------
# loss
# ---------------------------------------------------------------------------


def class_weights(labels: Sequence[int]) -> tuple[float, float]:
    """(w_pos, w_neg) with w_c = N / (2 N_c)."""
    y = np.asarray(labels, dtype=int)
    n_pos, n_neg = int((y == 1).sum()), int((y == 0).sum())
    if n_pos == 0 or n_neg == 0:
        raise WeightingError("class weighting needs both classes in the training labels")
    n = n_pos + n_neg
    return (n / (2 * n_pos), n / (2 * n_neg))


def weighted_bce(p: float, y: int, weights: tuple[float, float] = (1.0, 1.0), *, clamp: bool = False) -> float:
    """-[y w_pos ln p + (1 - y) w_neg ln(1 - p)].

    Probabilities outside (0, 1) raise unless ``clamp`` is set, in which case
    they are clipped to [1e-7, 1 - 1e-7].
    """
    if clamp:
        p = min(max(p, EPS), 1.0 - EPS)
    elif not 0.0 < p < 1.0:
        raise ProbabilityDomainError(f"probability {p} outside (0, 1)")
    w_pos, w_neg = weights
    return -(y * w_pos * math.log(p) + (1 - y) * w_neg * math.log1p(-p))


def weighted_bce_torch(logit: torch.Tensor, y: int, weights: tuple[float, float]) -> torch.Tensor:
    p = torch.sigmoid(logit).clamp(EPS, 1.0 - EPS)
    w_pos, w_neg = weights
    return -(y * w_pos * torch.log(p) + (1 - y) * w_neg * torch.log1p(-p))


# ---------------------------------------------------------------------------
# learning-rate schedules
# ---------------------------------------------------------------------------


@dataclass
class LRSchedule:
    spec: SchedulerSpec
    base_lr: float
    lr: float = float("nan")
    epoch: int = 0
    best: float | None = None
    bad_epochs: int = 0

    def __post_init__(self):
        if math.isnan(self.lr):
            self.lr = self.base_lr

    def step(self, metric: float | None = None) -> float:
        """Advance one epoch; ``metric`` is the monitored validation accuracy."""
        self.epoch += 1
        if self.spec.kind == "cosine_annealing":
            self.lr = self.base_lr * (1 + math.cos(math.pi * self.epoch / self.spec.t_max)) / 2
            return self.lr
        if metric is None:
            raise ValueError("reduce_on_plateau needs the monitored metric")
        if self.best is None or metric > self.best:
            self.best = metric
            self.bad_epochs = 0
        else:
            self.bad_epochs += 1
            if self.bad_epochs >= self.spec.patience:
                self.lr *= self.spec.factor
                self.bad_epochs = 0
        return self.lr


def scheduler_step(state: LRSchedule, epoch_metrics: Mapping | float | None = None) -> float:
    if isinstance(epoch_metrics, Mapping):
        epoch_metrics = epoch_metrics.get("val_accuracy")
    return state.step(epoch_metrics)


# ---------------------------------------------------------------------------
# evaluation helpers
# ---------------------------------------------------------------------------


@torch.no_grad()
def study_probabilities(model: nn.Module, samples: Sequence[Sample]) -> tuple[list[str], np.ndarray, np.ndarray]:
    """Study ids, mean sequence probability per study, and labels (inference mode)."""
    was = model.training
    model.eval()
    acc: dict[str, list[float]] = {}
    labels: dict[str, int] = {}
    for s in samples:
        acc.setdefault(s.study_id, []).append(logit_to_probability(model(s.voxels)))
        labels[s.study_id] = s.label
    model.train(was)
    ids = list(acc)
    return ids, np.array([np.mean(acc[i]) for i in ids]), np.array([labels[i] for i in ids])


def validation_metrics(model: nn.Module, samples: Sequence[Sample]) -> dict[str, float]:
    _, p, y = study_probabilities(model, samples)
    acc = float(np.mean((p > 0.5) == (y == 1)))
    try:
        auc = roc_auc(p, y)
    except Exception:
        auc = float("nan")
    return {"val_accuracy": acc, "val_auc": auc}


# ---------------------------------------------------------------------------
# training loop
# ---------------------------------------------------------------------------


def train(
    model: nn.Module,
    train_set: Sequence[Sample],
    val_set: Sequence[Sample],
    hp: HyperParams,
    budget: TrainBudget,
    seed: int = 0,
    *,
    augment: AugmentPolicy | None = None,
    checkpoint_path: str | Path | None = None,
    history_path: str | Path | None = None,
    checkpoint_header: Mapping | None = None,
    loss_hook: Callable[[torch.Tensor, int, int], torch.Tensor] | None = None,
) -> TrainResult:
    """Train in place and leave ``model`` holding its best-epoch weights.

    ``loss_hook(loss, epoch, step)`` may replace the loss before backprop; it
    exists so tests can force a non-finite loss.
    """
    if not val_set:
        raise ValueError("validation set is empty")
    weights = class_weights([s.label for s in train_set])
    if hasattr(model, "dropout") and isinstance(model.dropout, nn.Dropout):
        model.dropout.p = hp.dropout
    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    opt = torch.optim.AdamW(model.parameters(), lr=hp.learning_rate, weight_decay=hp.weight_decay)
    sched = LRSchedule(hp.scheduler, hp.learning_rate)
    copies = augment.multiplier if augment is not None else 1
    items = [(i, j) for i in range(len(train_set)) for j in range(copies)]

    if history_path is not None:
        history_path = Path(history_path)
        history_path.parent.mkdir(parents=True, exist_ok=True)
        history_path.write_text("")

    result = TrainResult(0, -1.0, float("nan"), None, class_weights=weights)
    for epoch in range(1, budget.max_epochs + 1):
        model.train()
        losses = []
        diverged = False
        for step, k in enumerate(rng.permutation(len(items))):
            i, j = items[k]
            s = train_set[i]
            x = s.voxels if augment is None else augment_copy(s.voxels, augment, j, stream=i)
            loss = weighted_bce_torch(model(x), s.label, weights)
            if loss_hook is not None:
                loss = loss_hook(loss, epoch, step)
            if not torch.isfinite(loss):
                diverged = True
                break
            opt.zero_grad()
            loss.backward()
            opt.step()
            losses.append(float(loss.detach()))
        if diverged:
            result.status = "diverged"
            result.message = f"non-finite loss at epoch {epoch}, step {step}"
            result.epochs_run = epoch
            break

        metrics = validation_metrics(model, val_set)
        record = {"epoch": epoch, "loss": float(np.mean(losses)), "lr": sched.lr, **metrics}
        result.history.append(record)
        result.epochs_run = epoch
        if history_path is not None:
            with history_path.open("a") as fh:
                fh.write(json.dumps(record) + "\n")

        if metrics["val_accuracy"] > result.best_val_accuracy:
            result.best_epoch = epoch
            result.best_val_accuracy = metrics["val_accuracy"]
            result.val_auc_at_best = metrics["val_auc"]
            result.best_state = copy.deepcopy(model.state_dict())

        new_lr = scheduler_step(sched, metrics)
        for group in opt.param_groups:
            group["lr"] = new_lr
        if epoch - result.best_epoch >= budget.patience:
            break

    if result.best_state is not None:
        model.load_state_dict(result.best_state)
        if checkpoint_path is not None:
            header = {"best_epoch": result.best_epoch, "best_val_accuracy": result.best_val_accuracy}
            header.update(checkpoint_header or {})
            save_model(model, checkpoint_path, **header)
            result.checkpoint = str(checkpoint_path)
    model.eval()
    return result
