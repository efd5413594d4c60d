"""Architecture screening, stability cross-validation, selection, and final re-training."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from .bundle import ModelBundle
from .cohort import CohortManifest, FoldPlan, SplitAssignment
from .errors import FoldDegeneracyError, KeyMismatchError, SizeError, TrainingDivergedError
from .models import InitStrategy, build_model
from .preprocess import AugmentPolicy
from .training import HyperParams, Sample, TrainBudget, train


def select_top_k(screen_results: Mapping[str, float], k: int = 3) -> list[str]:
    """Top ``k`` architectures by screening AUC, descending; ties by identifier."""
    if len(screen_results) < k:
        raise SizeError(f"need at least {k} screened architectures, got {len(screen_results)}")
    ranked = sorted(screen_results.items(), key=lambda kv: (-kv[1], kv[0]))
    return [name for name, _ in ranked[:k]]


@dataclass(frozen=True)
class CVResult:
    view: str
    modality: str
    architecture: str
    fold_aucs: tuple[float, ...]
    mean: float
    std: float
    plan_digest: str | None = None

    @classmethod
    def from_folds(cls, view, modality, architecture, fold_aucs: Sequence[float], plan_digest=None) -> "CVResult":
        a = np.asarray(fold_aucs, dtype=float)
        if a.size < 1 or np.any((a < 0) | (a > 1)):
            raise ValueError("fold AUCs must be a nonempty list of values in [0, 1]")
        std = float(np.std(a, ddof=1)) if a.size > 1 else 0.0
        return cls(view, modality, architecture, tuple(float(x) for x in a), float(np.mean(a)), std, plan_digest)

    @classmethod
    def from_summary(cls, view, modality, architecture, mean: float, std: float) -> "CVResult":
        """A result known only by its reported mean and standard deviation."""
        return cls(view, modality, architecture, (), float(mean), float(std))

    @property
    def key(self) -> tuple[str, str]:
        return (self.view, self.modality)

    def summary(self, digits: int = 3) -> str:
        return f"{self.mean:.{digits}f} ± {self.std:.{digits}f}"

    def to_dict(self) -> dict:
        return {
            "view": self.view,
            "modality": self.modality,
            "architecture": self.architecture,
            "fold_aucs": list(self.fold_aucs),
            "mean": self.mean,
            "std": self.std,
            "plan_digest": self.plan_digest,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "CVResult":
        return cls(d["view"], d["modality"], d["architecture"], tuple(d["fold_aucs"]), d["mean"], d["std"],
                   d.get("plan_digest"))


@dataclass(frozen=True)
class SelectionDecision:
    view: str
    modality: str
    architecture: str
    criterion: str = "min_fold_auc_std"
    candidates: tuple[CVResult, ...] = field(default_factory=tuple)

    @property
    def chosen(self) -> CVResult:
        return next(c for c in self.candidates if c.architecture == self.architecture)

    def to_dict(self) -> dict:
        return {
            "view": self.view,
            "modality": self.modality,
            "architecture": self.architecture,
            "criterion": self.criterion,
            "candidates": [c.to_dict() for c in self.candidates],
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "SelectionDecision":
        return cls(d["view"], d["modality"], d["architecture"], d.get("criterion", "min_fold_auc_std"),
                   tuple(CVResult.from_dict(c) for c in d.get("candidates", ())))


def select_architecture(candidates: Sequence[CVResult]) -> SelectionDecision:
    """Lowest fold-AUC standard deviation wins; then higher mean, then identifier."""
    if not candidates:
        raise ValueError("no candidates to select from")
    keys = {c.key for c in candidates}
    if len(keys) > 1:
        raise KeyMismatchError(f"candidates span several view-modality keys: {sorted(keys)}")
    best = min(candidates, key=lambda c: (c.std, -c.mean, c.architecture))
    ordered = tuple(sorted(candidates, key=lambda c: c.architecture))
    return SelectionDecision(best.view, best.modality, best.architecture, candidates=ordered)


def _samples_for(data: Mapping[str, list[Sample]], study_ids: Sequence[str]) -> list[Sample]:
    return [s for sid in study_ids for s in data.get(sid, [])]


def run_cv(
    foldplan: FoldPlan,
    manifest: CohortManifest,
    data: Mapping[str, list[Sample]],
    architecture: str,
    hp: HyperParams,
    budget: TrainBudget | None = None,
    seed: int = 0,
    *,
    view: str = "",
    init: InitStrategy | None = None,
    augment: AugmentPolicy | None = None,
    model_factory: Callable[[], object] | None = None,
) -> CVResult:
    """Train on k-1 folds, validate on the held-out fold, for every fold.

    ``data`` maps study id to that study's preprocessed sequences for one view.
    """
    budget = budget or TrainBudget.cv()
    init = init or InitStrategy()
    modality = foldplan.modality or (manifest.modalities[0] if manifest.modalities else "")
    label_of = {s.study_id: s.label for s in manifest}
    aucs = []
    for fold in range(foldplan.k):
        val_ids = [sid for sid in foldplan.study_ids(manifest, fold, holdout=True) if sid in data]
        train_ids = [sid for sid in foldplan.study_ids(manifest, fold, holdout=False) if sid in data]
        if len({label_of[s] for s in val_ids}) < 2:
            raise FoldDegeneracyError(fold)
        model = model_factory() if model_factory else build_model(architecture, hp.dropout, init, seed + fold)
        res = train(model, _samples_for(data, train_ids), _samples_for(data, val_ids), hp, budget,
                    seed + fold, augment=augment)
        if res.status != "completed":
            raise TrainingDivergedError(f"fold {fold}: {res.message}")
        aucs.append(res.val_auc_at_best)
    return CVResult.from_folds(view, modality, architecture, aucs, foldplan.digest())


def retrain_final(
    decision: SelectionDecision,
    initial_split: SplitAssignment,
    manifest: CohortManifest,
    data: Mapping[str, list[Sample]],
    hp: HyperParams,
    out_dir: str | Path,
    budget: TrainBudget | None = None,
    seed: int = 0,
    *,
    init: InitStrategy | None = None,
    augment: AugmentPolicy | None = None,
    provenance: Mapping | None = None,
) -> ModelBundle:
    """Re-train the chosen architecture on the initial train partition, validated on its val partition."""
    budget = budget or TrainBudget.final()
    init = init or InitStrategy()
    out_dir = Path(out_dir)
    train_ids = initial_split.study_ids(manifest, "train")
    val_ids = initial_split.study_ids(manifest, "val")
    model = build_model(decision.architecture, hp.dropout, init, seed)
    name = f"{decision.modality}_{decision.view}"
    ckpt = out_dir / f"{name}.ckpt"
    res = train(
        model,
        _samples_for(data, train_ids),
        _samples_for(data, val_ids),
        hp,
        budget,
        seed,
        augment=augment,
        checkpoint_path=ckpt,
        history_path=out_dir / f"{name}.history.jsonl",
        checkpoint_header={"view": decision.view, "modality": decision.modality, "seed": seed,
                           "config_hash": (provenance or {}).get("config_hash")},
    )
    if res.status != "completed" or res.checkpoint is None:
        raise TrainingDivergedError(f"{name}: {res.message or 'no checkpoint produced'}")
    return ModelBundle(
        view=decision.view,
        modality=decision.modality,
        architecture=decision.architecture,
        hp=hp,
        init=init,
        checkpoint=str(ckpt),
        train=res.to_dict(),
        seed=seed,
        provenance=dict(provenance or {}),
    )
