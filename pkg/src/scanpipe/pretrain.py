"""Domain pretraining on an external corpus with the cohort manifest schema.

The protocol reuses fine-tune tuning unchanged apart from four settings:
augmentation multiplier, cosine T_max, the dataset the objective is computed
on (a stratified development subset held out of the corpus), and the name of
the label column.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

from .cohort import CohortManifest, SplitAssignment, load_manifest, stratified_split, validate_no_leakage
from .dataset import VolumeStore
from .errors import ConfigError, InfeasibleSplitError
from .evaluate import roc_auc
from .models import InitStrategy, build_model, save_model
from .preprocess import AugmentPolicy
from .selection import select_top_k
from .training import HyperParams, TrainBudget, study_probabilities, train
from .tuning import SearchSpace, best_trial, plan_hyperband, run_hyperband

PROFILE_OVERRIDES = ("augment_multiplier", "cosine_t_max", "objective_dataset", "label_field")


def shared_tuning_config(
    R: int = 20, eta: int = 3, n_trials: int = 100, patience: int = 10, space: SearchSpace | None = None
) -> dict:
    """Settings common to fine-tune and pretraining tuning."""
    space = space or SearchSpace()
    d = space.to_dict()
    d["schedulers"] = [s["kind"] for s in d["schedulers"]]
    return {"hyperband_R": R, "hyperband_eta": eta, "n_trials": n_trials, "patience": patience, "search_space": d}


def finetune_config(shared: Mapping | None = None) -> dict:
    cfg = dict(shared if shared is not None else shared_tuning_config())
    cfg.update({
        "augment_multiplier": 10,
        "cosine_t_max": 10,
        "objective_dataset": "initial_split.val",
        "label_field": "label",
    })
    return cfg


def config_diff(a: Mapping, b: Mapping) -> set[str]:
    return {k for k in set(a) | set(b) if a.get(k) != b.get(k)}


@dataclass(frozen=True)
class PretrainProfile:
    corpus_manifest: str
    label_column: str = "abnormal"
    dev_set_size: int = 120
    augment_multiplier: int = 5
    cosine_t_max: int = 5
    objective: str = "dev_auc"
    holdout_manifest: str | None = None
    views: tuple[str, ...] = ("sagittal",)
    architectures: tuple[str, ...] = ()
    R: int = 20
    eta: int = 3
    n_trials: int = 100
    patience: int = 10  # early stopping is not specified for pretraining; fine-tune patience is inherited
    search: dict = field(default_factory=dict)
    top_k: int = 3
    seed: int = 0

    def __post_init__(self):
        if self.dev_set_size < 2:
            raise ConfigError("dev_set_size must be at least 2")
        if self.augment_multiplier < 1 or self.cosine_t_max < 1:
            raise ConfigError("augment_multiplier and cosine_t_max must be positive")
        if self.objective != "dev_auc":
            raise ConfigError(f"unsupported pretraining objective {self.objective!r}")

    @classmethod
    def from_dict(cls, d: Mapping, base_dir: str | Path | None = None) -> "PretrainProfile":
        d = dict(d)
        unknown = set(d) - {f for f in cls.__dataclass_fields__}
        if unknown:
            raise ConfigError(f"unknown pretrain profile keys {sorted(unknown)}")
        if "corpus_manifest" not in d:
            raise ConfigError("pretrain profile needs corpus_manifest")
        for key in ("corpus_manifest", "holdout_manifest"):
            if d.get(key) and base_dir is not None and not Path(d[key]).is_absolute():
                d[key] = str(Path(base_dir) / d[key])
        for key in ("views", "architectures"):
            if key in d:
                d[key] = tuple(d[key])
        return cls(**d)

    @classmethod
    def from_file(cls, path: str | Path) -> "PretrainProfile":
        import yaml

        path = Path(path)
        d = yaml.safe_load(path.read_text()) or {}
        return cls.from_dict(d.get("pretrain", d), base_dir=path.parent)

    def to_dict(self) -> dict:
        return asdict(self)

    def space(self) -> SearchSpace:
        return SearchSpace.from_dict(self.search).with_cosine_t_max(self.cosine_t_max)

    def shared(self) -> dict:
        return shared_tuning_config(self.R, self.eta, self.n_trials, self.patience, SearchSpace.from_dict(self.search))

    def effective_config(self) -> dict:
        cfg = dict(self.shared())
        cfg.update({
            "augment_multiplier": self.augment_multiplier,
            "cosine_t_max": self.cosine_t_max,
            "objective_dataset": "corpus.dev_set",
            "label_field": self.label_column,
        })
        return cfg

    def augment_policy(self) -> AugmentPolicy:
        return AugmentPolicy(multiplier=self.augment_multiplier, seed=self.seed)


def dev_split(corpus: CohortManifest, dev_set_size: int, seed: int = 0) -> SplitAssignment:
    """Stratified development subset (the ``val`` partition); the rest is ``train``."""
    n = len(corpus.shoulders())
    if not 0 < dev_set_size < n:
        raise InfeasibleSplitError(f"dev set of {dev_set_size} from a corpus of {n} units")
    ratios = ((n - dev_set_size) / n, dev_set_size / n, 0.0)
    return stratified_split(corpus, ratios, seed)


@dataclass
class PretrainResult:
    architecture: str
    checkpoints: dict[str, str]
    dev_auc: dict[str, float]
    screen_auc: dict[str, float]
    screen_dataset: str
    best_hp: dict[str, dict]
    ledgers: dict[str, str]
    dev_set: list[str]

    def to_dict(self) -> dict:
        return asdict(self)


def _auc(model, samples) -> float:
    _, p, y = study_probabilities(model, samples)
    return roc_auc(p, y)


def run_pretrain(
    profile: PretrainProfile,
    architecture: str,
    space: SearchSpace | None = None,
    out_dir: str | Path = "pretrain",
) -> PretrainResult:
    """Hyperband on the corpus per view, then emit the best trial's weights as a domain checkpoint."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    corpus = load_manifest(profile.corpus_manifest, label_column=profile.label_column)
    split = dev_split(corpus, profile.dev_set_size, profile.seed)
    report = validate_no_leakage(split, corpus)
    if not report.passed:
        raise InfeasibleSplitError(f"development split leaks: {report.violations[:3]}")
    train_ids = split.study_ids(corpus, "train")
    dev_ids = split.study_ids(corpus, "val")
    store = VolumeStore(corpus)
    stats = store.fit_stats(train_ids)
    space = (space or SearchSpace.from_dict(profile.search)).with_cosine_t_max(profile.cosine_t_max)
    plan = plan_hyperband(profile.R, profile.eta, profile.n_trials)
    augment = profile.augment_policy()

    holdout = holdout_store = None
    if profile.holdout_manifest:
        holdout = load_manifest(profile.holdout_manifest, label_column=profile.label_column)
        holdout_store = VolumeStore(holdout)

    result = PretrainResult(architecture, {}, {}, {}, "holdout" if holdout else "dev_set", {}, {}, dev_ids)
    for vi, view in enumerate(profile.views):
        data = store.samples(view, stats, train_ids + dev_ids)
        tr = [s for sid in train_ids for s in data.get(sid, [])]
        dev = [s for sid in dev_ids for s in data.get(sid, [])]
        view_seed = profile.seed + 1000 * vi

        def fit(hp: HyperParams, epochs: int):
            model = build_model(architecture, hp.dropout, InitStrategy(), view_seed)
            res = train(model, tr, dev, hp, TrainBudget(epochs, profile.patience), view_seed, augment=augment)
            return model, res

        ledger_path = out_dir / f"{architecture}_{view}.ledger.jsonl"
        ledger = run_hyperband(space, plan, lambda hp, ep: fit(hp, ep)[1].val_auc_at_best, view_seed, ledger_path)
        best = best_trial(ledger)
        # the search is deterministic per seed, so re-fitting the best configuration reproduces its weights
        model, res = fit(best.hp, best.epochs)
        ckpt = out_dir / f"{architecture}_{view}.ckpt"
        save_model(model, ckpt, weights_kind="domain", view=view, corpus=str(profile.corpus_manifest),
                   label_field=profile.label_column, trial_id=best.trial_id, seed=view_seed)
        result.checkpoints[view] = str(ckpt)
        result.ledgers[view] = str(ledger_path)
        result.best_hp[view] = {**best.hp.to_dict(), "epochs": best.epochs, "trial_id": best.trial_id}
        result.dev_auc[view] = float(res.val_auc_at_best)
        if holdout is not None:
            ho = holdout_store.samples(view, stats)
            result.screen_auc[view] = _auc(model, [s for ss in ho.values() for s in ss])
        else:
            result.screen_auc[view] = result.dev_auc[view]

    (out_dir / f"{architecture}.pretrain.json").write_text(json.dumps(result.to_dict(), indent=2, sort_keys=True))
    return result


def screen_architectures(results: Sequence[PretrainResult], view: str = "sagittal", k: int = 3) -> list[str]:
    """Top-k architectures by held-out screen AUC on one view."""
    return select_top_k({r.architecture: r.screen_auc[view] for r in results}, k)


def domain_init(result: PretrainResult, view: str) -> InitStrategy:
    return InitStrategy("domain_pretrained", result.checkpoints[view])
