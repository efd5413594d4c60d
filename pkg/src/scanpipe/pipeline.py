"""Stage orchestration: declarative run configs, on-disk artifacts, provenance stamps.

Artifacts live under ``<out_dir>/<modality>/``::

    split.json  folds.json  stats.json
    tune/<view>/<arch>.ledger.jsonl   tune/<view>/<arch>.best.json
    cv/<view>/<arch>.json
    select/<view>.json
    retrain/<modality>_<view>.ckpt    retrain/<view>.bundle.json
    evaluate/report.json  evaluate/predictions.json  evaluate/thresholds.json  evaluate/roc.csv

Every JSON artifact carries a ``provenance`` block (config hash, seed, stage,
and SHA-256 of its inputs) that is enough to re-derive it.
"""

from __future__ import annotations

import copy
import hashlib
import json
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Mapping

import yaml

from . import __version__
from .bundle import ModelBundle
from .cohort import (
    DEFAULT_RATIOS,
    VIEWS,
    CohortManifest,
    FoldPlan,
    SplitAssignment,
    load_manifest,
    make_folds,
    stratified_split,
    train_val_pool,
    validate_no_leakage,
)
from .dataset import VolumeStore
from .errors import ConfigError, DependencyError, InfeasibleSplitError
from .evaluate import aggregate_scan, calibrate_threshold, dump_json, evaluate_predictions, plot_roc, write_roc_csv
from .interpret import gradcam, overlay
from .models import InitStrategy, build_model, forward_scan
from .preprocess import AugmentPolicy, StandardizationStats
from .selection import CVResult, SelectionDecision, retrain_final, run_cv, select_architecture
from .synth import SyntheticSpec, generate_synthetic
from .training import HyperParams, TrainBudget, train
from .tuning import SearchSpace, TrialLedger, best_trial, plan_hyperband, run_hyperband

STAGES = ("ingest", "split", "tune", "cv", "select", "retrain", "evaluate", "gradcam", "pretrain", "synth")
HOME_ENV = "SCANPIPE_HOME"

DEFAULTS: dict[str, Any] = {
    "manifest": None,
    "out_dir": None,
    "modalities": None,
    "views": list(VIEWS),
    "seed": 0,
    "architectures": ["tiny-test-cnn"],
    "split": {"ratios": list(DEFAULT_RATIOS)},
    "init": {"kind": "random", "checkpoint_dir": None, "checkpoints": {}},
    "augment": {"multiplier": 10},
    "tune": {"R": 20, "eta": 3, "n_trials": 100, "patience": 10, "search": {}},
    "cv": {"k": 8, "max_epochs": 30, "patience": 10},
    "retrain": {"max_epochs": 100, "patience": 10},
    "evaluate": {"bootstrap_iterations": 1000, "plot": False, "external_manifest": None},
    "gradcam": {"study": None, "view": None, "slice": None, "sequence": 0, "out": None},
    "pretrain": {"profile": None},
    "synth": {"out_dir": None},
    "workers": 1,
}
# sections whose keys are not fixed in advance
_FREE_FORM = ("checkpoints", "search", "synth")
# keys that change how fast a run goes but never what it produces
_RUNTIME_KEYS = ("workers",)
_PATH_KEYS = (("manifest",), ("out_dir",), ("init", "checkpoint_dir"), ("evaluate", "external_manifest"),
              ("pretrain", "profile"), ("synth", "out_dir"), ("gradcam", "out"))


def _merge(base: dict, update: Mapping, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in update.items():
        where = f"{path}{k}"
        if k not in base:
            raise ConfigError(f"unknown config key {where!r}")
        if isinstance(base[k], dict) and k not in _FREE_FORM:
            if not isinstance(v, Mapping):
                raise ConfigError(f"config key {where!r} must be a mapping")
            out[k] = _merge(base[k], v, where + ".")
        elif isinstance(base[k], dict):
            if not isinstance(v, Mapping):
                raise ConfigError(f"config key {where!r} must be a mapping")
            out[k] = {**base[k], **copy.deepcopy(dict(v))}
        else:
            out[k] = copy.deepcopy(v)
    return out


def parse_override(item: str) -> tuple[list[str], Any]:
    """``a.b=value`` with ``value`` parsed as YAML."""
    if "=" not in item:
        raise ConfigError(f"override {item!r} is not key=value")
    key, raw = item.split("=", 1)
    return key.strip().split("."), yaml.safe_load(raw)


def _nest(keys: list[str], value) -> dict:
    d: Any = value
    for k in reversed(keys):
        d = {k: d}
    return d


def _resolve_paths(cfg: dict, base: Path) -> None:
    for keys in _PATH_KEYS:
        node = cfg
        for k in keys[:-1]:
            node = node[k]
        v = node.get(keys[-1])
        if v and not Path(v).is_absolute():
            node[keys[-1]] = str((base / v).resolve())
    ckpts = cfg["init"].get("checkpoints") or {}
    for arch, views in ckpts.items():
        for view, p in dict(views).items():
            if not Path(p).is_absolute():
                ckpts[arch][view] = str((base / p).resolve())


@dataclass
class RunConfig:
    """Fully-resolved run configuration (defaults < config file < command-line overrides)."""

    data: dict = field(default_factory=lambda: copy.deepcopy(DEFAULTS))

    @classmethod
    def build(
        cls, path: str | Path | None = None, overrides: Mapping | None = None, sets: list[str] | None = None
    ) -> "RunConfig":
        cfg = copy.deepcopy(DEFAULTS)
        if path is not None:
            path = Path(path)
            if not path.exists():
                raise ConfigError(f"config file not found: {path}")
            try:
                loaded = yaml.safe_load(path.read_text()) or {}  # YAML is a superset of JSON
            except yaml.YAMLError as exc:
                raise ConfigError(f"cannot parse {path}: {exc}") from exc
            if not isinstance(loaded, Mapping):
                raise ConfigError(f"{path}: top level must be a mapping")
            cfg = _merge(cfg, loaded)
            _resolve_paths(cfg, path.parent.resolve())
        late = {}
        for item in sets or []:
            keys, value = parse_override(item)
            late = _merge_loose(late, _nest(keys, value))
        for upd in (overrides or {}, late):
            upd = {k: v for k, v in upd.items() if v is not None}
            cfg = _merge(cfg, upd)
        _resolve_paths(cfg, Path.cwd())
        if not cfg["out_dir"]:
            cfg["out_dir"] = str(Path(os.environ.get(HOME_ENV, ".")).resolve() / "scanpipe-run")
        out = cls(cfg)
        out.validate()
        return out

    def validate(self) -> None:
        d = self.data
        bad = [v for v in d["views"] if v not in VIEWS]
        if bad or not d["views"]:
            raise ConfigError(f"views must be drawn from {VIEWS}, got {d['views']}")
        if not d["architectures"]:
            raise ConfigError("at least one architecture is required")
        if int(d["workers"]) < 1:
            raise ConfigError("workers must be >= 1")
        try:
            self.search_space()
            self.augment_policy()
            InitStrategy(d["init"]["kind"], "x" if d["init"]["kind"] != "random" else None)
        except (TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc

    def __getitem__(self, key):
        return self.data[key]

    @property
    def seed(self) -> int:
        return int(self.data["seed"])

    @property
    def out_dir(self) -> Path:
        return Path(self.data["out_dir"])

    def hash(self) -> str:
        d = {k: v for k, v in self.data.items() if k not in _RUNTIME_KEYS}
        return hashlib.sha256(json.dumps(d, sort_keys=True, default=str).encode()).hexdigest()

    def search_space(self) -> SearchSpace:
        return SearchSpace.from_dict(self.data["tune"]["search"])

    def augment_policy(self) -> AugmentPolicy | None:
        a = dict(self.data["augment"] or {})
        if a.get("enabled", True) is False:
            return None
        a.pop("enabled", None)
        if "scale" in a:
            a["scale"] = tuple(a["scale"])
        a.setdefault("seed", self.seed)
        return AugmentPolicy(**a)

    def to_dict(self) -> dict:
        return copy.deepcopy(self.data)


def _merge_loose(a: dict, b: Mapping) -> dict:
    out = dict(a)
    for k, v in b.items():
        out[k] = _merge_loose(out[k], v) if isinstance(v, Mapping) and isinstance(out.get(k), dict) else v
    return out


def derive_seed(master: int, *tags) -> int:
    """Stable per-task seed from the master seed and string/int tags."""
    h = hashlib.sha256(json.dumps([int(master), *map(str, tags)]).encode()).digest()
    return int.from_bytes(h[:4], "little") & 0x7FFFFFFF


def file_sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with Path(path).open("rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------------------
# per-modality context
# ---------------------------------------------------------------------------


@dataclass
class _Context:
    modality: str
    manifest: CohortManifest
    root: Path
    store: VolumeStore
    _split: SplitAssignment | None = None
    _stats: StandardizationStats | None = None
    _folds: FoldPlan | None = None

    def path(self, *parts) -> Path:
        return self.root.joinpath(*parts)


class Pipeline:
    """Runs stages against one output directory; keeps loaded volumes between stages."""

    def __init__(self, config: RunConfig):
        self.config = config
        self._manifest: CohortManifest | None = None
        self._contexts: dict[str, _Context] = {}

    # -- plumbing ----------------------------------------------------------

    def provenance(self, stage: str, inputs: Mapping[str, str | Path] = (), seed: int | None = None, **extra) -> dict:
        return {
            "stage": stage,
            "config_hash": self.config.hash(),
            "seed": self.config.seed if seed is None else seed,
            "master_seed": self.config.seed,
            "package_version": __version__,
            "inputs": {k: file_sha256(v) for k, v in sorted(dict(inputs).items())},
            **extra,
        }

    def _write(self, path: Path, payload: Mapping, stage: str, inputs=(), seed=None, **extra) -> Path:
        body = dict(payload)
        body["provenance"] = self.provenance(stage, inputs, seed, **extra)
        return dump_json(body, path)

    @staticmethod
    def _read(path: Path, stage: str) -> dict:
        if not path.exists():
            raise DependencyError(stage, str(path))
        return json.loads(path.read_text())

    def manifest(self) -> CohortManifest:
        if self._manifest is None:
            m = self.config["manifest"]
            if not m:
                raise ConfigError("no manifest configured")
            if not Path(m).exists():
                raise ConfigError(f"manifest not found: {m}")
            self._manifest = load_manifest(m)
        return self._manifest

    def modalities(self) -> list[str]:
        mods = self.config["modalities"]
        present = list(self.manifest().modalities)
        if mods is None:
            return present
        mods = [mods] if isinstance(mods, str) else list(mods)
        missing = [m for m in mods if m not in present]
        if missing:
            raise ConfigError(f"modalities {missing} not in manifest (has {present})")
        return mods

    def context(self, modality: str) -> _Context:
        if modality not in self._contexts:
            sub = self.manifest().by_modality(modality)
            self._contexts[modality] = _Context(modality, sub, self.config.out_dir / modality, VolumeStore(sub))
        return self._contexts[modality]

    def split_of(self, ctx: _Context) -> SplitAssignment:
        if ctx._split is None:
            ctx._split = SplitAssignment.from_dict(self._read(ctx.path("split.json"), "split")["split"])
        return ctx._split

    def folds_of(self, ctx: _Context) -> FoldPlan:
        if ctx._folds is None:
            ctx._folds = FoldPlan.from_dict(self._read(ctx.path("folds.json"), "split")["folds"])
        return ctx._folds

    def stats_of(self, ctx: _Context) -> StandardizationStats:
        if ctx._stats is None:
            ctx._stats = StandardizationStats.from_dict(self._read(ctx.path("stats.json"), "split")["stats"])
        return ctx._stats

    def samples(self, ctx: _Context, view: str, partitions=("train", "val")):
        split = self.split_of(ctx)
        ids = [sid for p in partitions for sid in split.study_ids(ctx.manifest, p)]
        return ctx.store.samples(view, self.stats_of(ctx), ids)

    def init_for(self, arch: str, view: str) -> InitStrategy:
        init = self.config["init"]
        if init["kind"] == "random":
            return InitStrategy()
        explicit = (init.get("checkpoints") or {}).get(arch, {}).get(view)
        if explicit:
            return InitStrategy(init["kind"], explicit)
        if init.get("checkpoint_dir"):
            p = Path(init["checkpoint_dir"]) / f"{arch}_{view}.ckpt"
            if not p.exists():
                raise DependencyError("pretrain", str(p))
            return InitStrategy(init["kind"], str(p))
        raise ConfigError(f"{init['kind']} initialization needs a checkpoint for {arch}/{view}")

    def _init_inputs(self, init: InitStrategy) -> dict:
        return {"init_checkpoint": init.checkpoint} if init.checkpoint else {}

    # -- stages ------------------------------------------------------------

    def run(self, stage: str, **kw):
        if stage not in STAGES:
            raise ConfigError(f"unknown stage {stage!r}")
        return getattr(self, f"stage_{stage}")(**kw)

    def stage_ingest(self) -> Path:
        m = self.manifest()
        summary = {
            "studies": len(m),
            "manifest_digest": m.digest(),
            "modalities": {
                mod: {"studies": m.count(mod), "positives": m.positives(mod)} for mod in m.modalities
            },
            "sequences": sum(len(s.sequences) for s in m),
        }
        return self._write(self.config.out_dir / "ingest.json", summary, "ingest",
                           {"manifest": self.config["manifest"]})

    def stage_split(self) -> list[Path]:
        out = []
        for mod in self.modalities():
            ctx = self.context(mod)
            split = stratified_split(ctx.manifest, tuple(self.config["split"]["ratios"]), self.config.seed)
            report = validate_no_leakage(split, ctx.manifest)
            if not report.passed:
                raise InfeasibleSplitError(f"split leaks: {report.violations[:3]}")
            pool = train_val_pool(ctx.manifest, split)
            folds = make_folds(pool, int(self.config["cv"]["k"]), self.config.seed)
            train_ids = split.study_ids(ctx.manifest, "train")
            stats = ctx.store.fit_stats(train_ids)
            ctx._split, ctx._folds, ctx._stats = split, folds, stats
            counts = {p: {"studies": len(split.study_ids(ctx.manifest, p)),
                          "positives": sum(ctx.manifest.study(s).label for s in split.study_ids(ctx.manifest, p))}
                      for p in ("train", "val", "test")}
            inputs = {"manifest": self.config["manifest"]}
            out.append(self._write(ctx.path("split.json"), {"split": split.to_dict(), "counts": counts,
                                                            "leakage": report.to_dict()}, "split", inputs,
                                   manifest_digest=ctx.manifest.digest()))
            out.append(self._write(ctx.path("folds.json"), {"folds": folds.to_dict(), "digest": folds.digest()},
                                   "split", {"split": ctx.path("split.json")}))
            out.append(self._write(ctx.path("stats.json"), {"stats": stats.to_dict(), "fitted_on": train_ids},
                                   "split", {"split": ctx.path("split.json")}))
        return out

    def _train_budget(self, section: str, epochs: int | None = None) -> TrainBudget:
        c = self.config[section]
        return TrainBudget(int(epochs if epochs is not None else c["max_epochs"]), int(c["patience"]))

    def stage_tune(self, resume: bool = True) -> list[Path]:
        t = self.config["tune"]
        plan = plan_hyperband(int(t["R"]), int(t["eta"]), t.get("n_trials"))
        space = self.search_space_for_tune()
        augment = self.config.augment_policy()
        out = []
        for mod in self.modalities():
            ctx = self.context(mod)
            for view in self.config["views"]:
                data = self.samples(ctx, view)
                split = self.split_of(ctx)
                tr = [s for sid in split.study_ids(ctx.manifest, "train") for s in data.get(sid, [])]
                va = [s for sid in split.study_ids(ctx.manifest, "val") for s in data.get(sid, [])]
                for arch in self.config["architectures"]:
                    seed = derive_seed(self.config.seed, "tune", mod, view, arch)
                    init = self.init_for(arch, view)

                    def objective(hp: HyperParams, epochs: int, arch=arch, init=init, seed=seed) -> float:
                        model = build_model(arch, hp.dropout, init, seed)
                        res = train(model, tr, va, hp, TrainBudget(epochs, int(t["patience"])), seed,
                                    augment=augment)
                        return res.val_auc_at_best

                    ledger_path = ctx.path("tune", view, f"{arch}.ledger.jsonl")
                    if not resume and ledger_path.exists():
                        ledger_path.unlink()
                    ledger = run_hyperband(space, plan, objective, seed, TrialLedger.load(ledger_path))
                    best = best_trial(ledger)
                    payload = {
                        "view": view,
                        "modality": mod,
                        "architecture": arch,
                        "init": init.to_dict(),
                        "best": best.to_dict(),
                        "plan": plan.to_dict(),
                        "trials": len(ledger),
                        "failed": sum(r.status != "completed" for r in ledger),
                        "epochs_consumed": ledger.epochs_consumed,
                    }
                    inputs = {"split": ctx.path("split.json"), "stats": ctx.path("stats.json"), "ledger": ledger_path,
                              **self._init_inputs(init)}
                    out.append(self._write(ctx.path("tune", view, f"{arch}.best.json"), payload, "tune", inputs, seed))
        return out

    def search_space_for_tune(self) -> SearchSpace:
        return self.config.search_space()

    def best_hp(self, ctx: _Context, view: str, arch: str) -> HyperParams:
        d = self._read(ctx.path("tune", view, f"{arch}.best.json"), "tune")
        return HyperParams.from_dict(d["best"]["hp"])

    def stage_cv(self) -> list[Path]:
        augment = self.config.augment_policy()
        budget = self._train_budget("cv")
        out = []
        for mod in self.modalities():
            ctx = self.context(mod)
            folds = self.folds_of(ctx)
            for view in self.config["views"]:
                hps = {arch: self.best_hp(ctx, view, arch) for arch in self.config["architectures"]}
                data = self.samples(ctx, view)
                for arch, hp in hps.items():
                    seed = derive_seed(self.config.seed, "cv", mod, view, arch)
                    init = self.init_for(arch, view)
                    res = run_cv(folds, ctx.manifest, data, arch, hp, budget, seed, view=view, init=init,
                                 augment=augment)
                    inputs = {"folds": ctx.path("folds.json"), "stats": ctx.path("stats.json"),
                              "tune": ctx.path("tune", view, f"{arch}.best.json"), **self._init_inputs(init)}
                    out.append(self._write(ctx.path("cv", view, f"{arch}.json"),
                                           {"result": res.to_dict(), "hp": hp.to_dict(), "budget": vars(budget)},
                                           "cv", inputs, seed))
        return out

    def stage_select(self) -> list[Path]:
        out = []
        for mod in self.modalities():
            ctx = self.context(mod)
            for view in self.config["views"]:
                paths = {a: ctx.path("cv", view, f"{a}.json") for a in self.config["architectures"]}
                results = [CVResult.from_dict(self._read(p, "cv")["result"]) for p in paths.values()]
                digests = {r.plan_digest for r in results}
                if len(digests) > 1:
                    raise ConfigError(f"{mod}/{view}: CV results come from different fold plans")
                decision = select_architecture(results)
                out.append(self._write(ctx.path("select", f"{view}.json"), {"decision": decision.to_dict()},
                                       "select", {f"cv_{a}": p for a, p in paths.items()}))
        return out

    def stage_retrain(self) -> list[ModelBundle]:
        augment = self.config.augment_policy()
        budget = self._train_budget("retrain")
        bundles = []
        for mod in self.modalities():
            ctx = self.context(mod)
            for view in self.config["views"]:
                sel_path = ctx.path("select", f"{view}.json")
                decision = SelectionDecision.from_dict(self._read(sel_path, "select")["decision"])
                hp = self.best_hp(ctx, view, decision.architecture)
                seed = derive_seed(self.config.seed, "retrain", mod, view)
                init = self.init_for(decision.architecture, view)
                inputs = {"select": sel_path, "split": ctx.path("split.json"), "stats": ctx.path("stats.json"),
                          "tune": ctx.path("tune", view, f"{decision.architecture}.best.json"),
                          **self._init_inputs(init)}
                prov = self.provenance("retrain", inputs, seed)
                bundle = retrain_final(decision, self.split_of(ctx), ctx.manifest, self.samples(ctx, view), hp,
                                       ctx.path("retrain"), budget, seed, init=init, augment=augment,
                                       provenance=prov)
                bundle.provenance["inputs"]["checkpoint"] = file_sha256(bundle.checkpoint)
                bundle.save(ctx.path("retrain", f"{view}.bundle.json"))
                bundles.append(bundle)
        return bundles

    def bundle(self, ctx: _Context, view: str) -> ModelBundle:
        p = ctx.path("retrain", f"{view}.bundle.json")
        if not p.exists():
            raise DependencyError("retrain", str(p))
        b = ModelBundle.read(p)
        if not Path(b.checkpoint).exists():
            raise DependencyError("retrain", b.checkpoint)
        return b

    def predict(self, ctx: _Context, manifest: CohortManifest, store: VolumeStore, study_ids, models) -> list:
        stats = self.stats_of(ctx)
        preds = []
        for sid in study_ids:
            study = manifest.study(sid)
            seq_probs = {}
            for view, model in models.items():
                vols = store.standardized(sid, view, stats)
                if vols:
                    seq_probs[view] = [forward_scan(model, v) for v in vols]
            preds.append(aggregate_scan(seq_probs, sid, study.label, expected_views=tuple(models)))
        return preds

    def stage_evaluate(self) -> list[Path]:
        ev = self.config["evaluate"]
        out = []
        for mod in self.modalities():
            ctx = self.context(mod)
            bundles = {view: self.bundle(ctx, view) for view in self.config["views"]}
            split = self.split_of(ctx)
            models = {view: b.load() for view, b in bundles.items()}
            val = self.predict(ctx, ctx.manifest, ctx.store, split.study_ids(ctx.manifest, "val"), models)
            test = self.predict(ctx, ctx.manifest, ctx.store, split.study_ids(ctx.manifest, "test"), models)
            threshold = calibrate_threshold([(p.ensemble, p.label) for p in val])
            seed = derive_seed(self.config.seed, "evaluate", mod)
            inputs = {"split": ctx.path("split.json"), "stats": ctx.path("stats.json"),
                      **{f"bundle_{v}": ctx.path("retrain", f"{v}.bundle.json") for v in bundles},
                      **{f"checkpoint_{v}": b.checkpoint for v, b in bundles.items()}}
            thr_path = self._write(ctx.path("evaluate", "thresholds.json"),
                                   {"modality": mod, "threshold": threshold, "calibrated_on": "val"},
                                   "evaluate", inputs, seed)
            iters = int(ev["bootstrap_iterations"])
            workers = int(self.config["workers"])
            sets = {"test": test}
            if ev.get("external_manifest"):
                ext = load_manifest(ev["external_manifest"]).by_modality(mod)
                sets["external"] = self.predict(ctx, ext, VolumeStore(ext), [s.study_id for s in ext], models)
                inputs["external_manifest"] = ev["external_manifest"]
            reports = {}
            for name, preds in sets.items():
                probs = [p.ensemble for p in preds]
                labels = [p.label for p in preds]
                rep = evaluate_predictions(probs, labels, threshold, f"{mod}.{name}", iters, seed, workers)
                per_view = {}
                for view in bundles:
                    vp = [(p.view_probs[view], p.label) for p in preds if view in p.view_probs]
                    per_view[view] = evaluate_predictions([a for a, _ in vp], [b for _, b in vp], threshold,
                                                          f"{mod}.{name}.{view}", 0).to_dict()
                reports[name] = {"ensemble": rep.to_dict(), "per_view": per_view}
                write_roc_csv(probs, labels, ctx.path("evaluate", f"roc_{name}.csv"))
                if ev.get("plot"):
                    plot_roc({f"{mod} {name}": (probs, labels)}, ctx.path("evaluate", f"roc_{name}.png"),
                             rep.bootstrap)
            inputs["thresholds"] = thr_path
            out.append(self._write(ctx.path("evaluate", "predictions.json"),
                                   {"val": [p.to_dict() for p in val],
                                    **{k: [p.to_dict() for p in v] for k, v in sets.items()}},
                                   "evaluate", inputs, seed))
            out.append(self._write(ctx.path("evaluate", "report.json"),
                                   {"modality": mod, "threshold": threshold,
                                    "architectures": {v: b.architecture for v, b in bundles.items()},
                                    "reports": reports},
                                   "evaluate", inputs, seed))
        return out

    def stage_gradcam(self, study: str | None = None, view: str | None = None, slice_index: int | None = None,
                      out: str | Path | None = None, sequence: int | None = None) -> Path:
        g = self.config["gradcam"]
        study = study or g["study"]
        view = view or g["view"]
        slice_index = g["slice"] if slice_index is None else slice_index
        sequence = int(g.get("sequence") or 0) if sequence is None else sequence
        if study is None or view is None or slice_index is None:
            raise ConfigError("gradcam needs study, view and slice")
        rec = self.manifest().study(study)
        ctx = self.context(rec.modality)
        bundle = self.bundle(ctx, view)
        vols = ctx.store.standardized(study, view, self.stats_of(ctx))
        if not 0 <= sequence < len(vols):
            raise ConfigError(f"study {study} has {len(vols)} {view} sequences; index {sequence} is out of range")
        v = vols[sequence]
        heat = gradcam(bundle, v, int(slice_index), study_id=study, view=view)
        out = Path(out or g["out"] or ctx.path("gradcam", f"{study}_{view}_{slice_index}.png"))
        overlay(heat, v.voxels[int(slice_index)], out)
        side = out.with_suffix(".json")
        meta = json.loads(side.read_text())
        meta["sequence"] = {"index": sequence, "sequence_type": v.sequence_type, "fat_sat": v.fat_sat}
        meta["provenance"] = self.provenance("gradcam", {"bundle": ctx.path("retrain", f"{view}.bundle.json"),
                                                         "checkpoint": bundle.checkpoint})
        side.write_text(json.dumps(meta, indent=2, sort_keys=True))
        return out

    def stage_pretrain(self, profile: str | Path | None = None) -> Path:
        from .pretrain import PretrainProfile, run_pretrain, screen_architectures

        profile = profile or self.config["pretrain"]["profile"]
        if not profile:
            raise ConfigError("pretrain needs a profile file")
        prof = PretrainProfile.from_file(profile)
        archs = list(prof.architectures or self.config["architectures"])
        out_dir = self.config.out_dir / "pretrain"
        results = [run_pretrain(prof, a, None, out_dir) for a in archs]
        screen = {r.architecture: r.screen_auc for r in results}
        top = None
        if len(results) >= prof.top_k:
            top = screen_architectures(results, prof.views[0], prof.top_k)
        inputs = {"profile": profile, "corpus": prof.corpus_manifest,
                  **{f"{r.architecture}_{v}": c for r in results for v, c in r.checkpoints.items()}}
        return self._write(out_dir / "screen.json",
                           {"profile": prof.to_dict(), "effective_config": prof.effective_config(),
                            "screen_auc": screen, "screen_dataset": results[0].screen_dataset,
                            "top_k": top, "results": [r.to_dict() for r in results]},
                           "pretrain", inputs, prof.seed)

    def stage_synth(self, out_dir: str | Path | None = None) -> CohortManifest:
        s = dict(self.config["synth"])
        target = Path(out_dir or s.pop("out_dir", None) or self.config.out_dir / "synthetic")
        s.pop("out_dir", None)
        for key in ("views", "lesion_radii", "lesion_center"):
            if s.get(key) is not None:
                s[key] = tuple(s[key])
        s.setdefault("seed", self.config.seed)
        try:
            spec = SyntheticSpec(**s)
        except TypeError as exc:
            raise ConfigError(f"bad synth settings: {exc}") from exc
        manifest = generate_synthetic(spec, target)
        self._write(target / "synth.json", {"spec": spec.to_dict(), "studies": len(manifest),
                                            "positives": manifest.positives()},
                    "synth", {"manifest": target / "manifest.csv"}, spec.seed)
        return manifest


def run_pipeline(config: RunConfig, stage: str, **kw):
    """Execute one stage of ``config``; see :data:`STAGES`."""
    return Pipeline(config).run(stage, **kw)


def run_all(config: RunConfig, stages=("split", "tune", "cv", "select", "retrain", "evaluate")) -> Pipeline:
    p = Pipeline(config)
    for stage in stages:
        p.run(stage)
    return p
