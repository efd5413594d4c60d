"""Cohort data model, manifest ingestion, and shoulder-level splitting.

The unit of every split is the shoulder: all sequences (and views) of one
shoulder always land in the same partition or fold. Splits operate on a single
modality at a time.
"""

from __future__ import annotations

import csv
import hashlib
import json
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    DanglingReferenceError,
    InfeasibleSplitError,
    LeakageReferenceError,
    ManifestError,
)

VIEWS = ("sagittal", "axial", "coronal")
MODALITIES = ("standard_mri", "mra")
SEQUENCE_TYPES = ("T1", "T2", "MERGE", "PD", "STIR")
PARTITIONS = ("train", "val", "test")
DEFAULT_RATIOS = (0.70, 0.10, 0.20)

MANIFEST_COLUMNS = (
    "study_id",
    "patient_id",
    "shoulder_id",
    "modality",
    "label",
    "view",
    "sequence_type",
    "fat_sat",
    "volume_path",
)

_TRUE = {"1", "true", "yes", "y", "t"}
_FALSE = {"0", "false", "no", "n", "f", ""}


@dataclass(frozen=True)
class SequenceRef:
    view: str
    sequence_type: str
    fat_sat: bool
    path: str

    @property
    def key(self) -> tuple[str, bool]:
        return (self.sequence_type, self.fat_sat)


@dataclass(frozen=True)
class StudyRecord:
    study_id: str
    patient_id: str
    shoulder_id: str
    modality: str
    label: int
    sequences: tuple[SequenceRef, ...] = ()

    def views(self) -> tuple[str, ...]:
        return tuple(v for v in VIEWS if any(s.view == v for s in self.sequences))

    def sequences_for(self, view: str) -> tuple[SequenceRef, ...]:
        return tuple(s for s in self.sequences if s.view == view)


@dataclass(frozen=True)
class CohortManifest:
    studies: tuple[StudyRecord, ...]
    root: Path | None = None

    def __len__(self) -> int:
        return len(self.studies)

    def __iter__(self):
        return iter(self.studies)

    @property
    def modalities(self) -> tuple[str, ...]:
        return tuple(m for m in MODALITIES if any(s.modality == m for s in self.studies))

    def count(self, modality: str | None = None) -> int:
        return sum(1 for s in self.studies if modality is None or s.modality == modality)

    def positives(self, modality: str | None = None) -> int:
        return sum(s.label for s in self.studies if modality is None or s.modality == modality)

    def positive_fraction(self) -> float:
        return self.positives() / len(self.studies) if self.studies else 0.0

    def by_modality(self, modality: str) -> "CohortManifest":
        return CohortManifest(tuple(s for s in self.studies if s.modality == modality), self.root)

    def subset(self, study_ids: Iterable[str]) -> "CohortManifest":
        keep = set(study_ids)
        return CohortManifest(tuple(s for s in self.studies if s.study_id in keep), self.root)

    def study(self, study_id: str) -> StudyRecord:
        for s in self.studies:
            if s.study_id == study_id:
                return s
        raise KeyError(study_id)

    def shoulders(self) -> dict[str, list[StudyRecord]]:
        out: dict[str, list[StudyRecord]] = defaultdict(list)
        for s in self.studies:
            out[s.shoulder_id].append(s)
        return dict(out)

    def resolve(self, ref: SequenceRef) -> Path:
        p = Path(ref.path)
        if not p.is_absolute() and self.root is not None:
            p = self.root / p
        return p

    def digest(self) -> str:
        h = hashlib.sha256()
        for s in sorted(self.studies, key=lambda s: s.study_id):
            h.update(f"{s.study_id}|{s.shoulder_id}|{s.modality}|{s.label}".encode())
            for q in s.sequences:
                h.update(f"|{q.view}:{q.sequence_type}:{int(q.fat_sat)}:{q.path}".encode())
        return h.hexdigest()


def _parse_bool(raw: str, row: int, name: str) -> bool:
    v = raw.strip().lower()
    if v in _TRUE:
        return True
    if v in _FALSE:
        return False
    raise ManifestError(f"expected boolean, got {raw!r}", row=row, field=name)


def load_manifest(
    path: str | Path, *, check_files: bool = True, label_column: str = "label"
) -> CohortManifest:
    """Read and validate a one-row-per-sequence manifest CSV.

    ``label_column`` lets a corpus carry its target under another name (for
    example ``abnormal``); it takes the place of ``label`` in the header.
    Relative volume paths resolve against the manifest's directory.
    """
    path = Path(path)
    expected = tuple(label_column if c == "label" else c for c in MANIFEST_COLUMNS)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        header = tuple(h.strip() for h in (reader.fieldnames or ()))
        missing = [c for c in expected if c not in header]
        if missing:
            raise ManifestError(f"header missing columns {missing}", row=1)
        rows = list(reader)

    studies: dict[str, dict] = {}
    seen_paths: dict[tuple[str, str], int] = {}
    order: list[str] = []
    root = path.parent
    for i, raw in enumerate(rows, start=2):
        r = {k.strip(): (v or "").strip() for k, v in raw.items() if k is not None}
        for name in ("study_id", "patient_id", "shoulder_id", "volume_path"):
            if not r.get(name):
                raise ManifestError("empty value", row=i, field=name)
        if r["modality"] not in MODALITIES:
            raise ManifestError(f"unknown modality {r['modality']!r}", row=i, field="modality")
        if r[label_column] not in ("0", "1"):
            raise ManifestError(f"label must be 0 or 1, got {r[label_column]!r}", row=i, field=label_column)
        if r["view"] not in VIEWS:
            raise ManifestError(f"unknown view {r['view']!r}", row=i, field="view")
        if r["sequence_type"] not in SEQUENCE_TYPES:
            raise ManifestError(
                f"unknown sequence type {r['sequence_type']!r}", row=i, field="sequence_type"
            )
        fat_sat = _parse_bool(r["fat_sat"], i, "fat_sat")
        seq = SequenceRef(r["view"], r["sequence_type"], fat_sat, r["volume_path"])
        if check_files:
            p = Path(seq.path)
            p = p if p.is_absolute() else root / p
            if not p.exists():
                raise DanglingReferenceError(f"volume file not found: {p}", row=i, field="volume_path")

        sid = r["study_id"]
        core = (r["patient_id"], r["shoulder_id"], r["modality"], int(r[label_column]))
        if (sid, seq.path) in seen_paths:
            raise ManifestError(
                f"duplicate study_id {sid!r} with the same volume (first at row {seen_paths[(sid, seq.path)]})",
                row=i,
                field="study_id",
            )
        seen_paths[(sid, seq.path)] = i
        if sid in studies:
            if studies[sid]["core"] != core:
                raise ManifestError(
                    f"duplicate study_id {sid!r} with conflicting study fields", row=i, field="study_id"
                )
            studies[sid]["seqs"].append(seq)
        else:
            studies[sid] = {"core": core, "seqs": [seq], "row": i}
            order.append(sid)

    records = []
    owner: dict[tuple[str, str], str] = {}
    for sid in order:
        patient, shoulder, modality, label = studies[sid]["core"]
        prev = owner.setdefault((modality, shoulder), sid)
        if prev != sid:
            raise ManifestError(
                f"shoulder {shoulder!r} already used by study {prev!r} in modality {modality}",
                row=studies[sid]["row"],
                field="shoulder_id",
            )
        records.append(StudyRecord(sid, patient, shoulder, modality, label, tuple(studies[sid]["seqs"])))
    return CohortManifest(tuple(records), root)


def write_manifest(manifest: CohortManifest | Iterable[StudyRecord], path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(MANIFEST_COLUMNS)
        for s in manifest:
            for q in s.sequences:
                w.writerow(
                    [s.study_id, s.patient_id, s.shoulder_id, s.modality, s.label,
                     q.view, q.sequence_type, int(q.fat_sat), q.path]
                )
    return path


# ---------------------------------------------------------------------------
# splitting
# ---------------------------------------------------------------------------


def _largest_remainder(total: int, weights: Sequence[float]) -> list[int]:
    """Integer apportionment of ``total`` proportional to ``weights``.

    Ties on the remainder go to the lower index.
    """
    wsum = float(sum(weights))
    quotas = [total * w / wsum if wsum > 0 else 0.0 for w in weights]
    counts = [int(np.floor(q + 1e-12)) for q in quotas]
    left = total - sum(counts)
    order = sorted(range(len(weights)), key=lambda i: (-(quotas[i] - counts[i]), i))
    for i in order[:left]:
        counts[i] += 1
    return counts


def _single_modality(studies: Sequence[StudyRecord]) -> str | None:
    mods = {s.modality for s in studies}
    if len(mods) > 1:
        raise ValueError(f"split operations take one modality at a time, got {sorted(mods)}")
    return next(iter(mods), None)


def _shoulder_units(studies: Sequence[StudyRecord]) -> tuple[list[str], list[str]]:
    """Sorted positive and negative shoulder ids."""
    label_of: dict[str, int] = {}
    for s in studies:
        if label_of.setdefault(s.shoulder_id, s.label) != s.label:
            raise ManifestError(f"shoulder {s.shoulder_id!r} carries conflicting labels")
    pos = sorted(k for k, v in label_of.items() if v == 1)
    neg = sorted(k for k, v in label_of.items() if v == 0)
    return pos, neg


def _deal(ids: list[str], counts: Sequence[int], rng: np.random.Generator) -> list[list[str]]:
    perm = [ids[i] for i in rng.permutation(len(ids))]
    out, start = [], 0
    for c in counts:
        out.append(sorted(perm[start : start + c]))
        start += c
    return out


@dataclass(frozen=True)
class SplitAssignment:
    """shoulder_id -> partition.

    Keys may also be study ids or ``"<study_id>/<view>"`` for hand-built
    assignments; :func:`validate_no_leakage` resolves the most specific key.
    """

    partition_of: Mapping[str, str]
    ratios: tuple[float, float, float] = DEFAULT_RATIOS
    seed: int = 0
    modality: str | None = None

    def members(self, partition: str) -> list[str]:
        return sorted(k for k, v in self.partition_of.items() if v == partition)

    def study_ids(self, manifest: CohortManifest, partition: str) -> list[str]:
        return [
            s.study_id
            for s in manifest
            if self.partition_of.get(s.shoulder_id, self.partition_of.get(s.study_id)) == partition
        ]

    def to_dict(self) -> dict:
        return {
            "kind": "split",
            "modality": self.modality,
            "ratios": list(self.ratios),
            "seed": self.seed,
            "partition_of": dict(sorted(self.partition_of.items())),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: Mapping) -> "SplitAssignment":
        return cls(dict(d["partition_of"]), tuple(d["ratios"]), int(d["seed"]), d.get("modality"))


@dataclass(frozen=True)
class FoldPlan:
    k: int
    fold_of: Mapping[str, int]
    seed: int = 0
    modality: str | None = None
    source: tuple[str, ...] = ("train", "val")

    def fold_members(self, fold: int) -> list[str]:
        return sorted(s for s, f in self.fold_of.items() if f == fold)

    def study_ids(self, manifest: CohortManifest, fold: int, *, holdout: bool) -> list[str]:
        """Studies of ``fold`` (holdout=True) or of every other fold."""
        out = []
        for s in manifest:
            f = self.fold_of.get(s.shoulder_id)
            if f is None:
                continue
            if (f == fold) == holdout:
                out.append(s.study_id)
        return out

    def digest(self) -> str:
        return hashlib.sha256(self.to_json().encode()).hexdigest()

    def to_dict(self) -> dict:
        return {
            "kind": "folds",
            "k": self.k,
            "seed": self.seed,
            "modality": self.modality,
            "source": list(self.source),
            "fold_of": dict(sorted(self.fold_of.items())),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: Mapping) -> "FoldPlan":
        return cls(int(d["k"]), {k: int(v) for k, v in d["fold_of"].items()}, int(d["seed"]),
                   d.get("modality"), tuple(d.get("source", ("train", "val"))))


def stratified_split(
    manifest: CohortManifest, ratios: Sequence[float] = DEFAULT_RATIOS, seed: int = 0
) -> SplitAssignment:
    """Shoulder-level stratified train/val/test split.

    Partition sizes come from a largest-remainder apportionment of the shoulder
    count; positives are then apportioned in proportion to those sizes, so each
    partition's positive fraction is within one member of the global fraction.
    """
    ratios = tuple(float(r) for r in ratios)
    if len(ratios) != 3 or any(r < 0 for r in ratios) or abs(sum(ratios) - 1.0) > 1e-9:
        raise ValueError(f"ratios must be three nonnegative values summing to 1, got {ratios}")
    modality = _single_modality(manifest.studies)
    pos, neg = _shoulder_units(manifest.studies)
    n = len(pos) + len(neg)
    sizes = _largest_remainder(n, ratios)
    pos_counts = _largest_remainder(len(pos), sizes)
    neg_counts = [s - p for s, p in zip(sizes, pos_counts)]
    for part, r, p, q in zip(PARTITIONS, ratios, pos_counts, neg_counts):
        if r > 0 and (p < 1 or q < 1):
            raise InfeasibleSplitError(
                f"cannot stratify: partition '{part}' would get {p} positive and {q} negative shoulders"
            )
    rng = np.random.default_rng(seed)
    assignment: dict[str, str] = {}
    for group, counts in ((pos, pos_counts), (neg, neg_counts)):
        for part, ids in zip(PARTITIONS, _deal(group, counts, rng)):
            for sid in ids:
                assignment[sid] = part
    return SplitAssignment(assignment, ratios, int(seed), modality)


def make_folds(pool: Sequence[StudyRecord] | CohortManifest, k: int = 8, seed: int = 0) -> FoldPlan:
    """Stratified k-fold plan over the recombined train+val shoulders."""
    studies = list(pool)
    if k < 2:
        raise ValueError("k must be at least 2")
    modality = _single_modality(studies)
    pos, neg = _shoulder_units(studies)
    if len(pos) < k or len(neg) < k:
        raise InfeasibleSplitError(
            f"cannot build {k} stratified folds from {len(pos)} positive / {len(neg)} negative shoulders"
        )
    n = len(pos) + len(neg)
    sizes = _largest_remainder(n, [1.0] * k)
    pos_counts = _largest_remainder(len(pos), sizes)
    neg_counts = [s - p for s, p in zip(sizes, pos_counts)]
    rng = np.random.default_rng(seed)
    fold_of: dict[str, int] = {}
    for group, counts in ((pos, pos_counts), (neg, neg_counts)):
        for f, ids in enumerate(_deal(group, counts, rng)):
            for sid in ids:
                fold_of[sid] = f
    return FoldPlan(k, fold_of, int(seed), modality)


# ---------------------------------------------------------------------------
# leakage
# ---------------------------------------------------------------------------


@dataclass
class LeakageReport:
    violations: list[dict] = field(default_factory=list)
    unassigned: list[str] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return not self.violations

    def __len__(self) -> int:
        return len(self.violations)

    def to_dict(self) -> dict:
        return {"passed": self.passed, "violations": self.violations, "unassigned": self.unassigned}


def validate_no_leakage(split: SplitAssignment | FoldPlan, manifest: CohortManifest) -> LeakageReport:
    """List every shoulder whose sequences span more than one partition or fold."""
    mapping = split.partition_of if isinstance(split, SplitAssignment) else split.fold_of
    shoulders = {s.shoulder_id for s in manifest}
    studies = {s.study_id for s in manifest}
    seq_keys = {f"{s.study_id}/{q.view}" for s in manifest for q in s.sequences}
    unknown = [k for k in mapping if k not in shoulders and k not in studies and k not in seq_keys]
    if unknown:
        raise LeakageReferenceError(f"split references ids not in the manifest: {sorted(unknown)[:5]}")

    spans: dict[str, set] = defaultdict(set)
    unassigned = []
    for s in manifest:
        for q in s.sequences:
            for key in (f"{s.study_id}/{q.view}", s.study_id, s.shoulder_id):
                if key in mapping:
                    spans[s.shoulder_id].add(mapping[key])
                    break
            else:
                unassigned.append(f"{s.study_id}/{q.view}")
    report = LeakageReport(unassigned=sorted(set(unassigned)))
    for shoulder in sorted(spans):
        if len(spans[shoulder]) > 1:
            report.violations.append(
                {"shoulder_id": shoulder, "partitions": sorted(spans[shoulder], key=str)}
            )
    return report


def train_val_pool(manifest: CohortManifest, split: SplitAssignment) -> list[StudyRecord]:
    keep = set(split.study_ids(manifest, "train")) | set(split.study_ids(manifest, "val"))
    return [s for s in manifest if s.study_id in keep]
