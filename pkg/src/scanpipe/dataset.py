"""Manifest-backed loading of preprocessed sequences into training samples."""

from __future__ import annotations

from dataclasses import replace
from typing import Iterable

from .cohort import CohortManifest, StudyRecord
from .preprocess import (
    SequenceVolume,
    StandardizationStats,
    apply_standardization,
    fit_standardization,
    preprocess,
    read_volume,
)
from .training import Sample


class VolumeStore:
    """Reads each referenced volume once and keeps its cropped form in memory."""

    def __init__(self, manifest: CohortManifest):
        self.manifest = manifest
        self._cropped: dict[str, SequenceVolume] = {}

    def cropped(self, study: StudyRecord, ref) -> SequenceVolume:
        path = self.manifest.resolve(ref)
        key = str(path)
        if key not in self._cropped:
            v = read_volume(path)
            meta = dict(v.meta)
            meta.setdefault("study_id", study.study_id)
            v = replace(v, meta=meta)
            self._cropped[key] = preprocess(v)
        return self._cropped[key]

    def fit_stats(self, train_ids: Iterable[str]) -> StandardizationStats:
        """Standardization statistics over every sequence of the given (training) studies."""
        vols = []
        for sid in train_ids:
            study = self.manifest.study(sid)
            for ref in study.sequences:
                vols.append(replace(self.cropped(study, ref), partition="train"))
        return fit_standardization(vols)

    def standardized(self, study_id: str, view: str, stats: StandardizationStats) -> list[SequenceVolume]:
        study = self.manifest.study(study_id)
        return [
            apply_standardization(self.cropped(study, ref), stats)
            for ref in study.sequences_for(view)
        ]

    def samples(
        self, view: str, stats: StandardizationStats, study_ids: Iterable[str] | None = None
    ) -> dict[str, list[Sample]]:
        """Study id -> standardized samples of that study's sequences in ``view``."""
        ids = list(study_ids) if study_ids is not None else [s.study_id for s in self.manifest]
        out: dict[str, list[Sample]] = {}
        for sid in ids:
            label = self.manifest.study(sid).label
            seqs = self.standardized(sid, view, stats)
            if seqs:
                out[sid] = [Sample(sid, v.voxels, label) for v in seqs]
        return out
