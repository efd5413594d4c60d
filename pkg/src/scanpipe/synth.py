"""Synthetic cohorts with planted ellipsoid lesions, for desk-scale end-to-end runs."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from pathlib import Path

import numpy as np

from .cohort import VIEWS, CohortManifest, SequenceRef, StudyRecord, load_manifest, write_manifest
from .errors import SyntheticSpecError
from .preprocess import CROP_SIZE, RESIZE_TARGET, SequenceVolume, crop_offsets, write_volume

VIEW_SEQUENCES = {
    "sagittal": [("T1", False), ("T2", True)],
    "axial": [("PD", True), ("MERGE", False)],
    "coronal": [("T2", True), ("STIR", False)],
}
SEQUENCE_SCALE = {"T1": 900.0, "T2": 600.0, "PD": 1200.0, "MERGE": 400.0, "STIR": 300.0}


@dataclass(frozen=True)
class SyntheticSpec:
    n_studies: int = 60
    positive_fraction: float = 0.3
    views: tuple[str, ...] = VIEWS
    n_slices: int = 12
    height: int = 160
    width: int = 160
    sequences_per_view: int = 1
    lesion_radii: tuple[float, float, float] = (2.5, 9.0, 9.0)  # slices, rows, cols (raw voxels)
    lesion_delta: float = 0.9
    noise: float = 0.03
    modality: str = "mra"
    seed: int = 0
    lesion_center: tuple[float, float] | None = None  # fixed (row, col) in raw voxels

    def validate(self) -> None:
        if not 0.0 < self.positive_fraction < 1.0:
            raise SyntheticSpecError(f"positive fraction must lie in (0, 1), got {self.positive_fraction}")
        n_pos = round(self.n_studies * self.positive_fraction)
        if self.n_studies < 2 or not 0 < n_pos < self.n_studies:
            raise SyntheticSpecError("cohort needs at least one positive and one negative study")
        if any(v not in VIEWS for v in self.views) or not self.views:
            raise SyntheticSpecError(f"views must be drawn from {VIEWS}")
        if not 1 <= self.sequences_per_view <= 2:
            raise SyntheticSpecError("sequences_per_view must be 1 or 2")
        rs, rr, rc = self.lesion_radii
        if self.n_slices < 1 or 2 * rs + 1 > self.n_slices + 1e-9:
            raise SyntheticSpecError("lesion does not fit in the slice stack")
        (r0, r1), (c0, c1) = crop_window(self.height, self.width)
        if r1 - r0 < 2 * rr + 2 or c1 - c0 < 2 * rc + 2:
            raise SyntheticSpecError("lesion does not fit inside the crop region")
        if self.lesion_center is not None:
            cr, cc = self.lesion_center
            if not (r0 + rr <= cr <= r1 - rr and c0 + rc <= cc <= c1 - rc):
                raise SyntheticSpecError("lesion centre places the lesion outside the crop region")

    def to_dict(self) -> dict:
        return asdict(self)


def crop_window(height: int, width: int) -> tuple[tuple[float, float], tuple[float, float]]:
    """Raw-voxel row/col intervals that survive resize-to-400 then centre crop."""
    top, left = crop_offsets(RESIZE_TARGET, RESIZE_TARGET, CROP_SIZE)
    sy, sx = height / RESIZE_TARGET, width / RESIZE_TARGET
    return ((top * sy, (top + CROP_SIZE) * sy), (left * sx, (left + CROP_SIZE) * sx))


def raw_to_crop(coord: float, raw_len: int) -> float:
    """Map a raw pixel coordinate to the preprocessed (224) frame."""
    top = crop_offsets(RESIZE_TARGET, RESIZE_TARGET, CROP_SIZE)[0]
    return (coord + 0.5) * RESIZE_TARGET / raw_len - 0.5 - top


def lesion_box(meta: dict, raw_shape: tuple[int, int, int]) -> tuple[int, int, int, int] | None:
    """In-plane lesion bounding box (top, left, bottom, right) in the 224 frame."""
    les = meta.get("lesion")
    if not les:
        return None
    _, h, w = raw_shape
    (cr, cc), (rr, rc) = les["center"][1:], les["radii"][1:]
    top = int(np.floor(raw_to_crop(cr - rr, h)))
    bottom = int(np.ceil(raw_to_crop(cr + rr, h))) + 1
    left = int(np.floor(raw_to_crop(cc - rc, w)))
    right = int(np.ceil(raw_to_crop(cc + rc, w))) + 1
    return (max(top, 0), max(left, 0), min(bottom, CROP_SIZE), min(right, CROP_SIZE))


def _anatomy(rng: np.random.Generator, n: int, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    base = np.zeros((h, w))
    for _ in range(4):
        cy, cx = rng.uniform(0.15, 0.85) * h, rng.uniform(0.15, 0.85) * w
        sig = rng.uniform(0.15, 0.3) * min(h, w)
        base += rng.uniform(0.15, 0.35) * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * sig**2))
    base += 0.1 * (yy / h) + 0.1
    drift = 1.0 + 0.05 * np.sin(np.linspace(0, np.pi, n))[:, None, None]
    return base[None] * drift


def _lesion(n, h, w, center, radii, delta) -> np.ndarray:
    zz, yy, xx = np.mgrid[0:n, 0:h, 0:w].astype(np.float64)
    d2 = sum(((g - c) / r) ** 2 for g, c, r in zip((zz, yy, xx), center, radii))
    return delta * np.clip(1.0 - d2, 0.0, None)


def generate_synthetic(spec: SyntheticSpec, out_dir: str | Path) -> CohortManifest:
    """Write volumes and ``manifest.csv`` under ``out_dir``; return the loaded manifest."""
    spec.validate()
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(spec.seed)
    n_pos = round(spec.n_studies * spec.positive_fraction)
    labels = np.zeros(spec.n_studies, dtype=int)
    labels[rng.permutation(spec.n_studies)[:n_pos]] = 1
    (r0, r1), (c0, c1) = crop_window(spec.height, spec.width)
    rs, rr, rc = spec.lesion_radii

    studies = []
    for i in range(spec.n_studies):
        sid, pid = f"S{i:04d}", f"P{i:04d}"
        label = int(labels[i])
        seqs = []
        for view in spec.views:
            for j, (stype, fs) in enumerate(VIEW_SEQUENCES[view][: spec.sequences_per_view]):
                vrng = np.random.default_rng([spec.seed, i, VIEWS.index(view), j])
                vol = _anatomy(vrng, spec.n_slices, spec.height, spec.width)
                meta = {"study_id": sid}
                if label:
                    if spec.lesion_center is not None:
                        cr, cc = spec.lesion_center
                    else:
                        cr = vrng.uniform(r0 + rr + 1, r1 - rr - 1)
                        cc = vrng.uniform(c0 + rc + 1, c1 - rc - 1)
                    cz = (spec.n_slices - 1) / 2.0
                    vol = vol + _lesion(spec.n_slices, spec.height, spec.width, (cz, cr, cc), spec.lesion_radii,
                                        spec.lesion_delta)
                    meta["lesion"] = {"center": [cz, cr, cc], "radii": [rs, rr, rc], "delta": spec.lesion_delta}
                vol = vol + vrng.normal(0.0, spec.noise, vol.shape)
                vol = (vol * SEQUENCE_SCALE[stype]).astype(np.float32)
                rel = Path("volumes") / f"{sid}_{view}_{stype}{'_fs' if fs else ''}.f32"
                write_volume(SequenceVolume(vol, view, stype, fs, "raw", None, meta), out_dir / rel)
                seqs.append(SequenceRef(view, stype, fs, rel.as_posix()))
        studies.append(StudyRecord(sid, pid, f"{pid}-R", spec.modality, label, tuple(seqs)))
    write_manifest(studies, out_dir / "manifest.csv")
    return load_manifest(out_dir / "manifest.csv")
