"""Volume container, on-disk format, and the normalization/augmentation chain.

Chain per sequence: resize each slice to 400x400, center-crop to 224x224,
z-score with the training statistics of its (sequence type, fat-sat) key,
then min-max rescale the volume to [0, 1]. Training volumes are additionally
expanded by random rigid augmentation.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
import torch
import torch.nn.functional as F

from .errors import (
    CropError,
    DegenerateStatsError,
    PartitionLeakError,
    ShapeError,
    UnknownSequenceTypeError,
)

STAGES = ("raw", "resized", "cropped", "standardized", "augmented")
RESIZE_TARGET = 400
CROP_SIZE = 224


@dataclass(frozen=True, eq=False)
class SequenceVolume:
    voxels: np.ndarray
    view: str
    sequence_type: str
    fat_sat: bool = False
    stage: str = "raw"
    partition: str | None = None
    meta: Mapping = field(default_factory=dict)

    def __post_init__(self):
        if self.voxels.ndim != 3:
            raise ShapeError(f"expected a 3D (slices, height, width) array, got shape {self.voxels.shape}")
        if self.stage not in STAGES:
            raise ValueError(f"unknown stage {self.stage!r}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return tuple(self.voxels.shape)

    @property
    def key(self) -> tuple[str, bool]:
        return (self.sequence_type, bool(self.fat_sat))

    def with_voxels(self, voxels: np.ndarray, stage: str) -> "SequenceVolume":
        return replace(self, voxels=voxels, stage=stage)


def key_name(key: tuple[str, bool]) -> str:
    return f"{key[0]}+fs" if key[1] else key[0]


def parse_key(name: str) -> tuple[str, bool]:
    return (name[:-3], True) if name.endswith("+fs") else (name, False)


# ---------------------------------------------------------------------------
# on-disk container: little-endian float32 blob + JSON sidecar
# ---------------------------------------------------------------------------


def sidecar_path(path: str | Path) -> Path:
    return Path(path).with_suffix(".json")


def write_volume(v: SequenceVolume, path: str | Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(np.ascontiguousarray(v.voxels, dtype="<f4").tobytes())
    side = {
        "shape": list(v.shape),
        "view": v.view,
        "sequence_type": v.sequence_type,
        "fat_sat": bool(v.fat_sat),
        "stage": v.stage,
    }
    if v.meta:
        side["meta"] = dict(v.meta)
    sidecar_path(path).write_text(json.dumps(side, indent=2, sort_keys=True))
    return path


def read_volume(path: str | Path, partition: str | None = None) -> SequenceVolume:
    path = Path(path)
    side = json.loads(sidecar_path(path).read_text())
    shape = tuple(int(x) for x in side["shape"])
    data = np.fromfile(path, dtype="<f4")
    if data.size != int(np.prod(shape)):
        raise ShapeError(f"{path}: {data.size} values do not fill sidecar shape {shape}")
    return SequenceVolume(
        data.reshape(shape).astype(np.float32),
        side["view"],
        side["sequence_type"],
        bool(side.get("fat_sat", False)),
        side.get("stage", "raw"),
        partition,
        side.get("meta", {}),
    )


def read_dicom_series(directory: str | Path, view: str, sequence_type: str, fat_sat: bool = False) -> SequenceVolume:
    """Stack a DICOM series (one file per slice) into a raw volume.

    Requires the optional ``pydicom`` dependency. Slices are ordered by
    InstanceNumber, falling back to file name.
    """
    try:
        import pydicom
    except ImportError as exc:  # pragma: no cover - depends on environment
        raise ImportError("DICOM ingestion needs pydicom: pip install 'scanpipe[dicom]'") from exc
    files = sorted(p for p in Path(directory).iterdir() if p.is_file())
    slices = []
    for p in files:
        ds = pydicom.dcmread(p)
        arr = ds.pixel_array.astype(np.float32)
        slope = float(getattr(ds, "RescaleSlope", 1.0))
        intercept = float(getattr(ds, "RescaleIntercept", 0.0))
        slices.append((int(getattr(ds, "InstanceNumber", 0)), p.name, arr * slope + intercept))
    if not slices:
        raise ShapeError(f"no DICOM files in {directory}")
    slices.sort(key=lambda t: (t[0], t[1]))
    return SequenceVolume(np.stack([s[2] for s in slices]), view, sequence_type, fat_sat, "raw")


# ---------------------------------------------------------------------------
# deterministic stages
# ---------------------------------------------------------------------------


def resize_volume(v: SequenceVolume, target: int = RESIZE_TARGET) -> SequenceVolume:
    """Bilinear per-slice resize to ``target x target``; slice count unchanged."""
    if v.stage not in ("raw", "resized"):
        raise ValueError(f"resize expects a raw volume, got stage {v.stage!r}")
    n, h, w = v.shape
    if min(n, h, w) <= 0 or target <= 0:
        raise ShapeError(f"non-positive dimensions {v.shape} / target {target}")
    if (h, w) == (target, target):
        return v.with_voxels(v.voxels.astype(np.float32, copy=True), "resized")
    x = torch.from_numpy(np.ascontiguousarray(v.voxels, dtype=np.float32))[:, None]
    y = F.interpolate(
        x, size=(target, target), mode="bilinear", align_corners=False, antialias=(h > target or w > target)
    )
    return v.with_voxels(y[:, 0].numpy(), "resized")


def crop_offsets(height: int, width: int, size: int = CROP_SIZE) -> tuple[int, int]:
    return ((height - size) // 2, (width - size) // 2)


def center_crop(v: SequenceVolume, size: int = CROP_SIZE) -> SequenceVolume:
    _, h, w = v.shape
    if h < size or w < size:
        raise CropError(f"cannot crop {size}x{size} from {h}x{w}")
    top, left = crop_offsets(h, w, size)
    out = v.voxels[:, top : top + size, left : left + size].copy()
    return v.with_voxels(out, "cropped")


@dataclass(frozen=True)
class StandardizationStats:
    stats: Mapping[tuple[str, bool], tuple[float, float]]
    fitted_on: str = "train"
    global_mean: float = 0.0
    global_std: float = 1.0

    def to_dict(self) -> dict:
        return {
            "fitted_on": self.fitted_on,
            "global": [self.global_mean, self.global_std],
            "keys": {key_name(k): list(v) for k, v in sorted(self.stats.items())},
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "StandardizationStats":
        return cls(
            {parse_key(k): (float(v[0]), float(v[1])) for k, v in d["keys"].items()},
            d.get("fitted_on", "train"),
            float(d["global"][0]),
            float(d["global"][1]),
        )


def fit_standardization(train_sequences: Iterable[SequenceVolume]) -> StandardizationStats:
    """Per-key mean and (population) std pooled over every training voxel."""
    acc: dict[tuple[str, bool], list[float]] = {}
    total = [0.0, 0.0, 0.0]
    for v in train_sequences:
        if v.partition not in (None, "train"):
            raise PartitionLeakError(f"standardization must be fit on training data, got partition {v.partition!r}")
        x = v.voxels.astype(np.float64)
        s = acc.setdefault(v.key, [0.0, 0.0, 0.0])
        for bucket in (s, total):
            bucket[0] += x.size
            bucket[1] += float(x.sum())
            bucket[2] += float(np.square(x).sum())
    if not acc:
        raise ValueError("no training sequences supplied")

    def moments(b):
        mean = b[1] / b[0]
        var = max(b[2] / b[0] - mean * mean, 0.0)
        return mean, math.sqrt(var)

    stats = {}
    for key, b in acc.items():
        mean, std = moments(b)
        if not std > 0:
            raise DegenerateStatsError(f"sequence key {key_name(key)} has zero intensity spread")
        stats[key] = (mean, std)
    gm, gs = moments(total)
    return StandardizationStats(stats, "train", gm, gs)


def minmax_rescale(x: np.ndarray) -> np.ndarray:
    lo, hi = float(x.min()), float(x.max())
    if hi <= lo:
        return np.zeros_like(x, dtype=np.float32)
    return ((x - lo) / (hi - lo)).astype(np.float32)


def apply_standardization(
    v: SequenceVolume, stats: StandardizationStats, *, fallback_to_global: bool = False
) -> SequenceVolume:
    if v.key in stats.stats:
        mean, std = stats.stats[v.key]
    elif fallback_to_global:
        mean, std = stats.global_mean, stats.global_std
    else:
        raise UnknownSequenceTypeError(f"no training statistics for sequence key {key_name(v.key)}")
    z = (v.voxels.astype(np.float64) - mean) / std
    return v.with_voxels(minmax_rescale(z), "standardized")


def preprocess(v: SequenceVolume, stats: StandardizationStats | None = None, **kw) -> SequenceVolume:
    """raw -> resized -> cropped (-> standardized when ``stats`` is given)."""
    out = center_crop(resize_volume(v))
    return apply_standardization(out, stats, **kw) if stats is not None else out


# ---------------------------------------------------------------------------
# augmentation
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AugmentPolicy:
    multiplier: int = 10
    rotation_deg: float = 15.0
    translate: float = 0.10
    scale: tuple[float, float] = (0.9, 1.1)
    hflip_p: float = 0.5
    vflip_p: float = 0.5
    noise_sigma: float = 0.01
    seed: int = 0

    def __post_init__(self):
        if self.multiplier < 1:
            raise ValueError("multiplier must be >= 1")
        ranges = (self.rotation_deg, self.translate, self.scale[0], self.scale[1], self.noise_sigma)
        if any(r < 0 for r in ranges) or self.scale[0] > self.scale[1]:
            raise ValueError("augmentation ranges must be nonnegative")
        if not (0 <= self.hflip_p <= 1 and 0 <= self.vflip_p <= 1):
            raise ValueError("flip probabilities must lie in [0, 1]")

    @classmethod
    def finetune(cls, seed: int = 0) -> "AugmentPolicy":
        return cls(multiplier=10, seed=seed)

    @classmethod
    def pretrain(cls, seed: int = 0) -> "AugmentPolicy":
        return cls(multiplier=5, seed=seed)


def augment_copy(voxels: np.ndarray, policy: AugmentPolicy, index: int, stream: int = 0) -> np.ndarray:
    """One augmented copy; the same rigid transform is applied to every slice.

    ``stream`` separates the random streams of different source volumes.
    """
    rng = np.random.default_rng([policy.seed, stream, index])
    angle = math.radians(rng.uniform(-policy.rotation_deg, policy.rotation_deg))
    s = rng.uniform(*policy.scale)
    tx, ty = rng.uniform(-policy.translate, policy.translate, size=2) * 2.0  # normalized coords span 2
    fx = -1.0 if rng.random() < policy.hflip_p else 1.0
    fy = -1.0 if rng.random() < policy.vflip_p else 1.0
    noise_seed = int(rng.integers(0, 2**31 - 1))

    c, si = math.cos(angle) / s, math.sin(angle) / s
    theta = torch.tensor([[[c * fx, -si * fy, tx], [si * fx, c * fy, ty]]], dtype=torch.float32)
    x = torch.from_numpy(np.ascontiguousarray(voxels, dtype=np.float32))[None]
    grid = F.affine_grid(theta, list(x.shape), align_corners=False)
    y = F.grid_sample(x, grid, mode="bilinear", padding_mode="zeros", align_corners=False)[0]
    if policy.noise_sigma > 0:
        span = float(voxels.max() - voxels.min()) or 1.0
        g = torch.Generator().manual_seed(noise_seed)
        y = y + torch.randn(y.shape, generator=g) * (policy.noise_sigma * span)
    return y.clamp_(0.0, 1.0).numpy()


def augment(v: SequenceVolume, policy: AugmentPolicy, stream: int = 0) -> list[SequenceVolume]:
    if v.stage not in ("standardized", "augmented"):
        raise ValueError(f"augment expects a standardized volume, got stage {v.stage!r}")
    return [v.with_voxels(augment_copy(v.voxels, policy, j, stream), "augmented") for j in range(policy.multiplier)]
