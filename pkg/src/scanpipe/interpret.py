"""Grad-CAM heatmaps for slice models and colour overlays on preprocessed slices."""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from .bundle import ModelBundle
from .errors import ShapeError
from .models import SliceModel, as_slice_batch
from .preprocess import SequenceVolume


@dataclass
class Heatmap:
    values: np.ndarray
    target_layer: str
    slice_index: int
    study_id: str | None = None
    view: str | None = None
    raw_min: float = 0.0
    raw_max: float = 0.0
    zero_gradient: bool = False

    def metadata(self) -> dict:
        return {
            "target_layer": self.target_layer,
            "slice_index": self.slice_index,
            "study_id": self.study_id,
            "view": self.view,
            "normalization": {"min": self.raw_min, "max": self.raw_max},
            "zero_gradient": self.zero_gradient,
            "shape": list(self.values.shape),
        }


def gradcam(
    model: SliceModel | ModelBundle,
    v: SequenceVolume | np.ndarray,
    slice_index: int,
    *,
    study_id: str | None = None,
    view: str | None = None,
) -> Heatmap:
    """Grad-CAM of the positive-class logit for one slice of a volume.

    Convolutional backbones target their last convolution, attention backbones
    their last attention block (spatial tokens reshaped to the patch grid, class
    token dropped). The map is rectified, bilinearly upsampled to the slice size
    and min-max normalized.
    """
    if isinstance(model, ModelBundle):
        view = view or model.view
        model = model.load()
    if not isinstance(model, SliceModel):
        raise TypeError("Grad-CAM is implemented for slice models")
    if isinstance(v, SequenceVolume):
        view = view or v.view
        study_id = study_id or v.meta.get("study_id")
        v = v.voxels
    x = as_slice_batch(v, model.spec.input_size)
    if not 0 <= slice_index < x.shape[0]:
        raise IndexError(f"slice {slice_index} outside 0..{x.shape[0] - 1}")

    bb = model.backbone
    captured = {}
    handle = bb.cam_target().register_forward_hook(lambda m, i, o: captured.__setitem__("act", o))
    was = model.training
    model.eval()
    try:
        with torch.enable_grad():
            logit = model(x)
            act = captured["act"]
            (grad,) = torch.autograd.grad(logit, act, allow_unused=False)
    finally:
        handle.remove()
        model.train(was)

    a = bb.cam_grid(act.detach())[slice_index]
    g = bb.cam_grid(grad)[slice_index]
    weights = g.mean(dim=(1, 2))
    cam = F.relu((weights[:, None, None] * a).sum(0))
    size = x.shape[-2:]
    cam = F.interpolate(cam[None, None], size=size, mode="bilinear", align_corners=False)[0, 0].clamp_min(0)
    cam = cam.numpy().astype(np.float64)
    lo, hi = float(cam.min()), float(cam.max())
    zero = hi <= lo
    if zero:
        warnings.warn(f"Grad-CAM: zero gradient signal on slice {slice_index}; returning an all-zero map", stacklevel=2)
        values = np.zeros(tuple(size), dtype=np.float32)
    else:
        values = ((cam - lo) / (hi - lo)).astype(np.float32)
    return Heatmap(values, f"{bb.spec.identifier}:{bb.cam_layer}", slice_index, study_id, view, lo, hi, zero)


def mass_inside(h: Heatmap | np.ndarray, box: tuple[int, int, int, int]) -> float:
    """Fraction of heatmap mass within ``(top, left, bottom, right)`` (bottom/right exclusive)."""
    vals = h.values if isinstance(h, Heatmap) else np.asarray(h)
    total = float(vals.sum())
    if total <= 0:
        return 0.0
    t, l, b, r = box
    return float(vals[max(t, 0) : b, max(l, 0) : r].sum()) / total


def overlay_array(h: Heatmap | np.ndarray, slice_image: np.ndarray, alpha: float = 0.5, cmap: str = "jet") -> np.ndarray:
    """RGB uint8 blend: per-pixel weight ``alpha * heat`` on the colour-mapped heat."""
    from matplotlib import colormaps

    heat = h.values if isinstance(h, Heatmap) else np.asarray(h, dtype=np.float32)
    base = np.asarray(slice_image, dtype=np.float64)
    if heat.shape != base.shape:
        raise ShapeError(f"heatmap {heat.shape} and slice {base.shape} differ")
    lo, hi = float(base.min()), float(base.max())
    gray = (base - lo) / (hi - lo) if hi > lo else np.zeros_like(base)
    color = colormaps[cmap](np.clip(heat, 0, 1))[..., :3]
    w = (alpha * np.clip(heat, 0, 1))[..., None]
    rgb = (1 - w) * np.repeat(gray[..., None], 3, axis=2) + w * color
    return np.round(rgb * 255).astype(np.uint8)


def overlay(
    h: Heatmap, slice_image: np.ndarray, path: str | Path, alpha: float = 0.5, cmap: str = "jet"
) -> Path:
    """Write the overlay PNG and a JSON metadata sidecar next to it."""
    from PIL import Image

    rgb = overlay_array(h, slice_image, alpha, cmap)
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(rgb, mode="RGB").save(path, format="PNG")
    meta = h.metadata() if isinstance(h, Heatmap) else {}
    meta.update({"alpha": alpha, "colormap": cmap})
    path.with_suffix(".json").write_text(json.dumps(meta, indent=2, sort_keys=True))
    return path
