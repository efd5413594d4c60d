from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn

from ..errors import ShapeError
from .backbones import FeatureExtractor


def as_slice_batch(x, size: int = 224) -> torch.Tensor:
    """Coerce a volume to a ``(slices, 3, size, size)`` float tensor.

    Single-channel slices are replicated across the three input channels.
    """
    if isinstance(x, np.ndarray):
        x = torch.from_numpy(np.ascontiguousarray(x, dtype=np.float32))
    if x.dim() == 3:
        x = x[:, None]
    if x.dim() != 4 or x.shape[1] not in (1, 3):
        raise ShapeError(f"expected (slices, H, W) or (slices, C, H, W), got {tuple(x.shape)}")
    if tuple(x.shape[-2:]) != (size, size):
        raise ShapeError(f"slices must be {size}x{size}, got {tuple(x.shape[-2:])}")
    if x.shape[0] < 1:
        raise ShapeError("volume has no slices")
    return x.expand(-1, 3, -1, -1) if x.shape[1] == 1 else x


class SliceModel(nn.Module):
    """Per-slice backbone, elementwise max over slices, linear head, sigmoid."""

    def __init__(self, backbone: FeatureExtractor, dropout: float = 0.0):
        super().__init__()
        if not 0.0 <= dropout <= 0.5:
            raise ValueError(f"dropout must lie in [0, 0.5], got {dropout}")
        self.backbone = backbone
        self.dropout = nn.Dropout(dropout)
        self.classifier = nn.Linear(backbone.spec.feature_dim, 1)
        self.init_kind = "random"
        self.init_source: str | None = None

    @property
    def spec(self):
        return self.backbone.spec

    def reset_head(self) -> None:
        self.classifier.reset_parameters()

    def slice_features(self, x) -> torch.Tensor:
        return self.backbone(as_slice_batch(x, self.spec.input_size))

    def pooled(self, x) -> torch.Tensor:
        return self.slice_features(x).amax(dim=0)

    def head(self, pooled: torch.Tensor) -> torch.Tensor:
        return self.classifier(self.dropout(pooled)).squeeze(-1)

    def forward(self, x) -> torch.Tensor:
        """Logit of the positive class for one volume."""
        return self.head(self.pooled(x))


def logit_to_probability(logit) -> float:
    z = float(logit)
    # float64 sigmoid: only saturates for |z| > ~36
    if z >= 0:
        return 1.0 / (1.0 + np.exp(-z))
    e = np.exp(z)
    return float(e / (1.0 + e))


@torch.no_grad()
def predict_logit(model: nn.Module, voxels) -> float:
    was_training = model.training
    model.eval()
    try:
        return float(model(voxels))
    finally:
        model.train(was_training)


def predict_proba(model: nn.Module, voxels) -> float:
    return float(logit_to_probability(predict_logit(model, voxels)))
