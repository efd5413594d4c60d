"""Whole-volume 3D CNN modelled on AlexNet's layout.

conv(96) -> pool -> conv(256) -> pool -> conv(384) -> conv(384) -> conv(256)
-> pool -> adaptive avg pool (1, 6, 6) -> fc 4096 -> fc 4096 -> dropout -> fc 1.
Each convolution is followed by ReLU and batch normalization; pools are
3x3x3 with stride 2.
"""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn

from ..errors import ShapeError

FILTERS = (96, 256, 384, 384, 256)
POOL_AFTER = (0, 1, 4)
POOLED_SHAPE = (1, 6, 6)
HIDDEN = 4096


def _pooled_depth(depth: int) -> int:
    for i in range(len(FILTERS)):
        if i in POOL_AFTER:
            if depth < 3:
                return 0
            depth = (depth - 3) // 2 + 1
    return depth


def minimum_slices() -> int:
    d = 1
    while _pooled_depth(d) < 1:
        d += 1
    return d


class Volume3DModel(nn.Module):
    identifier = "cnn3d"

    def __init__(self, dropout: float = 0.0):
        super().__init__()
        if not 0.0 <= dropout <= 0.5:
            raise ValueError(f"dropout must lie in [0, 0.5], got {dropout}")
        kernels = [(3, 11, 11), (3, 5, 5), (3, 3, 3), (3, 3, 3), (3, 3, 3)]
        strides = [(1, 4, 4), 1, 1, 1, 1]
        pads = [(1, 2, 2), (1, 2, 2), 1, 1, 1]
        layers: list[nn.Module] = []
        c_in = 1
        for i, c_out in enumerate(FILTERS):
            layers += [
                nn.Conv3d(c_in, c_out, kernels[i], stride=strides[i], padding=pads[i]),
                nn.ReLU(inplace=True),
                nn.BatchNorm3d(c_out),
            ]
            if i in POOL_AFTER:
                layers.append(nn.MaxPool3d(kernel_size=3, stride=2))
            c_in = c_out
        self.features = nn.Sequential(*layers)
        self.avgpool = nn.AdaptiveAvgPool3d(POOLED_SHAPE)
        flat = FILTERS[-1] * int(np.prod(POOLED_SHAPE))
        self.classifier = nn.Sequential(
            nn.Linear(flat, HIDDEN),
            nn.ReLU(inplace=True),
            nn.Linear(HIDDEN, HIDDEN),
            nn.ReLU(inplace=True),
            nn.Dropout(dropout),
            nn.Linear(HIDDEN, 1),
        )
        self.init_kind = "random"
        self.init_source: str | None = None

    @property
    def final_layer(self) -> nn.Linear:
        return self.classifier[-1]

    def reset_head(self) -> None:
        self.final_layer.reset_parameters()

    def conv_channels(self) -> tuple[int, ...]:
        return tuple(m.out_channels for m in self.features if isinstance(m, nn.Conv3d))

    def forward(self, x) -> torch.Tensor:
        if isinstance(x, np.ndarray):
            x = torch.from_numpy(np.ascontiguousarray(x, dtype=np.float32))
        if x.dim() == 3:
            x = x[None, None]
        elif x.dim() == 4:
            x = x[:, None]
        if x.dim() != 5 or x.shape[1] != 1:
            raise ShapeError(f"expected (D, H, W), (B, D, H, W) or (B, 1, D, H, W), got {tuple(x.shape)}")
        need = minimum_slices()
        if x.shape[2] < need:
            raise ShapeError(f"3D CNN needs at least {need} slices, got {x.shape[2]}")
        z = self.avgpool(self.features(x)).flatten(1)
        out = self.classifier(z).squeeze(-1)
        return out.squeeze(0) if out.shape[0] == 1 else out
