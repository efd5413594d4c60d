"""2D feature extractors applied slice by slice.

Every backbone maps a ``(slices, 3, 224, 224)`` batch to ``(slices, feature_dim)``
and names the activation Grad-CAM should target. The two tiny backbones keep
tests and desk-scale runs cheap; the torchvision-backed entries stand in for
the full-size architectures (randomly initialized, weights come from
checkpoints).
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import torch
import torch.nn as nn

FAMILIES = ("convolutional", "attention")


@dataclass(frozen=True)
class BackboneSpec:
    identifier: str
    feature_dim: int
    family: str
    input_size: int = 224
    channels: int = 3

    def __post_init__(self):
        if self.feature_dim <= 0:
            raise ValueError("feature_dim must be positive")
        if self.family not in FAMILIES:
            raise ValueError(f"unknown backbone family {self.family!r}")


class FeatureExtractor(nn.Module):
    spec: BackboneSpec
    cam_layer: str = ""

    def cam_target(self) -> nn.Module:
        return self.get_submodule(self.cam_layer)

    def cam_grid(self, activation: torch.Tensor) -> torch.Tensor:
        """Reshape the target activation to ``(slices, channels, h, w)``."""
        return activation


class TinyCNN(FeatureExtractor):
    cam_layer = "conv3"

    def __init__(self, spec: BackboneSpec):
        super().__init__()
        self.spec = spec
        self.conv1 = nn.Conv2d(3, 8, kernel_size=7, stride=4, padding=3)
        self.conv2 = nn.Conv2d(8, 16, kernel_size=3, stride=2, padding=1)
        self.conv3 = nn.Conv2d(16, spec.feature_dim, kernel_size=3, padding=1)
        self.act = nn.ReLU()

    def forward(self, x):
        x = self.act(self.conv1(x))
        x = self.act(self.conv2(x))
        x = self.act(self.conv3(x))
        return x.amax(dim=(2, 3))


class TinyViT(FeatureExtractor):
    """Two-block transformer on 16x16 patches; features are mean-pooled patch tokens."""

    cam_layer = "blocks.1"

    def __init__(self, spec: BackboneSpec, patch: int = 16, depth: int = 2, heads: int = 2):
        super().__init__()
        self.spec = spec
        d = spec.feature_dim
        self.grid = spec.input_size // patch
        self.patch_embed = nn.Conv2d(3, d, kernel_size=patch, stride=patch)
        self.cls_token = nn.Parameter(torch.zeros(1, 1, d))
        self.pos_embed = nn.Parameter(torch.randn(1, self.grid * self.grid + 1, d) * 0.02)
        self.blocks = nn.ModuleList(
            nn.TransformerEncoderLayer(d, heads, dim_feedforward=2 * d, dropout=0.0, batch_first=True, norm_first=True)
            for _ in range(depth)
        )
        self.norm = nn.LayerNorm(d)

    def forward(self, x):
        x = self.patch_embed(x).flatten(2).transpose(1, 2)
        x = torch.cat([self.cls_token.expand(x.shape[0], -1, -1), x], dim=1) + self.pos_embed
        for blk in self.blocks:
            x = blk(x)
        return self.norm(x[:, 1:]).mean(dim=1)

    def cam_grid(self, activation):
        tokens = activation[:, 1:]
        s, n, d = tokens.shape
        return tokens.transpose(1, 2).reshape(s, d, self.grid, self.grid)


class TorchvisionAlexNet(FeatureExtractor):
    cam_layer = "features.10"

    def __init__(self, spec):
        super().__init__()
        from torchvision.models import alexnet

        self.spec = spec
        self.features = alexnet(weights=None).features
        self.pool = nn.AdaptiveAvgPool2d(1)

    def forward(self, x):
        return self.pool(self.features(x)).flatten(1)


class TorchvisionViT(FeatureExtractor):
    # The class token is read after the last block, so the spatial tokens of the
    # last block's output carry no gradient; target that block's input norm.
    cam_layer = "vit.encoder.layers.encoder_layer_11.ln_1"

    def __init__(self, spec):
        super().__init__()
        from torchvision.models import vit_b_16

        self.spec = spec
        self.vit = vit_b_16(weights=None)
        self.vit.heads = nn.Identity()

    def forward(self, x):
        return self.vit(x)

    def cam_grid(self, activation):
        tokens = activation[:, 1:]
        s, n, d = tokens.shape
        g = int(round(n**0.5))
        return tokens.transpose(1, 2).reshape(s, d, g, g)


class TorchvisionSwin(FeatureExtractor):
    cam_layer = "swin.features.7.1"

    def __init__(self, spec, v2: bool = False):
        super().__init__()
        from torchvision.models import swin_t, swin_v2_t

        self.spec = spec
        self.swin = (swin_v2_t if v2 else swin_t)(weights=None)
        self.swin.head = nn.Identity()

    def forward(self, x):
        return self.swin(x)

    def cam_grid(self, activation):
        return activation.permute(0, 3, 1, 2)


class TorchvisionGeneric(FeatureExtractor):
    """Registry stub: a torchvision classifier with its head removed."""

    def __init__(self, spec, factory: Callable[[], nn.Module], head_attr: str):
        super().__init__()
        self.spec = spec
        self.net = factory()
        setattr(self.net, head_attr, nn.Identity())
        convs = [n for n, m in self.net.named_modules() if isinstance(m, nn.Conv2d)]
        self.cam_layer = "net." + convs[-1]

    def forward(self, x):
        return self.net(x)


def _tv(name: str, head_attr: str):
    def build(spec):
        import torchvision.models as tvm

        return TorchvisionGeneric(spec, lambda: getattr(tvm, name)(weights=None), head_attr)

    return build


REGISTRY: dict[str, tuple[BackboneSpec, Callable[[BackboneSpec], FeatureExtractor]]] = {
    "tiny-test-cnn": (BackboneSpec("tiny-test-cnn", 32, "convolutional"), TinyCNN),
    "tiny-vit": (BackboneSpec("tiny-vit", 32, "attention"), TinyViT),
    "alexnet-class": (BackboneSpec("alexnet-class", 256, "convolutional"), TorchvisionAlexNet),
    "vit-class": (BackboneSpec("vit-class", 768, "attention"), TorchvisionViT),
    "swin-class": (BackboneSpec("swin-class", 768, "attention"), TorchvisionSwin),
    "swin-v2-class": (BackboneSpec("swin-v2-class", 768, "attention"), lambda s: TorchvisionSwin(s, v2=True)),
    "densenet-class": (BackboneSpec("densenet-class", 1024, "convolutional"), _tv("densenet121", "classifier")),
    "efficientnet-class": (BackboneSpec("efficientnet-class", 1280, "convolutional"), _tv("efficientnet_b0", "classifier")),
    "resnet34-class": (BackboneSpec("resnet34-class", 512, "convolutional"), _tv("resnet34", "fc")),
    "resnet50-class": (BackboneSpec("resnet50-class", 2048, "convolutional"), _tv("resnet50", "fc")),
}


def get_spec(identifier: str | BackboneSpec) -> BackboneSpec:
    if isinstance(identifier, BackboneSpec):
        return identifier
    try:
        return REGISTRY[identifier][0]
    except KeyError:
        raise KeyError(f"unknown backbone {identifier!r}; known: {sorted(REGISTRY)}") from None


def build_backbone(spec: str | BackboneSpec) -> FeatureExtractor:
    spec = get_spec(spec)
    registered, factory = REGISTRY[spec.identifier]
    if registered.feature_dim != spec.feature_dim:
        raise ValueError(f"{spec.identifier} produces {registered.feature_dim} features, not {spec.feature_dim}")
    return factory(spec)
