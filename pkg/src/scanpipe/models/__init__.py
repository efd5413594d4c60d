"""Model construction, weight initialization, and checkpoint round-trips."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Mapping

import torch
import torch.nn as nn

from ..errors import IncompatibleWeightsError
from .backbones import REGISTRY, BackboneSpec, FeatureExtractor, build_backbone, get_spec
from .checkpoint import read_checkpoint, read_header, save_checkpoint
from .cnn3d import Volume3DModel, minimum_slices
from .slice_model import SliceModel, as_slice_batch, logit_to_probability, predict_logit, predict_proba

INIT_KINDS = ("generic_pretrained", "domain_pretrained", "random")
_WEIGHTS_KIND = {"generic": "generic_pretrained", "domain": "domain_pretrained"}


@dataclass(frozen=True)
class InitStrategy:
    kind: str = "random"
    checkpoint: str | None = None

    def __post_init__(self):
        if self.kind not in INIT_KINDS:
            raise ValueError(f"unknown init kind {self.kind!r}")
        if self.kind != "random" and not self.checkpoint:
            raise ValueError(f"{self.kind} initialization needs a checkpoint")

    def to_dict(self) -> dict:
        return {"kind": self.kind, "checkpoint": self.checkpoint}

    @classmethod
    def from_dict(cls, d: Mapping | None) -> "InitStrategy":
        d = d or {}
        return cls(d.get("kind", "random"), d.get("checkpoint"))


def _identifier(model: nn.Module) -> str:
    return model.spec.identifier if isinstance(model, SliceModel) else Volume3DModel.identifier


def _feature_dim(model: nn.Module) -> int:
    return model.spec.feature_dim if isinstance(model, SliceModel) else model.final_layer.in_features


def _dropout(model: nn.Module) -> float:
    if isinstance(model, SliceModel):
        return model.dropout.p
    return next(m.p for m in model.classifier if isinstance(m, nn.Dropout))


def _head_prefix(model: nn.Module) -> str:
    return "classifier." if isinstance(model, SliceModel) else f"classifier.{len(model.classifier) - 1}."


def load_pretrained(model: nn.Module, checkpoint: str | Path, *, expected_kind: str | None = None) -> nn.Module:
    """Copy backbone weights from ``checkpoint`` and re-randomize the head.

    The checkpoint header must name the same backbone and feature_dim as the
    model. Provenance (generic vs domain) comes from the header.
    """
    header, state = read_checkpoint(checkpoint)
    ident, dim = _identifier(model), _feature_dim(model)
    if header.get("backbone") != ident or int(header.get("feature_dim", -1)) != dim:
        raise IncompatibleWeightsError(
            f"checkpoint holds {header.get('backbone')} (feature_dim {header.get('feature_dim')}), "
            f"model is {ident} (feature_dim {dim})"
        )
    head = _head_prefix(model)
    body = {k: v for k, v in state.items() if not k.startswith(head)}
    own = model.state_dict()
    for k, v in body.items():
        if k not in own or own[k].shape != v.shape:
            raise IncompatibleWeightsError(f"checkpoint tensor {k!r} does not fit the model")
    missing = [k for k in own if not k.startswith(head) and k not in body]
    if missing:
        raise IncompatibleWeightsError(f"checkpoint lacks tensors {missing[:3]}")
    model.load_state_dict(body, strict=False)
    model.reset_head()
    kind = _WEIGHTS_KIND.get(header.get("weights_kind", "generic"), "generic_pretrained")
    if expected_kind is not None and kind != expected_kind:
        raise IncompatibleWeightsError(f"checkpoint provides {kind} weights, {expected_kind} requested")
    model.init_kind = kind
    model.init_source = str(checkpoint)
    return model


def build_slice_model(
    spec: str | BackboneSpec, dropout: float = 0.0, init: InitStrategy | None = None, seed: int | None = None
) -> SliceModel:
    if not 0.0 <= dropout <= 0.5:
        raise ValueError(f"dropout must lie in [0, 0.5], got {dropout}")
    init = init or InitStrategy()
    if seed is not None:
        torch.manual_seed(seed)
    model = SliceModel(build_backbone(spec), dropout)
    if init.kind != "random":
        load_pretrained(model, init.checkpoint, expected_kind=init.kind)
    return model


def build_3d_cnn(dropout: float = 0.0, init: InitStrategy | None = None, seed: int | None = None) -> Volume3DModel:
    init = init or InitStrategy()
    if seed is not None:
        torch.manual_seed(seed)
    model = Volume3DModel(dropout)
    if init.kind != "random":
        load_pretrained(model, init.checkpoint, expected_kind=init.kind)
    return model


def build_model(architecture: str, dropout: float = 0.0, init: InitStrategy | None = None, seed: int | None = None):
    if architecture == Volume3DModel.identifier:
        return build_3d_cnn(dropout, init, seed)
    return build_slice_model(architecture, dropout, init, seed)


def save_model(model: nn.Module, path: str | Path, *, weights_kind: str = "trained", **extra) -> Path:
    """Write a full-model checkpoint; ``weights_kind`` is generic/domain/trained."""
    header = {
        "format_version": 1,
        "backbone": _identifier(model),
        "feature_dim": _feature_dim(model),
        "dropout": _dropout(model),
        "init_provenance": getattr(model, "init_kind", "random"),
        "init_source": getattr(model, "init_source", None),
        "weights_kind": weights_kind,
    }
    header.update(extra)
    return save_checkpoint(path, model.state_dict(), header)


def load_model(path: str | Path) -> nn.Module:
    """Rebuild a model from a full checkpoint written by :func:`save_model`."""
    header, state = read_checkpoint(path)
    model = build_model(header["backbone"], float(header.get("dropout", 0.0)))
    try:
        model.load_state_dict(state)
    except RuntimeError as exc:
        raise IncompatibleWeightsError(str(exc)) from exc
    model.init_kind = header.get("init_provenance", "random")
    model.init_source = header.get("init_source")
    model.eval()
    return model


def forward_scan(model: nn.Module, v) -> float:
    """Positive-class probability for one preprocessed sequence (inference mode)."""
    from ..preprocess import SequenceVolume

    if isinstance(v, SequenceVolume):
        if v.stage not in ("standardized", "augmented"):
            raise ValueError(f"forward_scan expects a standardized volume, got stage {v.stage!r}")
        v = v.voxels
    return predict_proba(model, v)


__all__ = [
    "REGISTRY",
    "forward_scan",
    "BackboneSpec",
    "FeatureExtractor",
    "InitStrategy",
    "SliceModel",
    "Volume3DModel",
    "as_slice_batch",
    "build_3d_cnn",
    "build_backbone",
    "build_model",
    "build_slice_model",
    "get_spec",
    "load_model",
    "load_pretrained",
    "logit_to_probability",
    "minimum_slices",
    "predict_logit",
    "predict_proba",
    "read_checkpoint",
    "read_header",
    "save_checkpoint",
    "save_model",
]
