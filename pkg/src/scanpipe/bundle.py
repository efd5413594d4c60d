from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

from .models import InitStrategy, load_model
from .training import HyperParams


@dataclass
class ModelBundle:
    """A trained per-view model plus everything needed to re-derive it."""

    view: str
    modality: str
    architecture: str
    hp: HyperParams
    init: InitStrategy
    checkpoint: str
    train: dict = field(default_factory=dict)
    seed: int = 0
    provenance: dict = field(default_factory=dict)

    def load(self):
        return load_model(self.checkpoint)

    def to_dict(self) -> dict:
        return {
            "view": self.view,
            "modality": self.modality,
            "architecture": self.architecture,
            "hp": self.hp.to_dict(),
            "init": self.init.to_dict(),
            "checkpoint": self.checkpoint,
            "train": self.train,
            "seed": self.seed,
            "provenance": self.provenance,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "ModelBundle":
        return cls(
            d["view"],
            d["modality"],
            d["architecture"],
            HyperParams.from_dict(d["hp"]),
            InitStrategy.from_dict(d.get("init")),
            d["checkpoint"],
            dict(d.get("train", {})),
            int(d.get("seed", 0)),
            dict(d.get("provenance", {})),
        )

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))
        return path

    @classmethod
    def read(cls, path: str | Path) -> "ModelBundle":
        return cls.from_dict(json.loads(Path(path).read_text()))
