"""Run configuration file (JSON) shared by the CLI subcommands."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .model import ModelConfig
from .trainer import TrainingConfig


@dataclass
class PretrainConfig:
    epochs: int = 24
    learning_rate: float = 3e-3
    batch_size: int = 5
    augment_fraction: float = 0.4
    snr_db: tuple = (10.0, 30.0)
    grad_clip_norm: float = 5.0


@dataclass
class SynthConfig:
    min_words: int = 18
    max_words: int = 27
    char_ms: float = 52.0


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    pretrain: PretrainConfig = field(default_factory=PretrainConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    sweep: dict = field(default_factory=dict)
    cache_root: str = "cache"

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "training": self.training.to_dict(),
            "pretrain": asdict(self.pretrain),
            "synth": asdict(self.synth),
            "sweep": dict(self.sweep),
            "cache_root": self.cache_root,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        out = cls()
        if "model" in d:
            out.model = ModelConfig.from_dict(d["model"])
        if "training" in d:
            out.training = TrainingConfig.from_dict(d["training"])
        for key, kind in (("pretrain", PretrainConfig), ("synth", SynthConfig)):
            if key in d:
                extra = set(d[key]) - set(kind.__dataclass_fields__)
                if extra:
                    raise ValueError(f"unknown {key} config keys: {sorted(extra)}")
                setattr(out, key, kind(**d[key]))
        if "sweep" in d:
            out.sweep = dict(d["sweep"])
        if "cache_root" in d:
            out.cache_root = str(d["cache_root"])
        return out


def load_config(path) -> RunConfig:
    if path is None:
        return RunConfig()
    with open(Path(path), encoding="utf-8") as f:
        return RunConfig.from_dict(json.load(f))
