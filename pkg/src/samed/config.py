"""One JSON document per run: model, lora, train and data sections."""

from __future__ import annotations

import copy
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import SynthConfig
from .lora import LoraSpec
from .model import ModelConfig, SamedModel, customize
from .train import TrainConfig

# Desk-scale schedule: keeps the warmup/early-stop/max ratios of the full recipe
# (250 / 14880 / 18600) in the same order at 2000 iterations.
TOY_SCHEDULE = {"warmup_period": 100, "max_iterations": 2500, "early_stop_iter": 2000}


class ConfigError(ValueError):
    """Unknown key or malformed value in a run configuration."""


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    lora: LoraSpec = field(default_factory=LoraSpec)
    train: TrainConfig = field(default_factory=lambda: TrainConfig(**TOY_SCHEDULE))
    data: SynthConfig = field(default_factory=SynthConfig)
    base_seed: int = 0
    dtype: str = "float32"

    def __post_init__(self):
        want = "encoder_and_decoder_transformer" if self.model.decoder_lora else "encoder_only"
        if self.lora.scope != want:
            self.lora = LoraSpec(self.lora.rank, self.lora.targets, want)
        if self.dtype not in ("float32", "float64"):
            raise ConfigError(f"dtype must be float32 or float64, not {self.dtype!r}")

    def to_dict(self) -> dict:
        return {"model": self.model.to_dict(), "lora": self.lora.to_dict(),
                "train": self.train.to_dict(), "data": self.data.to_dict(),
                "base_seed": self.base_seed, "dtype": self.dtype}

    @classmethod
    def from_dict(cls, d: dict) -> RunConfig:
        known = {"model", "lora", "train", "data", "base_seed", "dtype"}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}; valid: {valid_keys()}")
        try:
            full = merge(cls().to_dict(), d)
            return cls(ModelConfig.from_dict(full["model"]), LoraSpec(**full["lora"]),
                       TrainConfig.from_dict(full["train"]), SynthConfig.from_dict(full["data"]),
                       int(full["base_seed"]), str(full["dtype"]))
        except (KeyError, TypeError, ValueError) as e:
            raise ConfigError(f"{e}; valid keys: {valid_keys()}") from None

    @classmethod
    def load(cls, path) -> RunConfig:
        return cls.from_dict(json.loads(Path(path).read_text()))

    def dump(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")

    def build_base(self) -> SamedModel:
        return SamedModel(self.model, seed=self.base_seed, dtype=np.dtype(self.dtype))

    def build(self) -> tuple[SamedModel, SamedModel]:
        """Frozen base and its customised view."""
        base = self.build_base()
        return base, customize(base, self.lora, seed=self.train.seed)


def merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in override.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = merge(out[k], v)
        else:
            out[k] = v
    return out


def flatten(d: dict, prefix: str = "") -> dict:
    out = {}
    for k, v in d.items():
        key = f"{prefix}{k}"
        if isinstance(v, dict):
            out.update(flatten(v, key + "."))
        else:
            out[key] = v
    return out


def valid_keys() -> list[str]:
    return sorted(flatten(RunConfig().to_dict()))


def parse_value(text: str):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def apply_overrides(doc: dict, overrides: dict[str, str]) -> dict:
    """Set dotted keys (``train.base_lr``) in ``doc``; unknown keys raise ConfigError."""
    keys = set(valid_keys())
    doc = copy.deepcopy(doc)
    for dotted, raw in overrides.items():
        if dotted not in keys:
            raise ConfigError(f"unknown key {dotted!r}; valid keys: {', '.join(sorted(keys))}")
        node = doc
        *parents, leaf = dotted.split(".")
        for p in parents:
            node = node.setdefault(p, {})
        node[leaf] = parse_value(raw)
    return doc
