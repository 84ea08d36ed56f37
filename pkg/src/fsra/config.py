"""Run configuration: one serializable tree covering every experiment knob."""

from __future__ import annotations

import dataclasses
import hashlib
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path

from fsra.backbone import BackboneConfig
from fsra.data import AugmentConfig, SamplerConfig
from fsra.losses import LossConfig

SEED_ENV_VAR = "FSRA_SEED"


REFERENCE_EPOCHS = 120
REFERENCE_DECAY_EPOCHS = (70, 110)


@dataclass
class TrainConfig:
    epochs: int = 120
    lr_backbone: float = 0.003
    lr_heads: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 0.0005
    decay_factor: float = 0.1
    # None: the reference 120-epoch schedule (70, 110), scaled to `epochs`
    decay_epochs: tuple[int, ...] | None = None
    batch_size: int = 8
    seed: int = 0

    def __post_init__(self):
        if self.decay_epochs is None:
            scaled = (min(self.epochs - 1, math.ceil(self.epochs * e / REFERENCE_EPOCHS))
                      for e in REFERENCE_DECAY_EPOCHS)
            self.decay_epochs = tuple(sorted({max(0, e) for e in scaled}))
        else:
            self.decay_epochs = tuple(self.decay_epochs)
        if list(self.decay_epochs) != sorted(set(self.decay_epochs)):
            raise ValueError("decay epochs must be strictly increasing")
        if any(e >= self.epochs for e in self.decay_epochs):
            raise ValueError("decay epochs must be < total epochs")
        for name in ("lr_backbone", "lr_heads", "momentum", "decay_factor"):
            if getattr(self, name) < 0 or (name.startswith("lr") and getattr(self, name) <= 0):
                raise ValueError(f"{name} must be positive")

    def milestones(self) -> tuple[int, ...]:
        return self.decay_epochs


@dataclass
class SamplerSection:
    k: int = 3


@dataclass
class RunConfig:
    backbone: BackboneConfig = field(default_factory=BackboneConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    sampler: SamplerSection = field(default_factory=SamplerSection)
    augment: AugmentConfig = field(default_factory=AugmentConfig)
    regions: int = 3
    head_hidden: int = 64
    head_dropout: float = 0.1
    data_root: str = ""
    eval_root: str = ""
    out_dir: str = "runs/default"

    def sampler_config(self) -> SamplerConfig:
        return SamplerConfig(k=self.sampler.k, batch_size=self.train.batch_size,
                             seed=self.train.seed)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True, default=_jsonable)

    def hash(self) -> str:
        return hashlib.sha256(
            json.dumps(self.to_dict(), sort_keys=True, default=_jsonable).encode()
        ).hexdigest()


def _jsonable(value):
    if isinstance(value, tuple):
        return list(value)
    if isinstance(value, Path):
        return str(value)
    raise TypeError(f"not JSON-serializable: {value!r}")


def _build_section(cls, data: dict):
    names = {f.name for f in dataclasses.fields(cls)}
    unknown = set(data) - names
    if unknown:
        raise ValueError(f"unknown {cls.__name__} keys: {sorted(unknown)}")
    return cls(**data)


def config_from_dict(tree: dict) -> RunConfig:
    tree = dict(tree)
    sections = {
        "backbone": BackboneConfig,
        "train": TrainConfig,
        "loss": LossConfig,
        "sampler": SamplerSection,
        "augment": AugmentConfig,
    }
    kwargs = {}
    for key, cls in sections.items():
        if key in tree:
            kwargs[key] = _build_section(cls, tree.pop(key))
    top_names = {f.name for f in dataclasses.fields(RunConfig)}
    unknown = set(tree) - top_names
    if unknown:
        raise ValueError(f"unknown config keys: {sorted(unknown)}")
    kwargs.update(tree)
    cfg = RunConfig(**kwargs)
    if os.environ.get(SEED_ENV_VAR) and "train" not in kwargs:
        pass  # seed handled by apply_seed_fallback
    return cfg


def load_config(path) -> RunConfig:
    with open(path) as fh:
        return config_from_dict(json.load(fh))


def apply_overrides(tree: dict, overrides: list[str]) -> dict:
    """Apply ``dotted.key=value`` overrides; values parse as JSON literals."""
    tree = json.loads(json.dumps(tree))  # deep copy
    for item in overrides:
        if "=" not in item:
            raise ValueError(f"override {item!r} is not key=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        node = tree
        parts = key.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
        node[parts[-1]] = value
    return tree


def apply_seed_fallback(cfg: RunConfig) -> RunConfig:
    env = os.environ.get(SEED_ENV_VAR)
    if env is not None and cfg.train.seed == 0:
        cfg.train.seed = int(env)
    return cfg
