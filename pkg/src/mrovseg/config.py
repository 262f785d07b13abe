"""Run configuration: nested dataclasses loaded from JSON with strict key checking."""

from __future__ import annotations

import dataclasses
import os
from dataclasses import dataclass, field
from typing import Any, Optional

from .adapter import AdapterConfig
from .backbone import BackboneConfig, layer_name
from .classifier import ClassifierConfig
from .decoder import DecoderConfig
from .errors import ConfigError
from .model import ModelConfig
from .training import LossWeights, TrainConfig

SEED_ENV = "MROVSEG_SEED"


@dataclass
class SeedConfig:
    """Independent seeds per subsystem.

    ``weights`` fixes the frozen stand-in backbone, ``init`` the trainable
    parameters, ``data`` the synthetic dataset and batch order.
    """

    weights: int = 0
    init: int = 1
    data: int = 0
    text: int = 0


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    seeds: SeedConfig = field(default_factory=SeedConfig)
    vocabulary: Optional[str] = None
    checkpoint: Optional[str] = None
    output_dir: str = "out"
    templates: Optional[str] = None

    def __post_init__(self):
        self.apply_seeds()

    def apply_seeds(self) -> None:
        self.model.backbone.seed = self.seeds.weights
        self.model.init_seed = self.seeds.init
        self.model.text_seed = self.seeds.text
        self.train.data_seed = self.seeds.data


def _build(cls, data: Any, where: str):
    if not dataclasses.is_dataclass(cls):
        return data
    if not isinstance(data, dict):
        raise ConfigError(f"{where or 'config'}: expected an object, got {type(data).__name__}")
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(fields))
    if unknown:
        raise ConfigError(f"{where or 'config'}: unknown key(s) {unknown}")
    kwargs = {}
    for name, value in data.items():
        sub = _NESTED.get((cls, name))
        path = f"{where}.{name}" if where else name
        kwargs[name] = _build(sub, value, path) if sub else value
    try:
        return cls(**kwargs)
    except ConfigError as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from None
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where or 'config'}: {exc}") from None


_NESTED = {
    (RunConfig, "model"): ModelConfig,
    (RunConfig, "train"): TrainConfig,
    (RunConfig, "seeds"): SeedConfig,
    (ModelConfig, "backbone"): BackboneConfig,
    (ModelConfig, "adapter"): AdapterConfig,
    (ModelConfig, "decoder"): DecoderConfig,
    (ModelConfig, "classifier"): ClassifierConfig,
    (TrainConfig, "loss"): LossWeights,
}

_LAYER_FIELDS = {"tap_layers", "fusion_layers"}


def _plain(obj):
    if dataclasses.is_dataclass(obj):
        out = {}
        for f in dataclasses.fields(obj):
            v = getattr(obj, f.name)
            if f.name in _LAYER_FIELDS:
                v = [layer_name(x) if x == 0 else x for x in v]
            out[f.name] = _plain(v)
        return out
    if isinstance(obj, (list, tuple)):
        return [_plain(v) for v in obj]
    return obj


def config_from_dict(data: dict, env: Optional[dict] = None) -> RunConfig:
    """Validate and build a :class:`RunConfig`; ``MROVSEG_SEED`` overrides init and data seeds."""
    cfg = _build(RunConfig, data, "")
    env = os.environ if env is None else env
    if env.get(SEED_ENV):
        try:
            seed = int(env[SEED_ENV])
        except ValueError:
            raise ConfigError(f"{SEED_ENV} must be an integer, got {env[SEED_ENV]!r}") from None
        cfg.seeds.init = seed
        cfg.seeds.data = seed
        cfg.apply_seeds()
    return cfg


def config_to_dict(cfg: RunConfig) -> dict:
    return _plain(cfg)


def default_config() -> RunConfig:
    """Architecture defaults at 640x640 with the ViT-B sized stand-in backbone."""
    return RunConfig()


def toy_config() -> RunConfig:
    """Desk-scale preset used by the synthetic overfit experiments."""
    return RunConfig(
        model=ModelConfig(
            image_size=(128, 128), p=0.5,
            backbone=BackboneConfig(patch=8, dim=192, heads=4, depth=6,
                                    tap_layers=("stem", 2, 4, 6), cls_tap=4,
                                    native_window=64, embed_dim=64),
            adapter=AdapterConfig(blocks=4, heads=4, dim=128, queries=20,
                                  fusion_layers=("stem", 2, 4, 6)),
            decoder=DecoderConfig(pyramid_width=32, pixel_hidden=64, ladder_steps=2),
            classifier=ClassifierConfig(text_heads=4)),
        train=TrainConfig(steps=400, batch_size=2, base_lr=1e-3, n_images=8, n_classes=4),
    )


PRESETS = {"default": default_config, "toy": toy_config}
