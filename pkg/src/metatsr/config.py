"""Validated configuration models shared by the library and the CLI."""
from __future__ import annotations

import hashlib
import json
from typing import Literal, Optional

from pydantic import BaseModel, ConfigDict, Field, NonNegativeFloat, PositiveInt, ValidationError

from .errors import ConfigError

__all__ = [
    "StrictModel",
    "NetConfig",
    "MamlConfig",
    "MmamlConfig",
    "MetaTestConfig",
    "PretrainConfig",
    "FinetuneConfig",
    "canonical_json",
    "config_hash",
    "parse_model",
]


class StrictModel(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class NetConfig(StrictModel):
    """Task network: stacked LSTMs, a dense projection to ``feature_dim``, a linear head."""

    input_dim: PositiveInt
    window_size: PositiveInt
    hidden_sizes: tuple[PositiveInt, ...] = (120, 120)
    feature_dim: PositiveInt = 128
    projection: Literal["tanh", "identity"] = "tanh"


class MamlConfig(StrictModel):
    inner_lr: NonNegativeFloat = 0.01
    meta_lr: NonNegativeFloat = 0.0005
    inner_steps: PositiveInt = 1
    meta_batch_size: PositiveInt = 20
    noise_level: NonNegativeFloat = 0.0
    meta_epochs: PositiveInt = 10000
    patience: PositiveInt = 500
    second_order: bool = True
    optimizer: Literal["sgd", "adam"] = "sgd"
    # validate every N meta-epochs; early-stopping patience counts meta-epochs
    eval_every: PositiveInt = 1
    checkpoint_every: int = Field(default=0, ge=0)


class MmamlConfig(MamlConfig):
    vrae_weight: NonNegativeFloat = 0.1
    latent_dim: PositiveInt = 64
    mod_hidden: PositiveInt = 128
    stochastic_encode: bool = True
    # keep the modulation network at its initial parameters
    freeze_modulation: bool = False


class MetaTestConfig(StrictModel):
    horizon: PositiveInt = 10
    # None -> floor(M / 100) per test series, floored at 1
    meta_test_step: Optional[PositiveInt] = None
    gradient_steps: PositiveInt = 1
    runs: PositiveInt = 5
    seed: int = 0


class PretrainConfig(StrictModel):
    lr: float = Field(default=0.001, gt=0)
    epochs: int = Field(default=1000, ge=0)
    patience: PositiveInt = 50
    batch_size: PositiveInt = 128
    optimizer: Literal["sgd", "adam"] = "adam"


class FinetuneConfig(StrictModel):
    lr_grid: tuple[NonNegativeFloat, ...] = (0.01, 0.001, 0.0001)
    weight_decay_grid: tuple[NonNegativeFloat, ...] = (0.0, 0.5, 0.1, 0.01, 0.001, 0.0001)


def canonical_json(obj) -> str:
    if isinstance(obj, BaseModel):
        obj = obj.model_dump(mode="json")
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), allow_nan=False)


def config_hash(obj) -> str:
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()[:16]


def parse_model(cls: type[BaseModel], data) -> BaseModel:
    try:
        return cls.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from None
