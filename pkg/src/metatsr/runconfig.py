"""Run configuration: one YAML file, optional preset, dotted overrides.

Precedence, lowest first: built-in defaults, ``--preset`` snippet, config
file, ``--set key.path=value`` flags and dedicated CLI flags. The output
directory may additionally be overridden by ``METATSR_OUTPUT_DIR``, which
sits between the file and the flags.
"""
from __future__ import annotations

import copy
from importlib import resources
from pathlib import Path
from typing import Literal, Mapping, Optional

import yaml
from pydantic import PositiveInt

from .config import (
    FinetuneConfig,
    MetaTestConfig,
    MmamlConfig,
    NetConfig,
    PretrainConfig,
    StrictModel,
    config_hash,
    parse_model,
)
from .errors import ConfigError, DataError
from .series import WindowSpec

OUTPUT_ENV = "METATSR_OUTPUT_DIR"
MODELS = ("maml", "mmaml", "lstm-finetune", "target-mean")
PRESETS = ("pollution", "hr", "battery", "synthetic")


class DatasetConfig(StrictModel):
    name: str = "dataset"
    path: Optional[str] = None
    target_column: str = "target"
    # fnmatch patterns; the target column is never dropped
    drop_columns: tuple[str, ...] = ()
    # series id (or unique id prefix) -> split; a path to a CSV manifest also works
    manifest: Optional[dict[str, Literal["train", "validation", "test"]] | str] = None
    channel_policies: Optional[tuple[str, ...]] = None
    target_policy: str = "zero"


class WindowConfig(StrictModel):
    window_size: PositiveInt = 5
    step_size: PositiveInt = 1

    def spec(self) -> WindowSpec:
        return WindowSpec(self.window_size, self.step_size)


class NetSpec(StrictModel):
    hidden_sizes: tuple[PositiveInt, ...] = (120, 120)
    feature_dim: PositiveInt = 128
    projection: Literal["tanh", "identity"] = "tanh"

    def build(self, input_dim: int, window_size: int) -> NetConfig:
        return NetConfig(input_dim=input_dim, window_size=window_size, **self.model_dump())


class RunConfig(StrictModel):
    dataset: DatasetConfig = DatasetConfig()
    window: WindowConfig = WindowConfig()
    meta_window_size: PositiveInt = 50
    # stride between consecutive virtual tasks when building training tasks
    task_step: PositiveInt = 1
    model: Literal["maml", "mmaml", "lstm-finetune", "target-mean"] = "maml"
    net: NetSpec = NetSpec()
    maml: MmamlConfig = MmamlConfig()
    pretrain: PretrainConfig = PretrainConfig()
    finetune: FinetuneConfig = FinetuneConfig()
    meta_test: MetaTestConfig = MetaTestConfig()
    output_dir: str = "out"
    seed: int = 0
    threads: PositiveInt = 1
    resume: bool = False

    # hashes are layered so evaluation settings can change without retraining

    def data_hash(self) -> str:
        return config_hash(
            {
                "dataset": self.dataset.model_dump(mode="json", exclude={"name"}),
                "window": self.window.model_dump(mode="json"),
                "l": self.meta_window_size,
            }
        )

    def train_hash(self, model: Optional[str] = None) -> str:
        model = model or self.model
        body: dict = {"data": self.data_hash(), "model": model, "seed": self.seed, "runs": self.meta_test.runs}
        if model in ("maml", "mmaml"):
            body["net"] = self.net.model_dump(mode="json")
            body["task_step"] = self.task_step
            maml = self.maml.model_dump(mode="json")
            if model == "maml":
                for k in ("vrae_weight", "latent_dim", "mod_hidden", "stochastic_encode", "freeze_modulation"):
                    maml.pop(k)
            body["maml"] = maml
        elif model == "lstm-finetune":
            body["net"] = self.net.model_dump(mode="json")
            body["pretrain"] = self.pretrain.model_dump(mode="json")
        return config_hash(body)

    def full_hash(self) -> str:
        return config_hash(self)


def load_preset(name: str) -> dict:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    text = resources.files("metatsr").joinpath("presets", f"{name}.yaml").read_text(encoding="utf-8")
    return yaml.safe_load(text) or {}


def deep_merge(base: Mapping, override: Mapping) -> dict:
    out = copy.deepcopy(dict(base))
    for k, v in override.items():
        if isinstance(v, Mapping) and isinstance(out.get(k), Mapping):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


def parse_assignment(text: str) -> dict:
    """``"maml.inner_lr=0.05"`` -> ``{"maml": {"inner_lr": 0.05}}`` (value parsed as YAML)."""
    key, sep, value = text.partition("=")
    if not sep or not key:
        raise ConfigError(f"override {text!r} is not of the form key.path=value")
    node: dict = yaml.safe_load(value) if value else None
    for part in reversed(key.split(".")):
        node = {part: node}
    return node


def read_yaml(path) -> dict:
    try:
        data = yaml.safe_load(Path(path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from None
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise ConfigError(f"config {path} must be a mapping at the top level")
    return data


def build_config(
    config_path=None,
    preset: Optional[str] = None,
    overrides: tuple[str, ...] = (),
    flags: Optional[Mapping] = None,
    environ: Optional[Mapping[str, str]] = None,
) -> RunConfig:
    data: dict = {}
    if preset:
        data = deep_merge(data, load_preset(preset))
    if config_path:
        data = deep_merge(data, read_yaml(config_path))
    if environ and environ.get(OUTPUT_ENV):
        data["output_dir"] = environ[OUTPUT_ENV]
    for text in overrides:
        data = deep_merge(data, parse_assignment(text))
    if flags:
        data = deep_merge(data, {k: v for k, v in flags.items() if v is not None})
    return parse_model(RunConfig, data)


def dump_config(cfg: RunConfig) -> str:
    return yaml.safe_dump(cfg.model_dump(mode="json"), sort_keys=True, default_flow_style=False)


def resolve_manifest(manifest: Optional[Mapping[str, str]], series_ids: list[str]) -> Optional[dict[str, str]]:
    """Map manifest keys to actual series ids by exact match, else unique prefix."""
    if manifest is None:
        return None
    out = {}
    for key, split in manifest.items():
        if key in series_ids:
            out[key] = split
            continue
        hits = [s for s in series_ids if s.startswith(key)]
        if len(hits) != 1:
            raise DataError(f"manifest entry {key!r} matches {len(hits)} series")
        out[hits[0]] = split
    return out
