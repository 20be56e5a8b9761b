"""Experiment configuration (YAML), schema-checked with unknown keys rejected."""

from __future__ import annotations

from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, PositiveInt, ValidationError, model_validator

from .conditioning import ConditioningMode
from .data import PRESETS, ShapePreset, generate_synthetic, load_splits
from .models import ModelFamily
from .training import SearchSpace, TrainConfig


class ConfigError(ValueError):
    """The experiment configuration is invalid."""


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid")


class ShapeSection(_Strict):
    S: PositiveInt
    C: PositiveInt
    T: PositiveInt
    Y: PositiveInt
    n_train: PositiveInt
    n_val: PositiveInt
    n_test: PositiveInt


class SyntheticSection(_Strict):
    preset: Optional[Literal["mi", "ssvep", "ern"]] = None
    shape: Optional[ShapeSection] = None
    scenario: Literal["shared", "subject_flip", "subject_shift"] = "shared"
    sigma: float = Field(0.3, ge=0)
    seed: int = 0

    @model_validator(mode="after")
    def _one_shape(self):
        if (self.preset is None) == (self.shape is None):
            raise ValueError("give exactly one of 'preset' or 'shape'")
        return self

    def preset_obj(self) -> ShapePreset:
        if self.preset is not None:
            return PRESETS[self.preset]
        return ShapePreset("custom", **self.shape.model_dump())


class DataSection(_Strict):
    path: Optional[str] = None
    synthetic: Optional[SyntheticSection] = None

    @model_validator(mode="after")
    def _one_source(self):
        if (self.path is None) == (self.synthetic is None):
            raise ValueError("give exactly one of 'path' or 'synthetic'")
        return self


class ModelSection(_Strict):
    family: Literal["resnet", "inception"] = "inception"
    depth: Optional[Literal[3, 4]] = None
    overrides: dict = Field(default_factory=dict)

    @model_validator(mode="after")
    def _check_overrides(self):
        allowed = {"resnet": {"filters", "kernels"},
                   "inception": {"bottleneck", "kernels", "branch_filters"}}[self.family]
        unknown = set(self.overrides) - allowed
        if unknown:
            raise ValueError(f"unknown {self.family} overrides: {sorted(unknown)}")
        if self.family == "resnet" and self.depth is not None:
            raise ValueError("depth only applies to inception")
        ModelFamily(self.family, dict(self.overrides)).spec(1, 2, self.depth)
        return self


class ModeSection(_Strict):
    kind: Literal["sa", "cic", "cec", "se"] = "sa"
    alpha: float = Field(0.25, ge=0)
    embed_dim: PositiveInt = 4
    mlp_hidden: PositiveInt = 16
    d1: PositiveInt = 16
    head_hidden: Optional[int] = Field(None, ge=0)


class TrainSection(_Strict):
    max_epochs: PositiveInt = 500
    patience: PositiveInt = 20
    batch_size: PositiveInt = 32
    learning_rate: float = Field(1e-4, gt=0)
    weight_decay: float = Field(0.0, ge=0)
    eval_batch_size: PositiveInt = 256

    @model_validator(mode="after")
    def _patience(self):
        if self.patience >= self.max_epochs:
            raise ValueError("patience must be smaller than max_epochs")
        return self


class SearchSection(_Strict):
    batch_size: list[PositiveInt] = [32, 64]
    learning_rate: list[float] = [1e-4, 1e-5, 1e-6]
    weight_decay: list[float] = [0.0, 0.01, 0.1, 0.5, 1.0]
    alpha: list[float] = [0.1, 0.25, 0.5, 0.75]
    depth: list[Literal[3, 4]] = [3, 4]

    @model_validator(mode="after")
    def _non_empty(self):
        for k in ("batch_size", "learning_rate", "weight_decay", "alpha", "depth"):
            if not getattr(self, k):
                raise ValueError(f"search.{k} must not be empty")
        return self


class ExperimentConfig(_Strict):
    name: Optional[str] = None
    data: DataSection
    model: ModelSection = Field(default_factory=ModelSection)
    protocol: Literal["joint", "subject_specific"] = "joint"
    mode: ModeSection = Field(default_factory=ModeSection)
    metric: Literal["accuracy", "auc"] = "accuracy"
    train: TrainSection = Field(default_factory=TrainSection)
    search: SearchSection = Field(default_factory=SearchSection)
    hpo_repeats: PositiveInt = 3
    eval_repeats: PositiveInt = 5
    base_seed: int = 0
    output_dir: str = "results"

    @model_validator(mode="after")
    def _protocol_mode(self):
        if self.protocol == "subject_specific" and self.mode.kind != "sa":
            raise ValueError("subject_specific protocol trains unconditioned models; mode.kind must be 'sa'")
        return self

    # runtime objects --------------------------------------------------------

    @property
    def label(self) -> str:
        if self.name:
            return self.name
        tag = "single" if self.protocol == "subject_specific" else self.mode.kind
        return f"{self.model.family}-{tag}"

    def family(self) -> ModelFamily:
        return ModelFamily(self.model.family, dict(self.model.overrides))

    def conditioning_mode(self) -> ConditioningMode:
        m = self.mode
        return ConditioningMode(m.kind, m.alpha, m.embed_dim, m.mlp_hidden, m.d1, m.head_hidden)

    def train_config(self) -> TrainConfig:
        t = self.train
        return TrainConfig(max_epochs=t.max_epochs, patience=t.patience, batch_size=t.batch_size,
                           learning_rate=t.learning_rate, weight_decay=t.weight_decay,
                           hpo_repeats=self.hpo_repeats, eval_repeats=self.eval_repeats,
                           eval_batch_size=t.eval_batch_size)

    def search_space(self) -> SearchSpace:
        s = self.search
        return SearchSpace(tuple(s.batch_size), tuple(s.learning_rate), tuple(s.weight_decay),
                           tuple(s.alpha), tuple(s.depth))

    def load_splits(self) -> dict:
        if self.data.path is not None:
            return load_splits(self.data.path)
        syn = self.data.synthetic
        return generate_synthetic(syn.preset_obj(), syn.scenario, syn.sigma, syn.seed)


def parse_config(raw: dict) -> ExperimentConfig:
    if not isinstance(raw, dict):
        raise ConfigError("configuration must be a mapping at the top level")
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as e:
        first = e.errors()[0]
        where = ".".join(str(p) for p in first["loc"]) or "<root>"
        raise ConfigError(f"{where}: {first['msg']} ({e.error_count()} error(s))") from None


def load_config(path) -> ExperimentConfig:
    try:
        with open(path) as f:
            raw = yaml.safe_load(f)
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    except yaml.YAMLError as e:
        raise ConfigError(f"config is not valid YAML: {e}".replace("\n", " ")) from None
    return parse_config(raw)


def dump_config(config: ExperimentConfig) -> str:
    """Resolved configuration (all defaults filled in) as YAML."""
    return yaml.safe_dump(config.model_dump(mode="json"), sort_keys=False)
