"""
Experiment configuration.

One JSON (or YAML) file per experiment, validated by pydantic. ``--set``
overrides are applied to the raw mapping first, so an override goes through
the same validation as the file:

    python compress.py compare --config configs/lenet5_mnist.json \\
        --set comparison.accuracy_band=0.003 --set train.epochs=20
"""

from pathlib import Path
from typing import Dict, List, Literal, Optional, Sequence, Union

import torch
import yaml
from dotenv import load_dotenv
from loguru import logger
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from comparison.comparator import ComparisonSettings
from comparison.ppr import PprModel
from compression.admm import RhoSchedule
from models.errors import ConfigError
from models.network import ARCHITECTURES
from training.mnist_idx import DATA_DIR_ENV, resolve_data_dir
from training.trainer import TrainConfig


class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class TrainSettings(_Section):
    learning_rate: float = Field(0.01, gt=0)
    momentum: float = Field(0.9, ge=0, lt=1)
    batch_size: int = Field(64, ge=1)
    epochs: int = Field(30, ge=1)
    weight_decay: float = Field(0.0, ge=0)
    lr_decay_every: int = Field(10, ge=0)
    lr_decay_factor: float = Field(0.1, gt=0, le=1)

    def to_train_config(self, seed: int) -> TrainConfig:
        return TrainConfig(seed=seed, **self.model_dump())


class ScheduleSettings(_Section):
    initial_rho: float = Field(1.5e-3, gt=0)
    growth: float = Field(1.5, ge=1)
    max_iterations: int = Field(12, ge=1)
    tolerance: float = Field(0.0, ge=0)

    def to_schedule(self) -> RhoSchedule:
        return RhoSchedule(self.initial_rho, self.growth, self.max_iterations, self.tolerance)


class PlanSettings(_Section):
    """Pruning targets for ``compress --regime ns|struct``."""

    scope: Literal["all", "conv"] = "all"
    layers: Optional[List[str]] = None
    rate: float = Field(20.0, ge=1)
    prior_rates: Dict[str, float] = Field(default_factory=dict)
    margin: float = Field(1.0, ge=1)
    progressive: bool = True
    column_rate: float = Field(4.0, ge=1)
    filter_rate: float = Field(2.0, ge=1)
    admm_epochs: int = Field(12, ge=1)
    retrain_epochs: int = Field(4, ge=0)

    @field_validator("prior_rates")
    @classmethod
    def _rates_at_least_one(cls, value: Dict[str, float]) -> Dict[str, float]:
        for name, rate in value.items():
            if rate < 1:
                raise ValueError(f"prior rate of {name} must be >= 1, got {rate}")
        return value


class QuantSettings(_Section):
    bits: int = Field(3, ge=1, le=16)
    scope: Literal["all", "conv"] = "all"
    epsilon: float = Field(0.2, ge=0, le=0.5)
    include_zero: Optional[bool] = None
    absorb_zeros: bool = True
    admm_epochs: int = Field(12, ge=1)
    retrain_epochs: int = Field(4, ge=0)


class ComparisonConfig(_Section):
    accuracy_band: float = Field(0.001, ge=0)
    quant_bits: int = Field(3, ge=1, le=16)
    nonstructured_rate: float = Field(20.0, ge=1)
    column_rate: float = Field(4.0, ge=1)
    filter_rate: float = Field(2.0, ge=1)
    max_retries: int = Field(4, ge=0)
    scope: Literal["all", "conv"] = "conv"
    structured_ppr: float = Field(1.0, ge=1)
    nonstructured_ppr: float = Field(2.7, ge=1)
    absorb_quantized_zeros: bool = True

    def to_settings(self, plan: PlanSettings, quant: QuantSettings) -> ComparisonSettings:
        return ComparisonSettings(
            accuracy_band=self.accuracy_band,
            quant_bits=self.quant_bits,
            nonstructured_rate=self.nonstructured_rate,
            column_rate=self.column_rate,
            filter_rate=self.filter_rate,
            max_retries=self.max_retries,
            scope=self.scope,
            admm_epochs=plan.admm_epochs,
            retrain_epochs=plan.retrain_epochs,
            epsilon=quant.epsilon,
            absorb_quantized_zeros=self.absorb_quantized_zeros,
            ppr=PprModel(self.structured_ppr, self.nonstructured_ppr),
        )


class ExperimentConfig(_Section):
    arch: str = "lenet5"
    dataset: Literal["mnist", "synthetic"] = "mnist"
    dataset_path: Optional[str] = None
    limit: Optional[int] = Field(None, ge=1)
    seed: int = 0
    dtype: Literal["float64", "float32"] = "float64"
    output_dir: str = "runs"
    train: TrainSettings = Field(default_factory=TrainSettings)
    schedule: ScheduleSettings = Field(default_factory=ScheduleSettings)
    plan: PlanSettings = Field(default_factory=PlanSettings)
    quant: QuantSettings = Field(default_factory=QuantSettings)
    comparison: ComparisonConfig = Field(default_factory=ComparisonConfig)

    @field_validator("arch")
    @classmethod
    def _known_arch(cls, value: str) -> str:
        if value not in ARCHITECTURES:
            raise ValueError(f"unknown architecture {value!r}; known: {sorted(ARCHITECTURES)}")
        return value

    @property
    def torch_dtype(self) -> torch.dtype:
        return torch.float64 if self.dtype == "float64" else torch.float32

    @property
    def train_config(self) -> TrainConfig:
        return self.train.to_train_config(self.seed)

    @property
    def rho_schedule(self) -> RhoSchedule:
        return self.schedule.to_schedule()

    @property
    def comparison_settings(self) -> ComparisonSettings:
        return self.comparison.to_settings(self.plan, self.quant)


def _parse_override(item: str) -> "tuple[List[str], object]":
    key, sep, text = item.partition("=")
    if not sep or not key.strip():
        raise ConfigError(f"override must look like key=value, got {item!r}", field=key or None)
    try:
        value = yaml.safe_load(text) if text.strip() else None
    except yaml.YAMLError as exc:
        raise ConfigError(f"cannot parse value {text!r}: {exc}", field=key) from exc
    return key.strip().split("."), value


def apply_overrides(raw: dict, overrides: Sequence[str]) -> dict:
    """Set dotted keys (``train.epochs=5``) in a nested mapping."""
    for item in overrides:
        path, value = _parse_override(item)
        node = raw
        for part in path[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigError(f"{part} is not a section", field=".".join(path))
            node = child
        node[path[-1]] = value
    return raw


def _first_error(exc: ValidationError) -> ConfigError:
    error = exc.errors()[0]
    field = ".".join(str(part) for part in error["loc"])
    return ConfigError(error["msg"], field=field or None)


def load_config(path: Optional[Union[str, Path]] = None, overrides: Sequence[str] = (),
                check_paths: bool = True) -> ExperimentConfig:
    """
    Read, override and validate an experiment file.

    With ``check_paths`` the dataset directory (explicit or from the
    ``ADMM_NN_DATA_DIR`` environment variable, ``.env`` honoured) must exist.
    """
    load_dotenv()
    raw: dict = {}
    if path is not None:
        path = Path(path)
        if not path.exists():
            raise ConfigError(f"config file not found: {path}", field="config")
        try:
            raw = yaml.safe_load(path.read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"cannot parse {path}: {exc}", field="config") from exc
        if not isinstance(raw, dict):
            raise ConfigError(f"{path} must hold a mapping", field="config")
    raw = apply_overrides(raw, overrides)
    try:
        config = ExperimentConfig.model_validate(raw)
    except ValidationError as exc:
        raise _first_error(exc) from exc

    if check_paths and config.dataset == "mnist":
        try:
            directory = resolve_data_dir(config.dataset_path)
        except FileNotFoundError as exc:
            raise ConfigError(str(exc), field="dataset_path") from exc
        if not directory.is_dir():
            raise ConfigError(f"dataset directory {directory} does not exist "
                              f"(set dataset_path or {DATA_DIR_ENV})", field="dataset_path")
        config = config.model_copy(update={"dataset_path": str(directory)})
    logger.debug(f"config: arch={config.arch} dataset={config.dataset} seed={config.seed}")
    return config
