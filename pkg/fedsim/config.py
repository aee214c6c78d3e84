"""
Configuration models for fedsim.

Every experiment knob lives in a pydantic model whose field names are also the
keys of the JSON config file and the long names of the CLI flags.
"""
import json
import os
from pathlib import Path
from typing import Any, Dict, List, Literal, Mapping, Optional, Type, TypeVar

from pydantic import BaseModel, ConfigDict, Field, model_validator

from .errors import InvalidInputError

DEFAULT_C_VALUES = (0.1, 0.3, 0.5, 0.7)
DEFAULT_E_VALUES = (1, 3, 5)
DEFAULT_BATCH_SIZE = 64
DEFAULT_ROUNDS = 50
DEFAULT_LR = 5e-4
HIGH_VOLUME_MIN_CLIPS = 100

THREADS_ENV_VAR = "FSIM_THREADS"

ConfigT = TypeVar("ConfigT", bound=BaseModel)


class _Config(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class ModelSpec(_Config):
    """Shape of a reference classifier (linear or one-hidden-layer MLP)."""

    kind: Literal["linear", "mlp"] = "linear"
    input_dim: int = Field(ge=1)
    hidden_dim: Optional[int] = Field(default=None, ge=1)
    num_classes: int = Field(ge=1)

    @model_validator(mode="after")
    def _check_hidden(self) -> "ModelSpec":
        if self.kind == "mlp" and self.hidden_dim is None:
            raise ValueError("hidden_dim is required when kind is 'mlp'")
        return self


class OptimizerConfig(_Config):
    """Optimizer choice and hyperparameters."""

    name: Literal["sgd", "adam"] = "adam"
    lr: float = Field(default=DEFAULT_LR, gt=0)
    beta1: float = Field(default=0.9, ge=0, lt=1)
    beta2: float = Field(default=0.999, ge=0, lt=1)
    epsilon: float = Field(default=1e-8, ge=0)


class FederationConfig(_Config):
    """FedAvg run parameters: C, E, B plus rounds, seed and strategy choices."""

    C: float = Field(default=0.1, gt=0, le=1)
    E: int = Field(default=1, ge=1)
    B: int = Field(default=DEFAULT_BATCH_SIZE, ge=1)
    rounds: int = Field(default=DEFAULT_ROUNDS, ge=1)
    seed: int = Field(default=0, ge=0)
    optimizer: OptimizerConfig = OptimizerConfig()
    sampler: Literal["uniform", "proportional", "hybrid"] = "uniform"
    aggregator: Literal["fedavg", "stale"] = "fedavg"
    guaranteed_clients: int = Field(default=1, ge=0)
    threads: Optional[int] = Field(default=None, ge=1)


class CentralConfig(_Config):
    """Centralized baseline: pooled training with early stopping."""

    epochs: int = Field(default=100, ge=1)
    batch_size: int = Field(default=DEFAULT_BATCH_SIZE, ge=1)
    seed: int = Field(default=0, ge=0)
    optimizer: OptimizerConfig = OptimizerConfig()
    patience: int = Field(default=5, ge=1)


class GridSpec(_Config):
    """C x E grid with fixed batch size, run once per seed."""

    C_values: List[float] = Field(default=list(DEFAULT_C_VALUES), min_length=1)
    E_values: List[int] = Field(default=list(DEFAULT_E_VALUES), min_length=1)
    B: int = Field(default=DEFAULT_BATCH_SIZE, ge=1)
    rounds: int = Field(default=DEFAULT_ROUNDS, ge=1)
    seeds: List[int] = Field(default=[0], min_length=1)

    @model_validator(mode="after")
    def _check_values(self) -> "GridSpec":
        for c in self.C_values:
            if not 0 < c <= 1:
                raise ValueError(f"C value {c} outside (0, 1]")
        for e in self.E_values:
            if e < 1:
                raise ValueError(f"E value {e} must be >= 1")
        for seed in self.seeds:
            if seed < 0:
                raise ValueError(f"seed {seed} must be >= 0")
        return self


class SynthTaskSpec(_Config):
    """Synthetic non-IID multi-label task."""

    num_clients: int = Field(default=20, ge=1)
    num_classes: int = Field(default=10, ge=1)
    input_dim: int = Field(default=20, ge=1)
    size_exponent: float = Field(default=1.5, ge=0)
    min_size: int = Field(default=20, ge=1)
    max_size: int = Field(default=400, ge=1)
    concentration: float = Field(default=0.1, gt=0)
    eval_fraction: float = Field(default=0.2, gt=0, lt=1)
    noise_scale: float = Field(default=1.0, ge=0)
    extra_label_prob: float = Field(default=0.2, ge=0, le=1)
    seed: int = Field(default=0, ge=0)


def load_config(
    path: Optional[Path],
    model: Type[ConfigT],
    overrides: Optional[Mapping[str, Any]] = None,
) -> ConfigT:
    """
    Load a JSON config file and apply overrides.

    Args:
        path: JSON document whose keys mirror the model fields, or None
        model: pydantic model class to validate against
        overrides: values that replace file values (None entries are ignored)

    Returns:
        Validated config instance
    """
    data: Dict[str, Any] = {}
    if path is not None:
        with open(path, encoding="utf-8") as fh:
            data = json.load(fh)
        if not isinstance(data, dict):
            raise InvalidInputError(f"{path}: config must be a JSON object")
    for key, value in (overrides or {}).items():
        if value is None:
            continue
        if isinstance(value, dict):
            merged = dict(data.get(key) or {})
            merged.update({k: v for k, v in value.items() if v is not None})
            data[key] = merged
        else:
            data[key] = value
    return model.model_validate(data)


def resolve_threads(explicit: Optional[int] = None) -> int:
    """
    Number of worker threads to use.

    Args:
        explicit: value from config; wins over the environment

    Returns:
        Worker count >= 1
    """
    if explicit is not None:
        return explicit
    raw = os.environ.get(THREADS_ENV_VAR)
    if not raw:
        return 1
    try:
        threads = int(raw)
    except ValueError:
        raise InvalidInputError(f"{THREADS_ENV_VAR}={raw!r} is not an integer") from None
    if threads < 1:
        raise InvalidInputError(f"{THREADS_ENV_VAR} must be >= 1, got {threads}")
    return threads
