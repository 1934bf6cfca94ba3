"""Versioned YAML experiment configuration; unknown keys are rejected."""

from pathlib import Path
from typing import Literal, Optional

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator, model_validator

from .data import TASKS
from .errors import ConfigError
from .inference import ALGORITHMS, OBJECTIVES
from .kernels import kernel_from_dict
from .likelihoods import likelihood_from_dict
from .training import TrainConfig

SCHEMA_VERSION = 1


def _check_spec(build, spec):
    try:
        build(spec)
    except (TypeError, KeyError) as exc:
        raise ValueError(f"invalid settings {spec}: {exc}") from None


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class DataSection(_Strict):
    """Either a CSV ``path`` or a ``generator`` with ``n`` and a mandatory ``seed``."""

    path: Optional[str] = None
    generator: Optional[str] = None
    n: Optional[int] = Field(default=None, ge=2)
    seed: Optional[int] = Field(default=None, ge=0)

    @model_validator(mode="after")
    def _one_source(self):
        if (self.path is None) == (self.generator is None):
            raise ValueError("data needs exactly one of 'path' or 'generator'")
        if self.generator is not None:
            if self.generator not in TASKS:
                raise ValueError(f"unknown generator {self.generator!r}; choose from {', '.join(TASKS)}")
            if self.n is None or self.seed is None:
                raise ValueError("generated data needs 'n' and 'seed'")
        return self


class InducingSection(_Strict):
    M: int = Field(default=50, ge=2)
    M_z: Optional[int] = Field(default=None, ge=1)
    spatial_path: Optional[str] = None


class AlgorithmSection(_Strict):
    name: Literal[ALGORITHMS] = "cvi"
    rho: float = Field(default=1.0, gt=0, le=1)
    alpha: float = Field(default=1.0, gt=0, le=1)
    damping: Optional[float] = Field(default=None, gt=0, le=1)
    parallel: bool = True
    sweeps: int = Field(default=20, ge=0)

    def settings(self):
        return {"rho": self.rho, "alpha": self.alpha, "damping": self.damping, "parallel": self.parallel}


class TrainSection(_Strict):
    iterations: int = Field(default=500, ge=0)
    learning_rate: float = Field(default=0.01, gt=0)
    beta1: float = Field(default=0.9, ge=0, lt=1)
    beta2: float = Field(default=0.999, ge=0, lt=1)
    adam_eps: float = Field(default=1e-8, gt=0)
    fd_epsilon: float = Field(default=1e-4, gt=0)
    objective: Literal[OBJECTIVES] = "elbo"
    trainable: Optional[list[str]] = None

    def to_train_config(self, seed):
        values = self.model_dump()
        values["trainable"] = None if self.trainable is None else tuple(self.trainable)
        return TrainConfig(seed=seed, **values)


class SweepSection(_Strict):
    M: list[int] = Field(default_factory=lambda: [4, 8, 16, 32])

    @field_validator("M")
    @classmethod
    def _sizes(cls, v):
        if not v or min(v) < 2:
            raise ValueError("sweep sizes must be at least 2")
        return v


class ExperimentConfig(_Strict):
    schema_version: Literal[SCHEMA_VERSION]
    kernel: dict
    spatial_kernel: Optional[dict] = None
    likelihood: dict
    data: DataSection
    inducing: InducingSection = InducingSection()
    algorithm: AlgorithmSection = AlgorithmSection()
    train: TrainSection = TrainSection()
    sweep: SweepSection = SweepSection()
    folds: int = Field(default=10, ge=2)
    seed: int = Field(default=0, ge=0)
    output: str = "results"

    @field_validator("kernel", "spatial_kernel")
    @classmethod
    def _kernel(cls, v):
        if v is not None:
            _check_spec(kernel_from_dict, v)
        return v

    @field_validator("likelihood")
    @classmethod
    def _likelihood(cls, v):
        _check_spec(likelihood_from_dict, v)
        return v

    def build_kernel(self):
        return kernel_from_dict(self.kernel)

    def build_spatial_kernel(self):
        return None if self.spatial_kernel is None else kernel_from_dict(self.spatial_kernel)

    def build_likelihood(self):
        return likelihood_from_dict(self.likelihood)


def _resolve(cfg, base):
    """Make file references relative to the config file and check they exist."""
    updates = {}
    if cfg.data.path is not None:
        path = (base / cfg.data.path).resolve()
        if not path.is_file():
            raise ConfigError(f"data file not found: {path}")
        updates["data"] = cfg.data.model_copy(update={"path": str(path)})
    if cfg.inducing.spatial_path is not None:
        path = (base / cfg.inducing.spatial_path).resolve()
        if not path.is_file():
            raise ConfigError(f"spatial inducing file not found: {path}")
        updates["inducing"] = cfg.inducing.model_copy(update={"spatial_path": str(path)})
    return cfg.model_copy(update=updates) if updates else cfg


def parse_config(data, base=Path(".")):
    """Validate a mapping; file paths are resolved against ``base``."""
    if not isinstance(data, dict):
        raise ConfigError("configuration must be a mapping")
    try:
        cfg = ExperimentConfig.model_validate(data)
    except ValidationError as exc:
        problems = "; ".join(f"{'.'.join(map(str, e['loc'])) or '<root>'}: {e['msg']}" for e in exc.errors())
        raise ConfigError(problems) from None
    return _resolve(cfg, Path(base))


def load_config(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    try:
        data = yaml.safe_load(text)
    except yaml.YAMLError as exc:
        raise ConfigError(f"invalid YAML in {path}: {exc}") from None
    return parse_config(data, path.parent)


__all__ = ["SCHEMA_VERSION", "ExperimentConfig", "parse_config", "load_config"]
