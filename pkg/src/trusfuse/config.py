"""
Run configuration documents.

A document is a JSON object with optional sections; missing sections and
fields take the defaults below. Precedence: defaults < document < CLI flags.
"""

import json
import os
from pathlib import Path
from typing import Any, Dict, List, Literal, Optional, Tuple, TypeVar

from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from .errors import ConfigError
from .network import NetworkConfig
from .phantom import PhantomConfig
from .trainer import TrainConfig
from .videodata import DEFAULT_CACHE_SIZE

DATA_ROOT_ENV = "TRUSFUSE_DATA_ROOT"

Variant = Literal["bmode", "swe", "concat", "fusion", "fusion_or"]
VARIANTS: Tuple[str, ...] = ("bmode", "swe", "concat", "fusion", "fusion_or")

Section = TypeVar("Section", bound=BaseModel)


class DataConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    input_dims: Optional[Tuple[int, int, int]] = None
    test_fraction: float = 0.25
    split_seed: int = 0
    cache_size: int = DEFAULT_CACHE_SIZE

    @field_validator("cache_size")
    @classmethod
    def _cache_size(cls, v):
        if v < 0:
            raise ValueError("cache_size must be >= 0")
        return v

    @field_validator("input_dims")
    @classmethod
    def _dims(cls, v):
        if v is not None and any(d < 1 for d in v):
            raise ValueError(f"input_dims must be positive, got {v}")
        return v

    @field_validator("test_fraction")
    @classmethod
    def _fraction(cls, v):
        if not 0.0 < v < 1.0:
            raise ValueError("test_fraction must lie in (0, 1)")
        return v


class EvaluationConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    threshold: float = 0.5
    roc_plot: bool = True

    @field_validator("threshold")
    @classmethod
    def _threshold(cls, v):
        if not 0.0 <= v <= 1.0:
            raise ValueError("threshold must lie in [0, 1]")
        return v


class CamConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    layer: Optional[str] = None
    target_class: Literal[0, 1] = 1
    alpha: float = 0.5
    dilation_fraction: float = 0.1
    animate: bool = False
    fps: int = 4

    @field_validator("alpha")
    @classmethod
    def _alpha(cls, v):
        if not 0.0 <= v <= 1.0:
            raise ValueError("alpha must lie in [0, 1]")
        return v

    @field_validator("dilation_fraction")
    @classmethod
    def _dilation(cls, v):
        if v < 0:
            raise ValueError("dilation_fraction must be >= 0")
        return v

    @field_validator("fps")
    @classmethod
    def _fps(cls, v):
        if v < 1:
            raise ValueError("fps must be >= 1")
        return v


class AblationConfig(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    variants: List[Variant] = Field(default_factory=lambda: list(VARIANTS))
    seeds: List[int] = Field(default_factory=lambda: [0])

    @field_validator("variants", "seeds")
    @classmethod
    def _non_empty_unique(cls, v):
        if not v:
            raise ValueError("must not be empty")
        if len(set(v)) != len(v):
            raise ValueError(f"duplicates in {v}")
        return v


class RunConfigDocument(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)

    variant: Optional[Variant] = None
    phantom: PhantomConfig = Field(default_factory=PhantomConfig)
    network: NetworkConfig = Field(default_factory=NetworkConfig)
    training: TrainConfig = Field(default_factory=TrainConfig)
    evaluation: EvaluationConfig = Field(default_factory=EvaluationConfig)
    cam: CamConfig = Field(default_factory=CamConfig)
    ablation: AblationConfig = Field(default_factory=AblationConfig)
    data: DataConfig = Field(default_factory=DataConfig)

    def resolved(self) -> Dict[str, Any]:
        return self.model_dump(mode="json")


def load_run_config(path: Optional[Path]) -> RunConfigDocument:
    """Read a JSON document; `None` yields the all-defaults document."""
    if path is None:
        return RunConfigDocument()
    path = Path(path)
    try:
        data = json.loads(path.read_text())
    except OSError as e:
        raise ConfigError(f"Cannot read config {path}: {e}") from e
    except json.JSONDecodeError as e:
        raise ConfigError(f"Config {path} is not valid JSON: {e}") from e
    try:
        return RunConfigDocument.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"Invalid config {path}: {_first_error(e)}") from e


def _first_error(error: ValidationError) -> str:
    first = error.errors()[0]
    location = ".".join(str(part) for part in first["loc"]) or "<root>"
    return f"{location}: {first['msg']} ({error.error_count()} error(s))"


def override(section: Section, **values) -> Section:
    """Re-validate `section` with the non-None `values` applied on top."""
    updates = {k: v for k, v in values.items() if v is not None}
    if not updates:
        return section
    try:
        return type(section).model_validate({**section.model_dump(), **updates})
    except ValidationError as e:
        raise ConfigError(f"Invalid {type(section).__name__} override: {_first_error(e)}") from e


def override_document(document: RunConfigDocument, **sections) -> RunConfigDocument:
    """Replace whole sections (and `variant`) of a document."""
    updates = {k: v for k, v in sections.items() if v is not None}
    if not updates:
        return document
    return document.model_copy(update=updates)


def variant_configs(document: RunConfigDocument, variant: Optional[str] = None) -> Tuple[NetworkConfig, TrainConfig]:
    """Network and training config of one ablation row; without a variant the sections are used as given."""
    variant = variant or document.variant
    network = document.network.model_dump()
    training = document.training
    if variant is None:
        return document.network, training
    if variant not in VARIANTS:
        raise ConfigError(f"Unknown variant '{variant}'; expected one of {', '.join(VARIANTS)}")

    network.update(single_modality=None, concat_baseline=False, fusion_enabled=True)
    if variant in ("bmode", "swe"):
        network.update(single_modality=variant, fusion_enabled=False)
    elif variant == "concat":
        network.update(concat_baseline=True, fusion_enabled=False)
    if variant != "fusion_or":
        training = override(training, ortho_lambda=0.0)
    try:
        return NetworkConfig.model_validate(network), training
    except ValidationError as e:
        raise ConfigError(f"Variant '{variant}' yields an invalid network config: {_first_error(e)}") from e


def default_data_root() -> Optional[Path]:
    value = os.environ.get(DATA_ROOT_ENV)
    return Path(value) if value else None


