import hashlib
import logging
import os
from dataclasses import replace
from enum import Enum
from pathlib import Path
from typing import Any, Dict, List, Mapping, Optional, Tuple, Union

import numpy as np
from dotenv import dotenv_values
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

from core.dataset import FORMAT_PRESETS, InteractionFormat, validate_ratios
from core.estimator import GammaMethod
from core.ml_models import DEFAULT_LAYERS, ModelKind
from core.train import IplScope, OptimizerKind, TrainConfig

logger = logging.getLogger(__name__)

MANIFEST_NAME = "manifest.txt"


class ConfigError(ValueError):
    """Raised when an experiment configuration cannot be resolved."""


class QStarSource(str, Enum):
    TRAIN = "train"
    FULL = "full"


def default_output_root() -> str:
    return os.getenv("IPL_OUTPUT_ROOT", "runs")


def _split_floats(value: Any) -> Any:
    if isinstance(value, str):
        return [float(part) for part in value.split(",") if part.strip()]
    return value


class ExperimentConfig(BaseModel):
    """Fully resolved experiment settings; serialised verbatim as every run's manifest."""

    model_config = ConfigDict(extra="forbid")

    # dataset
    dataset_path: Optional[str] = None
    dataset_name: Optional[str] = None
    format: str = "csv"
    delimiter: Optional[str] = None
    user_column: Optional[int] = Field(None, ge=0)
    item_column: Optional[int] = Field(None, ge=0)
    rating_column: Optional[int] = Field(None, ge=0)
    rating_threshold: Optional[float] = None
    has_header: Optional[bool] = None

    # split
    split_ratios: Tuple[float, float, float] = (0.7, 0.1, 0.2)
    split_seed: int = 0

    # model
    model: ModelKind = ModelKind.MF
    dim: int = Field(64, ge=1)
    n_layers: int = Field(DEFAULT_LAYERS, ge=0)
    init_scale: Optional[float] = Field(None, ge=0)
    dtype: str = "float32"

    # training
    epochs: int = Field(20, ge=0)
    batch_size: int = Field(1024, ge=1)
    learning_rate: float = Field(0.05, ge=0)
    l2_coeff: float = Field(1e-4, ge=0)
    lambda_f: float = Field(0.0, ge=0)
    optimizer: OptimizerKind = OptimizerKind.SGD
    seed: int = 0
    eval_every: int = Field(1, ge=0)
    ipl_scope: IplScope = IplScope.BATCH
    early_stopping_patience: Optional[int] = Field(None, ge=1)

    # estimator and metrics
    gamma_method: GammaMethod = GammaMethod.CONFIG_SUPPLIED
    gamma: Optional[float] = None
    q_star_source: QStarSource = QStarSource.TRAIN
    k: int = Field(20, ge=1)
    mi_bins: int = Field(10, ge=2)
    snips_eta: Optional[float] = Field(None, ge=0)

    # lambda_f sweep
    sweep_min: float = Field(1e-6, gt=0)
    sweep_max: float = Field(1e-2, gt=0)
    sweep_points: int = Field(20, ge=1)
    sweep_grid: Optional[List[float]] = None

    # proposition check
    proposition_c: float = Field(0.99, gt=0, lt=1)
    proposition_threshold: float = Field(1e-10, gt=0)
    pareto_x_min: float = Field(1.0, ge=1)
    raw_bound_formula: bool = False

    # runtime
    output_dir: str = Field(default_factory=default_output_root)
    run_name: Optional[str] = None
    deterministic: bool = True
    n_workers: int = Field(1, ge=1)
    checkpoint_format: str = "json"

    @field_validator("split_ratios", mode="before")
    @classmethod
    def _parse_ratios(cls, value):
        return validate_ratios(_split_floats(value))

    @field_validator("sweep_grid", mode="before")
    @classmethod
    def _parse_grid(cls, value):
        grid = _split_floats(value)
        if grid is not None and len(grid) == 0:
            raise ValueError("sweep_grid must not be empty")
        if grid is not None and any(v < 0 for v in grid):
            raise ValueError("sweep_grid values must be non-negative")
        return grid

    @field_validator("format")
    @classmethod
    def _known_format(cls, value):
        if value not in FORMAT_PRESETS:
            raise ValueError(f"Unknown format '{value}'. Must be one of {sorted(FORMAT_PRESETS)}.")
        return value

    @field_validator("run_name")
    @classmethod
    def _single_path_component(cls, value):
        if value is None:
            return value
        if value in (".", "..") or Path(value).name != value or "/" in value or "\\" in value:
            raise ValueError("run_name must be a single directory name without separators or '..'")
        return value

    @field_validator("dtype")
    @classmethod
    def _known_dtype(cls, value):
        if value not in ("float32", "float64"):
            raise ValueError("dtype must be float32 or float64")
        return value

    @field_validator("checkpoint_format")
    @classmethod
    def _known_checkpoint_format(cls, value):
        if value not in ("json", "bin"):
            raise ValueError("checkpoint_format must be json or bin")
        return value

    def interaction_format(self) -> InteractionFormat:
        """Preset layout with any explicitly configured column or delimiter applied on top."""
        overrides = {
            name: getattr(self, name)
            for name in ("delimiter", "user_column", "item_column", "rating_column", "rating_threshold", "has_header")
            if getattr(self, name) is not None
        }
        return replace(FORMAT_PRESETS[self.format], **overrides)

    def train_config(self, gamma: Optional[float]) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size,
            learning_rate=self.learning_rate,
            l2_coeff=self.l2_coeff,
            lambda_f=self.lambda_f,
            gamma=gamma,
            optimizer=self.optimizer,
            seed=self.seed,
            eval_every=self.eval_every,
            eval_k=self.k,
            ipl_scope=self.ipl_scope,
            early_stopping_patience=self.early_stopping_patience,
            deterministic=self.deterministic,
        )

    def sweep_values(self) -> List[float]:
        """Explicit grid, or sweep_points log-spaced values from sweep_min to sweep_max."""
        if self.sweep_grid is not None:
            return list(self.sweep_grid)
        if self.sweep_points == 1:
            return [self.sweep_min]
        return [float(v) for v in np.geomspace(self.sweep_min, self.sweep_max, self.sweep_points)]

    def to_flat(self) -> Dict[str, str]:
        flat = {}
        for name, value in self.model_dump().items():
            if value is None:
                flat[name] = ""
            elif isinstance(value, Enum):
                flat[name] = value.value
            elif isinstance(value, bool):
                flat[name] = "true" if value else "false"
            elif isinstance(value, (list, tuple)):
                flat[name] = ",".join(repr(float(v)) for v in value)
            elif isinstance(value, float):
                flat[name] = repr(value)
            else:
                flat[name] = str(value)
        return flat

    def digest(self) -> str:
        """Stable short hash of the resolved settings, ignoring where outputs go."""
        flat = self.to_flat()
        flat.pop("output_dir", None)
        flat.pop("run_name", None)
        text = "\n".join(f"{key}={flat[key]}" for key in sorted(flat))
        return hashlib.sha256(text.encode("utf-8")).hexdigest()[:12]

    def run_id(self) -> str:
        return self.run_name or f"{self.model.value}-lf{self.lambda_f:g}-s{self.seed}-{self.digest()}"

    def run_dir(self) -> Path:
        """output_dir/run_id, refusing anything that resolves outside output_dir."""
        root = Path(self.output_dir).resolve()
        run_dir = (root / self.run_id()).resolve()
        if run_dir.parent != root:
            raise ConfigError(f"Run directory '{run_dir}' escapes output_dir '{root}'")
        return run_dir


def _clean(values: Mapping[str, Optional[str]]) -> Dict[str, Any]:
    # empty values mean "unset"; whitespace is kept since a tab is a valid delimiter
    return {key.strip(): value for key, value in values.items() if value is not None and str(value) != ""}


def parse_overrides(pairs: Optional[List[str]]) -> Dict[str, str]:
    overrides = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise ConfigError(f"Override '{pair}' must look like key=value")
        key, value = pair.split("=", 1)
        overrides[key.strip()] = value.strip()
    return overrides


def load_experiment_config(
    path: Optional[Union[str, os.PathLike]] = None,
    overrides: Optional[Mapping[str, Any]] = None,
) -> ExperimentConfig:
    """Read a flat key=value file (dotenv syntax) and apply overrides; overrides win and an empty one clears the key."""
    values: Dict[str, Any] = {}
    if path is not None:
        if not Path(path).is_file():
            raise ConfigError(f"Config file '{path}' not found")
        values.update(_clean(dotenv_values(path)))
    for key, value in (overrides or {}).items():
        if value is None or str(value) == "":
            values.pop(key.strip(), None)
        else:
            values[key.strip()] = value
    try:
        config = ExperimentConfig.model_validate(values)
    except ValidationError as e:
        logger.error(f"Invalid experiment config: {e}")
        raise ConfigError(str(e)) from e
    logger.debug(f"Resolved experiment config: {config.to_flat()}")
    return config


def write_manifest(config: ExperimentConfig, path: Union[str, os.PathLike], extra: Optional[Mapping[str, Any]] = None) -> Path:
    """Write the resolved config as key=value lines; `extra` goes in as comments so the file reloads cleanly."""
    path = Path(path)
    flat = config.to_flat()
    lines = [f"{key}={_quote(flat[key])}" for key in sorted(flat)]
    for key, value in (extra or {}).items():
        lines.append(f"# {key}={value}")
    path.write_text("\n".join(lines) + "\n")
    return path


def _quote(value: str) -> str:
    # dotenv treats unquoted '#' and surrounding whitespace specially
    if value and (value != value.strip() or "#" in value or "\t" in value or " " in value):
        escaped = value.replace("\\", "\\\\").replace('"', '\\"').replace("\t", "\\t")
        return f'"{escaped}"'
    return value
