"""
Configuration settings for the action-tree parsing toolkit
"""

import hashlib
import json
from pathlib import Path
from typing import Any, Dict, Optional

from pydantic import BaseModel, Field, field_validator, model_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

PACKAGE_DIR = Path(__file__).resolve().parent

VARIANTS = ("independent", "seq2tree", "sentencerec")


class Settings(BaseSettings):
    """Toolkit settings loaded from environment variables"""

    model_config = SettingsConfigDict(
        env_prefix="ACTIONPARSE_",
        env_file=".env",
        env_file_encoding="utf-8",
        case_sensitive=True,
        extra="ignore",
    )

    # Logging Configuration
    LOG_LEVEL: str = Field(default="INFO")
    LOG_FORMAT: str = Field(default="console")  # json or console

    # Reference data shipped with the toolkit
    DATA_DIR: Path = Field(default=PACKAGE_DIR / "data")
    SCHEMA_FILE: str = Field(default="reference_schema.json")
    TEMPLATE_FILE: str = Field(default="reference_templates.json")
    NOOP_CORPUS_FILE: str = Field(default="noop_dialogue.txt")
    DISTRIBUTIONS_DIR: str = Field(default="distributions")

    # Model dimensions (desk scale; the published runs used MODEL_DIM=256)
    MODEL_DIM: int = Field(default=64)
    ATTENTION_HEADS: int = Field(default=2)
    ENCODER_LAYERS: int = Field(default=2)
    FREE_DIMS: int = Field(default=8)
    PRETRAINED_DIMS: int = Field(default=32)

    # Training Configuration
    LEARNING_RATE: float = Field(default=0.05)
    DROPOUT: float = Field(default=0.2)
    WORD_DROPOUT: float = Field(default=0.1)
    LABEL_SMOOTHING: float = Field(default=0.1)
    BATCH_SIZE: int = Field(default=8)
    TRAIN_STEPS: int = Field(default=6000)
    EVAL_INTERVAL: int = Field(default=500)
    BEAM_WIDTH: int = Field(default=1)
    SEED: int = Field(default=0)

    # Generation Configuration
    NOOP_FRACTION: float = Field(default=1.0 / 15.0)
    TRAIN_SIZE: int = Field(default=20000)
    VALID_SIZE: int = Field(default=1000)
    TEST_SIZE: int = Field(default=1000)

    @property
    def schema_path(self) -> Path:
        return self.DATA_DIR / self.SCHEMA_FILE

    @property
    def template_path(self) -> Path:
        return self.DATA_DIR / self.TEMPLATE_FILE

    @property
    def noop_corpus_path(self) -> Path:
        return self.DATA_DIR / self.NOOP_CORPUS_FILE

    def distribution_path(self, name: str) -> Path:
        return self.DATA_DIR / self.DISTRIBUTIONS_DIR / f"{name}.json"


# Global settings instance
settings = Settings()


class Hyperparameters(BaseModel):
    """Model and optimisation hyperparameters"""

    dim: int = Field(default_factory=lambda: settings.MODEL_DIM, ge=1)
    heads: int = Field(default_factory=lambda: settings.ATTENTION_HEADS, ge=1)
    encoder_layers: int = Field(default_factory=lambda: settings.ENCODER_LAYERS, ge=1)
    free_dims: int = Field(default_factory=lambda: settings.FREE_DIMS, ge=0)
    pretrained_dims: int = Field(default_factory=lambda: settings.PRETRAINED_DIMS, ge=0)
    learning_rate: float = Field(default_factory=lambda: settings.LEARNING_RATE, gt=0)
    dropout: float = Field(default_factory=lambda: settings.DROPOUT)
    word_dropout: float = Field(default_factory=lambda: settings.WORD_DROPOUT)
    label_smoothing: float = Field(default_factory=lambda: settings.LABEL_SMOOTHING)
    batch_size: int = Field(default_factory=lambda: settings.BATCH_SIZE, ge=1)
    steps: int = Field(default_factory=lambda: settings.TRAIN_STEPS, ge=0)
    eval_interval: int = Field(default_factory=lambda: settings.EVAL_INTERVAL, ge=1)
    beam_width: int = Field(default_factory=lambda: settings.BEAM_WIDTH, ge=1)

    @field_validator("dropout", "word_dropout", "label_smoothing")
    @classmethod
    def validate_rate(cls, v):
        if not 0.0 <= v < 1.0:
            raise ValueError(f"Rate must lie in [0, 1): {v}")
        return v

    @model_validator(mode="after")
    def validate_embedding_width(self):
        if self.free_dims + self.pretrained_dims == 0:
            raise ValueError("Embedding width is zero: set free_dims or pretrained_dims")
        return self


class RunConfig(BaseModel):
    """Everything a command needs to run reproducibly"""

    schema_path: Path = Field(default_factory=lambda: settings.schema_path)
    library_path: Path = Field(default_factory=lambda: settings.template_path)
    noop_corpus_path: Optional[Path] = Field(default_factory=lambda: settings.noop_corpus_path)
    embedding_path: Optional[Path] = None
    distribution_path: Optional[Path] = None
    hyper: Hyperparameters = Field(default_factory=Hyperparameters)
    seed: int = Field(default_factory=lambda: settings.SEED)
    train_size: int = Field(default_factory=lambda: settings.TRAIN_SIZE, ge=1)
    valid_size: int = Field(default_factory=lambda: settings.VALID_SIZE, ge=1)
    test_size: int = Field(default_factory=lambda: settings.TEST_SIZE, ge=1)
    noop_fraction: float = Field(default_factory=lambda: settings.NOOP_FRACTION, ge=0.0, le=1.0)
    variant: str = "sentencerec"
    output_dir: Path = Path("runs")

    @field_validator("variant")
    @classmethod
    def validate_variant(cls, v):
        if v not in VARIANTS:
            raise ValueError(f"Unknown model variant '{v}', expected one of {VARIANTS}")
        return v

    @field_validator("schema_path", "library_path", "noop_corpus_path", "embedding_path", "distribution_path")
    @classmethod
    def validate_exists(cls, v):
        if v is not None and not Path(v).exists():
            raise ValueError(f"Referenced path does not exist: {v}")
        return v

    def digest(self) -> str:
        """Stable short hash of the configuration, embedded in output artifacts

        The output directory is left out so that identical runs written to different places
        carry the same digest.
        """
        payload = json.dumps(self.model_dump(mode="json", exclude={"output_dir"}), sort_keys=True)
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]


def _merge(base: Dict[str, Any], update: Dict[str, Any]) -> Dict[str, Any]:
    merged = dict(base)
    for key, value in update.items():
        if isinstance(value, dict) and isinstance(merged.get(key), dict):
            merged[key] = _merge(merged[key], value)
        else:
            merged[key] = value
    return merged


def resolve_run_config(config_file: Optional[Path], overrides: Dict[str, Any]) -> RunConfig:
    """Build a RunConfig with precedence flags > config file > environment > defaults

    Args:
        config_file: Optional JSON file with RunConfig fields
        overrides: Values given on the command line; None entries are ignored

    Returns:
        Validated RunConfig
    """
    data: Dict[str, Any] = {}
    if config_file is not None:
        with open(config_file, "r", encoding="utf-8") as f:
            data = json.load(f)

    flags: Dict[str, Any] = {}
    hyper_flags: Dict[str, Any] = {}
    for key, value in overrides.items():
        if value is None:
            continue
        if key in Hyperparameters.model_fields:
            hyper_flags[key] = value
        else:
            flags[key] = value
    if hyper_flags:
        flags["hyper"] = hyper_flags

    return RunConfig.model_validate(_merge(data, flags))
