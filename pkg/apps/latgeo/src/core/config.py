"""Core configuration settings."""

import json
import logging
from functools import lru_cache
from pathlib import Path
from typing import Any, Optional

from pydantic import Field, ValidationError, field_validator
from pydantic_settings import BaseSettings, SettingsConfigDict

from src.core.exceptions import ConfigError
from src.domain.run_models import RunConfig

logger = logging.getLogger(__name__)


class Settings(BaseSettings):
    """Process-wide settings with environment variable support."""
    # Pydantic settings
    model_config = SettingsConfigDict(
        env_file=".env",
        env_file_encoding="utf-8",
        env_prefix="LATGEO_",
        case_sensitive=False,
        extra="ignore"
    )

    app_name: str = Field(default="latgeo", description="Application name")
    app_version: str = Field(default="0.1.0", description="Application version")

    # Runtime Settings
    threads: int = Field(
        default=1,
        ge=1,
        description="Cap on internal parallelism (validation decoding workers)"
    )
    log_level: str = Field(default="INFO", description="Root logging level")
    default_seed: int = Field(default=0, ge=0, description="Seed used when no --seed is given")
    artifacts_dir: Path = Field(
        default=Path("artifacts"),
        description="Default directory for checkpoints, logs and manifests"
    )

    # Checkpoint Settings
    checkpoint_version: int = Field(
        default=1,
        description="Checkpoint format version written and accepted on load"
    )

    @field_validator("log_level", mode="after")
    @classmethod
    def normalize_log_level(cls, v: str) -> str:
        """Accept lower-case level names from the environment."""
        level = v.upper()
        # logging.getLevelNamesMapping() is 3.11+; it returns a copy of _nameToLevel.
        names = logging.getLevelNamesMapping() if hasattr(logging, "getLevelNamesMapping") else logging._nameToLevel
        if level not in names:
            raise ValueError(f"Unknown log level '{v}'")
        return level


@lru_cache
def get_settings() -> Settings:
    """Get cached settings instance."""
    return Settings()


def _assign_dotted(target: dict[str, Any], dotted_key: str, value: Any) -> None:
    """Write `value` into a nested dict following a flat dotted key."""
    parts = dotted_key.split(".")
    if len(parts) != 2 or not all(parts):
        raise ConfigError(
            f"Config key '{dotted_key}' must have the form '<section>.<field>'"
        )
    section, field = parts
    target.setdefault(section, {})[field] = value


def resolve_run_config(
    config_path: Optional[Path] = None,
    overrides: Optional[dict[str, Any]] = None,
    defaults: Optional[dict[str, Any]] = None,
) -> RunConfig:
    """
    Resolve the run configuration: defaults < config file < flag overrides.

    Args:
        config_path: JSON file with flat dotted keys, e.g. {"model.d_model": 64}
        overrides: flat dotted keys from command-line flags (None values are skipped)
        defaults: flat dotted keys applied below the file, e.g. the settings seed

    Returns:
        Validated RunConfig

    Raises:
        ConfigError: If the file is unreadable, a key is unknown, or validation fails
    """
    nested: dict[str, Any] = {}
    for key, value in (defaults or {}).items():
        _assign_dotted(nested, key, value)

    if config_path is not None:
        try:
            file_values = json.loads(Path(config_path).read_text(encoding="utf-8"))
        except (OSError, json.JSONDecodeError) as e:
            raise ConfigError(f"Could not read config file {config_path}: {e}") from e
        if not isinstance(file_values, dict):
            raise ConfigError(f"Config file {config_path} must hold a JSON object")
        for key, value in file_values.items():
            _assign_dotted(nested, key, value)

    for key, value in (overrides or {}).items():
        if value is not None:
            _assign_dotted(nested, key, value)

    unknown_sections = set(nested) - set(RunConfig.model_fields)
    if unknown_sections:
        raise ConfigError(f"Unknown config sections: {sorted(unknown_sections)}")

    try:
        return RunConfig.model_validate(nested)
    except ValidationError as e:
        raise ConfigError(f"Invalid run configuration: {e}") from e
