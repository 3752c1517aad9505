"""Configuration loader for the parallel-cpt toolkit.

Runtime configuration lives in Pydantic models loaded from environment
variables (optionally via a ``.env`` file). Structured files used by the
toolkit (experiment specs, prompt templates) are read through
:func:`load_structured_file`, which accepts JSON or YAML.

Example:
    >>> from parallel_cpt.config import load_config
    >>> config = load_config()
    >>> config.runtime.workers
    1

Environment Variables:
    PCPT_LOG_LEVEL: Logging level (default: INFO).
    PCPT_LOG_JSON: Use JSON console logs (default: false).
    PCPT_LOG_FILE: Optional JSON log file path.
    PCPT_WORKERS: Parallel experiment cells (default: 1).
    PCPT_TORCH_THREADS: torch intra-op threads, 0 keeps the torch default.
    PCPT_ARTIFACTS_DIR: Root directory for experiment artifacts.
    PCPT_SEED: Default seed for CLI commands (default: 0).
"""

from __future__ import annotations

import json
import os
from pathlib import Path
from typing import Any

import yaml
from dotenv import load_dotenv
from pydantic import BaseModel, Field, ValidationError, field_validator

from .exceptions import (
    ConfigFileError,
    ConfigFileParseError,
    ConfigurationError,
    EnvironmentVariableError,
)
from .logging_config import get_logger

logger = get_logger(__name__)

_TRUE_VALUES = {"1", "true", "yes", "on"}


class LoggingConfig(BaseModel):
    """Logging configuration.

    Attributes:
        log_level: Logging level.
        log_json: Use JSON format for console logs.
        log_file: Optional log file path.
    """

    log_level: str = Field(default="INFO", description="Logging level")
    log_json: bool = Field(default=False, description="Use JSON format for logs")
    log_file: str | None = Field(default=None, description="Optional log file path")

    @field_validator("log_level")
    @classmethod
    def validate_log_level(cls, v: str) -> str:
        """Validate and upper-case the log level.

        Raises:
            ValueError: If the log level is invalid.
        """
        valid_levels = {"DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"}
        v_upper = v.upper()
        if v_upper not in valid_levels:
            raise ValueError(f"Invalid log level: {v}. Must be one of {valid_levels}")
        return v_upper

    model_config = {"extra": "ignore"}


class RuntimeConfig(BaseModel):
    """Execution settings shared by CLI commands.

    Attributes:
        workers: Maximum number of experiment cells run in parallel.
        torch_threads: torch intra-op thread count (0 = torch default).
        artifacts_dir: Root directory for experiment artifacts.
        default_seed: Seed used when a command is not given one.
    """

    workers: int = Field(default=1, ge=1, le=256, description="Parallel cells")
    torch_threads: int = Field(default=0, ge=0, description="torch threads (0 = default)")
    artifacts_dir: str = Field(default="artifacts", description="Artifacts root")
    default_seed: int = Field(default=0, ge=0, description="Default seed")

    model_config = {"extra": "ignore"}


class Config(BaseModel):
    """Main configuration container."""

    logging: LoggingConfig = Field(default_factory=LoggingConfig)
    runtime: RuntimeConfig = Field(default_factory=RuntimeConfig)

    model_config = {"extra": "ignore"}


def _env_flag(name: str, default: str = "false") -> bool:
    return os.getenv(name, default).strip().lower() in _TRUE_VALUES


def _env_int(name: str, default: int) -> int:
    """Integer environment variable.

    Raises:
        EnvironmentVariableError: If the value is not an integer.
    """
    raw = os.getenv(name)
    if raw is None or not raw.strip():
        return default
    try:
        return int(raw)
    except ValueError:
        raise EnvironmentVariableError(
            name, message=f"{name} must be an integer, got {raw!r}", details={"value": raw}
        ) from None


def load_config(env_file: Path | None = None) -> Config:
    """Load configuration from environment variables.

    Args:
        env_file: Optional path to a .env file. If not provided,
            searches for .env in the current directory.

    Returns:
        Validated configuration object.

    Raises:
        EnvironmentVariableError: If an integer variable does not parse.
        ConfigurationError: If a value is invalid.
    """
    if env_file:
        load_dotenv(env_file)
    else:
        load_dotenv()

    try:
        logging_config = LoggingConfig(
            log_level=os.getenv("PCPT_LOG_LEVEL", "INFO"),
            log_json=_env_flag("PCPT_LOG_JSON"),
            log_file=os.getenv("PCPT_LOG_FILE") or None,
        )
    except ValidationError as e:
        raise ConfigurationError(f"Invalid logging configuration: {e}") from e

    try:
        runtime_config = RuntimeConfig(
            workers=_env_int("PCPT_WORKERS", 1),
            torch_threads=_env_int("PCPT_TORCH_THREADS", 0),
            artifacts_dir=os.getenv("PCPT_ARTIFACTS_DIR", "artifacts"),
            default_seed=_env_int("PCPT_SEED", 0),
        )
    except ValidationError as e:
        raise ConfigurationError(f"Invalid runtime configuration: {e}") from e

    config = Config(logging=logging_config, runtime=runtime_config)

    logger.info(
        "Configuration loaded",
        extra={"workers": runtime_config.workers, "artifacts_dir": runtime_config.artifacts_dir},
    )
    logger.debug(
        "Logging configuration",
        extra={"log_level": logging_config.log_level, "log_json": logging_config.log_json},
    )
    return config


def load_structured_file(file_path: str | Path) -> dict[str, Any]:
    """Load a JSON or YAML mapping from disk.

    The format is chosen by suffix; unknown suffixes are tried as JSON
    first, then YAML.

    Args:
        file_path: Path to the file.

    Returns:
        The parsed mapping (empty dict for an empty file).

    Raises:
        ConfigFileError: If the file does not exist or cannot be read.
        ConfigFileParseError: If the content is not valid JSON/YAML or not a mapping.
    """
    path = Path(file_path)
    if not path.exists():
        raise ConfigFileError(str(path), message=f"File not found: {path}")

    try:
        content = path.read_text(encoding="utf-8")
        if path.suffix in (".yaml", ".yml"):
            result = yaml.safe_load(content)
        elif path.suffix == ".json":
            result = json.loads(content)
        else:
            try:
                result = json.loads(content)
            except json.JSONDecodeError:
                result = yaml.safe_load(content)
    except (json.JSONDecodeError, yaml.YAMLError) as e:
        raise ConfigFileParseError(str(path), e) from e
    except OSError as e:
        raise ConfigFileError(str(path), e) from e

    if result is None:
        return {}
    if not isinstance(result, dict):
        raise ConfigFileParseError(str(path), TypeError("top-level value is not a mapping"))
    return dict(result)
