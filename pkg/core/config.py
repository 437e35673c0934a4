from __future__ import annotations

import hashlib
import json
import logging
import tomllib
from pathlib import Path

from pydantic import Field, ValidationError
from pydantic_settings import BaseSettings, SettingsConfigDict

from core.errors import ConfigError
from core.schemas.experiment import ExperimentConfig

logger = logging.getLogger("flowlab.config")


class Settings(BaseSettings):
    out: Path | None = None
    log_level: str = "INFO"
    threads: int = Field(default=1, ge=1)
    seed: int | None = Field(default=None, ge=0)

    model_config = SettingsConfigDict(
        env_prefix="FLOWLAB_", env_file=".env", env_file_encoding="utf-8", extra="ignore"
    )


def _validation_message(exc: ValidationError) -> tuple[str, list[dict]]:
    problems = [
        {"location": ".".join(str(part) for part in err["loc"]), "message": err["msg"]}
        for err in exc.errors()
    ]
    first = problems[0] if problems else {"location": "", "message": "invalid"}
    return f"{first['location']}: {first['message']}", problems


def parse_experiment_config(raw: dict) -> ExperimentConfig:
    try:
        return ExperimentConfig.model_validate(raw)
    except ValidationError as exc:
        message, problems = _validation_message(exc)
        raise ConfigError(f"invalid configuration ({message})", {"errors": problems}) from exc


def load_experiment_config(path: str | Path | None) -> ExperimentConfig:
    """Read a TOML experiment file; ``None`` yields the all-defaults configuration."""
    if path is None:
        return ExperimentConfig()
    path = Path(path)
    try:
        with path.open("rb") as handle:
            raw = tomllib.load(handle)
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except (tomllib.TOMLDecodeError, UnicodeDecodeError) as exc:
        raise ConfigError(f"config file is not valid TOML: {exc}", {"path": str(path)}) from exc
    except OSError as exc:
        raise ConfigError(f"cannot read config file {path}: {exc.strerror or exc}", {"path": str(path)}) from exc
    config = parse_experiment_config(raw)
    logger.info("Loaded experiment config from %s", path)
    return config


def config_digest(config: ExperimentConfig) -> str:
    canonical = json.dumps(config.model_dump(mode="json"), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()
