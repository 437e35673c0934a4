from __future__ import annotations

from typing import Any

from pydantic import BaseModel, ConfigDict
from pydantic.alias_generators import to_camel


class CamelModel(BaseModel):
    """Persisted files and reports: camelCase on disk, snake_case in code."""

    model_config = ConfigDict(alias_generator=to_camel, populate_by_name=True)


class ConfigSection(BaseModel):
    """Base for TOML config tables; unknown keys are configuration errors."""

    model_config = ConfigDict(extra="forbid", validate_default=True)


class ErrorDetails(CamelModel):
    code: str
    message: str
    details: dict[str, Any] | None = None


class ErrorResponse(CamelModel):
    error: ErrorDetails
