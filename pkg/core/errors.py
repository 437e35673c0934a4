from __future__ import annotations

import json
import logging
import sys
from typing import Any

from core.schemas.base import ErrorDetails, ErrorResponse

logger = logging.getLogger("flowlab.errors")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2


class FlowlabError(Exception):
    code = "FLOWLAB_ERROR"
    exit_code = EXIT_FAILURE

    def __init__(self, message: str, details: dict[str, Any] | None = None) -> None:
        super().__init__(message)
        self.message = message
        self.details = details


class InvalidArgumentError(FlowlabError, ValueError):
    code = "INVALID_ARGUMENT"
    exit_code = EXIT_CONFIG


class DatasetError(FlowlabError):
    code = "DATASET_ERROR"
    exit_code = EXIT_CONFIG

    def __init__(
        self, message: str, row: int | None = None, column: int | None = None
    ) -> None:
        details = {"row": row, "column": column} if row is not None else None
        super().__init__(message, details)
        self.row = row
        self.column = column


class ConfigError(FlowlabError):
    code = "CONFIG_ERROR"
    exit_code = EXIT_CONFIG


class IntegrationError(FlowlabError):
    code = "INTEGRATION_ERROR"

    def __init__(self, message: str, node_index: int) -> None:
        super().__init__(message, {"node_index": node_index})
        self.node_index = node_index


class ConvergenceError(FlowlabError):
    code = "CONVERGENCE_ERROR"

    def __init__(self, message: str, lower: float, upper: float) -> None:
        super().__init__(message, {"lower": lower, "upper": upper})
        self.lower = lower
        self.upper = upper


class QuadratureError(FlowlabError):
    code = "QUADRATURE_ERROR"


class IllConditionedError(FlowlabError):
    code = "ILL_CONDITIONED"


class NonFiniteGradientError(FlowlabError):
    code = "NON_FINITE_GRADIENT"


class TrainingDivergedError(FlowlabError):
    code = "TRAINING_DIVERGED"


class CheckpointError(FlowlabError):
    code = "CHECKPOINT_ERROR"
    exit_code = EXIT_CONFIG


class InvariantFailure(FlowlabError):
    code = "INVARIANT_FAILURE"


def error_payload(code: str, message: str, details: dict | None = None) -> dict:
    return ErrorResponse(
        error=ErrorDetails(code=code, message=message, details=details)
    ).model_dump(by_alias=True)


def handle_exception(exc: BaseException, debug: bool = False) -> int:
    """Log ``exc``, print the error envelope to stderr and return an exit code."""
    if isinstance(exc, FlowlabError):
        logger.error("%s: %s", exc.code, exc.message)
        payload = error_payload(exc.code, exc.message, exc.details)
        exit_code = exc.exit_code
    else:
        logger.exception("Unhandled error", exc_info=exc)
        details = {"error": f"{exc.__class__.__name__}: {exc}"} if debug else None
        payload = error_payload("INTERNAL_ERROR", "Internal error", details)
        exit_code = EXIT_FAILURE
    print(json.dumps(payload, default=str), file=sys.stderr)
    return exit_code
