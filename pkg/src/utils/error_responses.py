"""
Structured Error Response System
Maps pipeline exceptions to exit codes and consistent error payloads.
"""
from enum import Enum
from typing import Dict, Any, Optional

from src.exceptions.base import (
    ArtifactMismatchError,
    ConfigError,
    ConfigPathError,
    PipelineError,
    PrerequisiteError,
)


class ExitCode(Enum):
    """Process exit codes."""
    SUCCESS = 0
    CONFIG_ERROR = 2
    PREREQUISITE_MISSING = 3
    RUNTIME_FAILURE = 4


class ErrorCode(Enum):
    """Standard error codes for the pipeline."""
    # Configuration Errors (2xxx)
    CONFIG_INVALID = 2001
    CONFIG_PATH_MISSING = 2002

    # Prerequisite Errors (3xxx)
    PREREQUISITE_MISSING = 3001
    ARTIFACT_MISMATCH = 3002

    # Runtime Errors (4xxx)
    RUNTIME_FAILURE = 4001
    UNEXPECTED = 4999


def classify(exc: BaseException) -> ErrorCode:
    """Pick the error code for an exception."""
    if isinstance(exc, ConfigPathError):
        return ErrorCode.CONFIG_PATH_MISSING
    if isinstance(exc, ConfigError):
        return ErrorCode.CONFIG_INVALID
    if isinstance(exc, ArtifactMismatchError):
        return ErrorCode.ARTIFACT_MISMATCH
    if isinstance(exc, PrerequisiteError):
        return ErrorCode.PREREQUISITE_MISSING
    if isinstance(exc, PipelineError):
        return ErrorCode.RUNTIME_FAILURE
    return ErrorCode.UNEXPECTED


def exit_code_for(exc: BaseException) -> ExitCode:
    """Map an exception to the process exit code."""
    code = classify(exc)
    if code.value // 1000 == 2:
        return ExitCode.CONFIG_ERROR
    if code.value // 1000 == 3:
        return ExitCode.PREREQUISITE_MISSING
    return ExitCode.RUNTIME_FAILURE


class ErrorResponse:
    """Structured error payload builder."""

    @staticmethod
    def create(
        error_code: ErrorCode,
        message: str,
        details: Optional[Dict[str, Any]] = None,
        run_id: Optional[str] = None
    ) -> Dict[str, Any]:
        """Create a structured error payload.

        Args:
            error_code: Standard error code
            message: Human-readable error message
            details: Additional error details
            run_id: Correlation id of the run

        Returns:
            Structured error dictionary
        """
        return {
            "success": False,
            "error": {
                "code": error_code.value,
                "type": error_code.name,
                "message": message,
                "details": details or {},
                "run_id": run_id
            }
        }

    @staticmethod
    def from_exception(exc: BaseException, run_id: Optional[str] = None) -> Dict[str, Any]:
        """Build the payload for an exception, including any hints it carries."""
        details = dict(getattr(exc, "details", {}) or {})
        if isinstance(exc, PrerequisiteError):
            details["prerequisite"] = exc.prerequisite
        if isinstance(exc, ArtifactMismatchError):
            details["stage"] = exc.stage
        if isinstance(exc, ConfigError) and exc.key:
            details["key"] = exc.key
        if isinstance(exc, ConfigPathError):
            details["path"] = exc.path
        return ErrorResponse.create(classify(exc), str(exc), details=details, run_id=run_id)
