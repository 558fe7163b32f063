"""
Pipeline exception hierarchy.
Every error carries a human-readable message plus a details dict for logging.
"""
from typing import Any, Dict, Optional


class PipelineError(Exception):
    """Base class for all pipeline failures."""

    def __init__(self, message: str, details: Optional[Dict[str, Any]] = None):
        super().__init__(message)
        self.message = message
        self.details = details or {}

    def __str__(self) -> str:
        return self.message


class ConfigError(PipelineError):
    """Invalid or missing configuration value."""

    def __init__(self, message: str, key: Optional[str] = None, details: Optional[Dict[str, Any]] = None):
        super().__init__(message, details)
        self.key = key


class ConfigPathError(ConfigError):
    """A config file or an input path named by the config does not exist."""

    def __init__(self, message: str, path: str, key: Optional[str] = None,
                 details: Optional[Dict[str, Any]] = None):
        super().__init__(message, key, details)
        self.path = path


class PrerequisiteError(PipelineError):
    """An upstream artifact is missing."""

    def __init__(self, message: str, prerequisite: str, details: Optional[Dict[str, Any]] = None):
        super().__init__(message, details)
        self.prerequisite = prerequisite


class ArtifactMismatchError(PipelineError):
    """An upstream artifact was produced by a different configuration."""

    def __init__(self, message: str, stage: str, details: Optional[Dict[str, Any]] = None):
        super().__init__(message, details)
        self.stage = stage


class ParseError(PipelineError):
    """Malformed input record."""

    def __init__(self, message: str, path: Optional[str] = None, line: Optional[int] = None,
                 details: Optional[Dict[str, Any]] = None):
        location = f"{path}:{line}: " if path and line else (f"line {line}: " if line else "")
        super().__init__(f"{location}{message}", details)
        self.path = path
        self.line = line


class ConflictError(PipelineError):
    """Duplicate identifier."""


class CoverageError(PipelineError):
    """Required ids are missing from an input."""

    def __init__(self, message: str, missing: list, details: Optional[Dict[str, Any]] = None):
        super().__init__(message, details)
        self.missing = missing


class DataError(PipelineError):
    """Non-finite or otherwise unusable numeric data."""


class DegenerateInputError(PipelineError):
    """Input too small or too uniform for the requested computation."""


class ContractViolation(PipelineError):
    """A caller broke a documented precondition."""


class CapacityError(PipelineError):
    """Not enough free codes to resolve a collision group."""


class ExtractionError(PipelineError):
    """Semantic extraction failed after all retries."""


class ExternalServiceError(PipelineError):
    """A remote service returned an unusable response."""

    def __init__(self, message: str, service: str, details: Optional[Dict[str, Any]] = None):
        super().__init__(message, details)
        self.service = service


class CorpusBuildError(PipelineError):
    """An instruction example failed validation."""

    def __init__(self, message: str, task: str, details: Optional[Dict[str, Any]] = None):
        super().__init__(message, details)
        self.task = task


class TrainingDivergedError(PipelineError):
    """Loss became NaN or infinite."""
