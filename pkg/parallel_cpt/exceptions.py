"""Custom exceptions for the parallel-cpt toolkit.

This module defines a hierarchy of exceptions for precise error handling
throughout the pipeline. All exceptions inherit from a base exception
class so a caller can catch every toolkit error with a single handler.

Example:
    >>> try:
    ...     corpus = load_pairs("train.jsonl")
    ... except MalformedRecordError as e:
    ...     logger.error(f"Bad record: {e}")
    ... except ParallelCptError as e:
    ...     logger.error(f"Pipeline step failed: {e}")
"""

from typing import Any


class ParallelCptError(Exception):
    """Base exception for all toolkit errors.

    Attributes:
        message: Human-readable error description.
        details: Optional dictionary with additional error context.
    """

    def __init__(self, message: str, details: dict[str, Any] | None = None) -> None:
        """Initialize the exception.

        Args:
            message: Human-readable error description.
            details: Optional dictionary with additional error context.
        """
        super().__init__(message)
        self.message = message
        self.details = details or {}

    def __str__(self) -> str:
        """Return string representation of the exception."""
        if self.details:
            return f"{self.message} - Details: {self.details}"
        return self.message

    def to_dict(self) -> dict[str, Any]:
        """Convert exception to dictionary for JSON serialization.

        Returns:
            Dictionary with error information.
        """
        return {
            "error": self.__class__.__name__,
            "message": self.message,
            "details": self.details,
        }


# =============================================================================
# Configuration Errors
# =============================================================================


class ConfigurationError(ParallelCptError):
    """Raised when toolkit or experiment configuration is invalid."""


class EnvironmentVariableError(ConfigurationError):
    """Raised when an environment variable holds an unusable value.

    Attributes:
        variable_name: Name of the offending environment variable.
    """

    def __init__(
        self,
        variable_name: str,
        message: str | None = None,
        details: dict[str, Any] | None = None,
    ) -> None:
        self.variable_name = variable_name
        msg = message or f"Invalid environment variable: {variable_name}"
        super().__init__(msg, details={"variable": variable_name, **(details or {})})


class ConfigFileError(ConfigurationError):
    """Raised when a config, template or experiment file cannot be read.

    Attributes:
        file_path: Path of the file.
    """

    def __init__(
        self,
        file_path: str,
        original_error: Exception | None = None,
        message: str | None = None,
    ) -> None:
        self.file_path = file_path
        msg = message or f"Failed to read file: {file_path}"
        if original_error:
            msg = f"{msg} - {original_error}"
        super().__init__(
            msg,
            details={
                "file_path": file_path,
                "original_error": str(original_error) if original_error else None,
            },
        )


class ConfigFileParseError(ConfigFileError):
    """Raised when a JSON/YAML file is not parseable."""

    def __init__(self, file_path: str, original_error: Exception | None = None) -> None:
        super().__init__(
            file_path,
            original_error,
            message=f"Failed to parse file: {file_path}",
        )


# =============================================================================
# Corpus Errors
# =============================================================================


class CorpusError(ParallelCptError):
    """Base exception for parallel corpus construction and I/O."""


class MalformedRecordError(CorpusError):
    """Raised when a line of a record file cannot be turned into a record.

    The message always starts with ``line N:`` so the offending line can be
    found directly.

    Attributes:
        line_number: 1-based line number in the file.
        reason: Short description of the problem.
    """

    def __init__(self, path: str, line_number: int, reason: str) -> None:
        self.line_number = line_number
        self.reason = reason
        super().__init__(
            f"line {line_number}: {reason}",
            details={"path": path, "line": line_number},
        )


class DuplicatePairIdError(CorpusError):
    """Raised when two pairs of one corpus share an id."""

    def __init__(self, pair_id: int) -> None:
        self.pair_id = pair_id
        super().__init__(f"Duplicate pair id: {pair_id}", details={"pair_id": pair_id})


# =============================================================================
# Filter Errors
# =============================================================================


class FilterError(ParallelCptError):
    """Base exception for similarity scoring and band filtering."""


class VectorShapeError(FilterError):
    """Raised for mismatched dimensions or zero vectors."""


class EmbeddingError(FilterError):
    """Raised when the embedding provider fails on a pair.

    Attributes:
        pair_id: Id of the pair being embedded.
    """

    def __init__(self, pair_id: int, original_error: Exception | None = None) -> None:
        self.pair_id = pair_id
        msg = f"Embedding failed for pair {pair_id}"
        if original_error:
            msg = f"{msg} - {original_error}"
        super().__init__(
            msg,
            details={
                "pair_id": pair_id,
                "original_error": str(original_error) if original_error else None,
            },
        )


class MissingSimilarityError(FilterError):
    """Raised when band filtering meets a pair without a similarity score."""

    def __init__(self, pair_id: int) -> None:
        self.pair_id = pair_id
        super().__init__(
            f"Pair {pair_id} has no similarity score; run score_corpus first",
            details={"pair_id": pair_id},
        )


# =============================================================================
# Format Errors
# =============================================================================


class FormatError(ParallelCptError):
    """Base exception for continual pre-training document construction."""


class MarkerLookupError(FormatError):
    """Raised when a marker format has no entry for a direction or language.

    Attributes:
        marker: Marker format kind.
        key: The direction or language that was looked up.
    """

    def __init__(self, marker: str, key: str) -> None:
        self.marker = marker
        self.key = key
        super().__init__(
            f"{marker} marker has no entry for {key}",
            details={"marker": marker, "key": key},
        )


class MixPairingError(FormatError):
    """Raised when Mix ordering cannot build disjoint direction index sets."""


class ReplayError(FormatError):
    """Raised for invalid replay mixing requests."""


# =============================================================================
# Tokenization and Packing Errors
# =============================================================================


class TokenizationError(ParallelCptError):
    """Raised when a document cannot be tokenized.

    Attributes:
        origin: Origin id of the failing document.
    """

    def __init__(self, origin: int | str, original_error: Exception | None = None) -> None:
        self.origin = origin
        msg = f"Tokenization failed for document {origin}"
        if original_error:
            msg = f"{msg} - {original_error}"
        super().__init__(msg, details={"origin": origin})


class PackFileError(ParallelCptError):
    """Raised when a packed or SFT binary file is invalid.

    Attributes:
        file_path: Path of the file.
    """

    def __init__(self, file_path: str, reason: str) -> None:
        self.file_path = file_path
        super().__init__(f"{file_path}: {reason}", details={"file_path": file_path})


# =============================================================================
# SFT Errors
# =============================================================================


class SftError(ParallelCptError):
    """Base exception for supervised fine-tuning example construction."""


class PromptDirectionError(SftError):
    """Raised when a prompt template is used with a pair of another direction."""

    def __init__(self, expected: str, actual: str) -> None:
        super().__init__(
            f"Template direction {expected} does not match pair direction {actual}",
            details={"expected": expected, "actual": actual},
        )


class EmptyTargetError(SftError):
    """Raised when an example would have no supervised target token."""


class LossShapeError(SftError):
    """Raised when logits and an example disagree in shape."""


# =============================================================================
# Training Errors
# =============================================================================


class TrainingError(ParallelCptError):
    """Base exception for model construction, training and decoding."""


class DivergenceError(TrainingError):
    """Raised when the training loss becomes NaN or infinite.

    Attributes:
        last_finite_step: Last step whose loss was finite (-1 if none).
    """

    def __init__(self, last_finite_step: int, step: int) -> None:
        self.last_finite_step = last_finite_step
        super().__init__(
            f"Training diverged at step {step}",
            details={"step": step, "last_finite_step": last_finite_step},
        )


class AdapterTargetError(TrainingError):
    """Raised for an unknown adapter target role."""

    def __init__(self, role: str, known: list[str]) -> None:
        self.role = role
        super().__init__(
            f"Unknown adapter target: {role}",
            details={"role": role, "known": known},
        )


class TokenRangeError(TrainingError):
    """Raised when a token id does not fit the model vocabulary."""

    def __init__(self, token_id: int, vocab_size: int) -> None:
        super().__init__(
            f"Token id {token_id} out of range for vocabulary of {vocab_size}",
            details={"token_id": token_id, "vocab_size": vocab_size},
        )


class CheckpointFileError(TrainingError):
    """Raised when a checkpoint file cannot be read or written."""

    def __init__(self, file_path: str, reason: str) -> None:
        self.file_path = file_path
        super().__init__(f"{file_path}: {reason}", details={"file_path": file_path})


# =============================================================================
# Evaluation Errors
# =============================================================================


class EvaluationError(ParallelCptError):
    """Base exception for scoring and significance testing."""


class LengthMismatchError(EvaluationError):
    """Raised when hypothesis and reference sequences differ in length."""

    def __init__(self, expected: int, actual: int, what: str = "hypotheses") -> None:
        super().__init__(
            f"Length mismatch: {actual} {what} for {expected} references",
            details={"expected": expected, "actual": actual},
        )


class ExperimentError(ParallelCptError):
    """Base exception for the experiment matrix runner."""


class CellFailedError(ExperimentError):
    """Raised inside a cell worker; recorded in the matrix, never propagated."""

    def __init__(self, cell_id: str, original_error: Exception) -> None:
        self.cell_id = cell_id
        super().__init__(
            f"Cell {cell_id} failed - {original_error}",
            details={"cell_id": cell_id, "error": type(original_error).__name__},
        )


# =============================================================================
# Warnings
# =============================================================================


class ShortStreamWarning(UserWarning):
    """Issued when a token stream is too short to yield a single window."""
