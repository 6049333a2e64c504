"""Exception hierarchy shared across the package.

Exit-code mapping for the CLI: usage errors are 1, data/format errors 2,
numeric errors 3. Every exception carries its code so the CLI can print a
single machine-parsable ``ERROR <code>:`` line.
"""


class TrialspanError(Exception):
    """Base class for all package errors."""

    exit_code = 2


class UsageError(TrialspanError):
    """Bad invocation: unknown flag, inconsistent config, missing argument."""

    exit_code = 1


class DataFormatError(TrialspanError):
    """Malformed or inconsistent input data or artifact files."""

    exit_code = 2


class XmlParseError(DataFormatError):
    """Registry XML is not well-formed. Carries the failing byte offset."""

    def __init__(self, message, byte_offset=None):
        super().__init__(message)
        self.byte_offset = byte_offset


class EmptyDatasetError(DataFormatError):
    """An operation that needs at least one record got none."""


class MissingEmbeddingError(DataFormatError):
    """A precomputed-cache provider was asked for a key it does not hold."""


class CacheFormatError(DataFormatError):
    """Embedding cache file violates its declared header."""


class CheckpointError(DataFormatError):
    """Checkpoint manifest and array file disagree."""


class NumericError(TrialspanError):
    """Non-finite values where finite ones are required. Names the tensor."""

    exit_code = 3


class SingularSystemError(NumericError):
    """Normal equations are singular; retry with a positive ridge penalty."""


class UndefinedMetricError(NumericError):
    """Metric undefined for this input (constant vector, too few samples)."""
