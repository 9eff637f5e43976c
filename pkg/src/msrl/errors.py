"""Exception hierarchy. CLI exit codes are attached to the classes."""


class MSRLError(Exception):
    exit_code = 3


class ValidationError(MSRLError, ValueError):
    """Input violates a documented invariant."""

    exit_code = 2


class SchemaVersionError(ValidationError):
    pass


class BatchConstructionError(MSRLError):
    """A group cannot supply enough admissible negatives."""


class DegenerateEmbeddingError(MSRLError, ArithmeticError):
    pass


class DivergenceError(MSRLError):
    """Training produced non-finite values or an exploding loss."""


class UsageError(MSRLError):
    exit_code = 1


class MalformedFileError(ValidationError):
    """File is not parseable in the documented layout (bad JSON, truncation)."""


class DimensionError(ValidationError):
    """Arrays disagree on d, c or B."""
