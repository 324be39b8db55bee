"""Exception types shared across the package.

Every failure mode callers are expected to handle gets its own class so the
CLI can map them to stable exit codes.
"""


class FodaError(Exception):
    """Base class for all package errors."""


class EmptyReportError(FodaError):
    """Tokenizing produced no tokens."""


class EmptyCorpusError(FodaError):
    """An operation that needs at least one report got none."""


class EmptyBatchError(FodaError):
    """A training step or loss was asked for zero studies."""


class ConfigError(FodaError):
    """A configuration value is missing, malformed, or out of range."""


class NotFoundError(FodaError):
    """A referenced parameter, node, or artifact does not exist."""


class ShapeError(FodaError):
    """Operands have incompatible shapes; message names both."""


class CheckError(FodaError):
    """A numerical invariant failed (non-finite value, failed certification)."""


class SingularDegreeError(FodaError):
    """Graph has an isolated node; the normalized Laplacian is undefined."""


class LoadError(FodaError):
    """A serialized artifact is malformed or has an unsupported version."""


class DivergedError(FodaError):
    """Training produced a non-finite loss."""
