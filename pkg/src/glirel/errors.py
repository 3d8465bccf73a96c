"""Exception types shared across the package."""


class GlirelError(Exception):
    """Base class for all package-specific errors."""


class InvalidInputError(GlirelError, ValueError):
    """A caller-supplied value violates an operation's precondition."""


class ConfigError(GlirelError, ValueError):
    """A configuration is internally inconsistent or unusable."""


class InvalidStateError(GlirelError, RuntimeError):
    """An internal contract between pipeline stages was violated."""


class TrainingDivergedError(GlirelError, RuntimeError):
    """Training produced a non-finite loss; no update was applied."""


class AnnotationError(GlirelError, RuntimeError):
    """An annotation job failed after exhausting its retries."""
