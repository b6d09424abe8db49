"""Exception types shared across the package."""


class QSentryError(Exception):
    """Base class for all errors raised by qsentry."""


class ShapeError(QSentryError, ValueError):
    """An array or index has the wrong shape or lies out of range."""


class DomainError(QSentryError, ValueError):
    """An input is well-formed but outside the domain of the operation."""


class ConfigError(QSentryError, ValueError):
    """A configuration value is invalid or inconsistent."""


class FormatError(QSentryError, ValueError):
    """A binary or text input does not follow the expected format."""


class LengthError(FormatError):
    """A binary payload is shorter than its header declares."""


class RankError(QSentryError, ValueError):
    """A matrix does not have the rank required by a decomposition."""


class UnsupportedGateError(QSentryError, ValueError):
    """A gate cannot be differentiated with the requested method."""


class TrainingError(QSentryError, RuntimeError):
    """Training diverged."""

    def __init__(self, message: str, epoch: int):
        super().__init__(f"{message} (epoch {epoch})")
        self.epoch = epoch
