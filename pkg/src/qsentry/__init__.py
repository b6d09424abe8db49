"""Backdoor detection for quantum classifiers by clustering measurement statistics."""

from .errors import (
    ConfigError,
    DomainError,
    FormatError,
    LengthError,
    QSentryError,
    RankError,
    ShapeError,
    TrainingError,
    UnsupportedGateError,
)

__version__ = "0.1.0"
