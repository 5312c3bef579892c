"""Exception hierarchy shared across the package.

Each category maps onto a CLI exit code (see :mod:`sslstm.cli`).
"""

from __future__ import annotations


class SslstmError(Exception):
    """Base class for all package errors."""

    exit_code = 1


class ShapeError(SslstmError, ValueError):
    """Operand shapes are incompatible."""

    exit_code = 4


class ConfigError(SslstmError, ValueError):
    exit_code = 2


class DataError(SslstmError, ValueError):
    exit_code = 3


class TrainingError(SslstmError, RuntimeError):
    exit_code = 4


class EvaluationError(SslstmError, ValueError):
    exit_code = 4
