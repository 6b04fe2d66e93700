"""Exception hierarchy shared by every module.

The CLI maps these onto exit codes, so each failure family gets its own class.
"""


class QConsolError(Exception):
    """Base class for all package errors."""


class ConfigError(QConsolError, ValueError):
    """Invalid configuration, unknown key, or inconsistent settings."""

    def __init__(self, message: str, key: str | None = None):
        self.key = key
        super().__init__(f"{key}: {message}" if key else message)


class DomainError(QConsolError, ValueError):
    """An argument lies outside the domain an operation accepts."""


class NumericError(QConsolError, ArithmeticError):
    """A NaN or infinity appeared where finite values are required."""


class TrainingError(NumericError):
    """Field optimization diverged."""

    def __init__(self, message: str, step: int):
        self.step = step
        super().__init__(f"step {step}: {message}")


class EvaluationError(QConsolError, RuntimeError):
    """A metric could not be evaluated (empty masks, no visible points...)."""


class FormatError(QConsolError, ValueError):
    """A binary file failed header or length validation."""
