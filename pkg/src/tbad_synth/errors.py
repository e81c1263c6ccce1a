"""Error types shared by the library and the command line."""

import click


class TbadError(click.ClickException):
    """Base error; click renders it and exits with ``exit_code``."""

    category = "error"
    exit_code = 1

    def __init__(self, message: str):
        super().__init__(message)

    def format_message(self) -> str:
        return f"[{self.category}] {self.message}"


class ValidationError(TbadError, ValueError):
    """Invalid argument, configuration value or precondition."""

    category = "invalid-input"
    exit_code = 2


class ArtifactError(TbadError):
    """An upstream pipeline artifact is missing or does not match its manifest."""

    category = "missing-artifact"
    exit_code = 3


class CorruptFileError(TbadError):
    """A tensor or checkpoint container could not be decoded."""

    category = "corrupt-file"
    exit_code = 4

    def __init__(self, message: str, position: int = -1):
        if position >= 0:
            message = f"{message} (at byte {position})"
        super().__init__(message)
        self.position = position


class TrainingError(TbadError):
    """Training diverged or produced an unusable model."""

    category = "training-failed"
    exit_code = 5


class NumericalError(TbadError):
    """Non-finite values or numerically invalid inputs."""

    category = "numerical"
    exit_code = 6


class LeakageError(TbadError):
    """A stage tried to read the held-out test split."""

    category = "data-leakage"
    exit_code = 7


class StaleCacheError(TbadError):
    """A backward pass was given activations from a different forward pass."""

    category = "stale-cache"
    exit_code = 8
