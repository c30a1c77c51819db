"""Exception hierarchy shared by every module.

Concrete classes also inherit from the closest builtin so callers that only
know ``ValueError``/``IndexError`` still catch them.
"""


class ClkdError(Exception):
    pass


class DimensionError(ClkdError, ValueError):
    pass


class RankError(DimensionError):
    pass


class ParameterError(ClkdError, ValueError):
    pass


class DegenerateBatchError(ParameterError):
    pass


class NonFiniteError(ClkdError, ValueError):
    pass


class LabelError(ClkdError, IndexError):
    pass


class StateError(ClkdError, RuntimeError):
    pass


class FormatError(ClkdError, ValueError):
    """Malformed binary input. ``offset`` is the byte position of the problem."""

    def __init__(self, message: str, offset: int | None = None):
        self.offset = offset
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)


class ConfigError(ClkdError, ValueError):
    """Invalid experiment configuration; ``path`` names the offending field."""

    def __init__(self, message: str, path: str | None = None):
        self.path = path
        if path:
            message = f"{path}: {message}"
        super().__init__(message)


class TrainingError(ClkdError, RuntimeError):
    """Non-finite loss during optimisation."""

    def __init__(self, message: str, epoch: int | None = None, batch: int | None = None):
        self.epoch = epoch
        self.batch = batch
        if epoch is not None:
            message = f"{message} (epoch {epoch}, batch {batch})"
        super().__init__(message)
