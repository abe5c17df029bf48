"""Exception types shared across the package."""


class ValidationError(ValueError):
    """Bad argument, config field or input shape."""


class DataError(IOError):
    """An item on disk could not be read or decoded."""

    def __init__(self, message, path=None):
        super().__init__(f"{message}: {path}" if path is not None else message)
        self.path = path


class StateError(RuntimeError):
    """An operation was called on a model or cascade that is not ready for it."""


class NumericError(FloatingPointError):
    """Non-finite values appeared during a forward pass or a training step."""
