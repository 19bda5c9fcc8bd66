"""Exception types shared across the package."""


class EpdError(Exception):
    """Base class for package errors."""


class InvalidArgument(EpdError, ValueError):
    pass


class FormatError(EpdError):
    """A file did not match its expected layout."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class NumericFailure(EpdError, ArithmeticError):
    """Non-finite value produced during a forward pass or training."""

    def __init__(self, message, layer=None, epoch=None):
        super().__init__(message)
        self.layer = layer
        self.epoch = epoch


class NotFound(EpdError, KeyError):
    def __str__(self):
        return str(self.args[0]) if self.args else "not found"


class UndefinedCorrelation(InvalidArgument):
    """Correlation requested on constant or too-short input."""
