class CxrNetError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(CxrNetError, ValueError):
    pass


class UsageError(CxrNetError, ValueError):
    pass


class StateError(CxrNetError, RuntimeError):
    pass


class NumericError(CxrNetError, FloatingPointError):
    """A non-finite value was produced; ``index`` locates it when known."""

    def __init__(self, message: str, index=None, name: str | None = None):
        super().__init__(message)
        self.index = index
        self.name = name


class ConfigError(CxrNetError, ValueError):
    pass


class CheckpointError(CxrNetError, ValueError):
    pass


class IntegrityError(CheckpointError):
    pass


class DataFormatError(CxrNetError, ValueError):
    pass


class LabelError(DataFormatError):
    pass


class SplitError(CxrNetError, ValueError):
    pass


class MetricError(CxrNetError, ValueError):
    pass


class DivergenceError(NumericError):
    """Training produced a non-finite loss; carries the last good model state."""

    def __init__(self, message: str, last_good_state=None, history=None):
        super().__init__(message)
        self.last_good_state = last_good_state
        self.history = history
