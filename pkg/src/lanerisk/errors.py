"""Exception types shared across the package."""


class LaneRiskError(Exception):
    """Base class for all package errors."""


class DimensionError(LaneRiskError, ValueError):
    """Operand shapes do not satisfy an operation's contract."""


class StateError(LaneRiskError, RuntimeError):
    """A backward pass was requested without a cached forward pass."""


class ConfigError(LaneRiskError, ValueError):
    pass


class FormatError(LaneRiskError, ValueError):
    """Malformed binary tensor or checkpoint data."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class DataError(LaneRiskError, ValueError):
    pass


class InputError(LaneRiskError, ValueError):
    pass


class MetricError(LaneRiskError, ValueError):
    pass
