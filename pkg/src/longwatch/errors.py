"""Exception hierarchy shared by every stage of the pipeline."""


class LongwatchError(Exception):
    """Base class for all errors raised by this package."""


class BoundsError(LongwatchError, ValueError):
    pass


class DegenerateBearingError(LongwatchError, ValueError):
    pass


class ConfigError(LongwatchError, ValueError):
    pass


class DataError(LongwatchError):
    """Input data could not be loaded (too many malformed rows, duplicates...)."""


class SchemaError(DataError):
    def __init__(self, missing):
        self.missing = sorted(missing)
        super().__init__("missing required columns: " + ", ".join(self.missing))


class FetchError(LongwatchError):
    def __init__(self, message, status=None):
        super().__init__(message)
        self.status = status


class DivergenceUndefined(LongwatchError, ValueError):
    pass


class InvariantViolation(LongwatchError):
    """An internal consistency identity failed; indicates a bug, not bad input."""
