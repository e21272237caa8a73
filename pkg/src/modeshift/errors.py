"""Exception hierarchy shared across the package."""


class ModeShiftError(Exception):
    """Base class for all package errors."""


class InvalidInputError(ModeShiftError, ValueError):
    pass


class InvalidParameterError(ModeShiftError, ValueError):
    pass


class InvalidCostError(ModeShiftError, ValueError):
    pass


class NoAvailableModeError(ModeShiftError):
    """Raised when a choice is requested but every mode is unavailable."""


class MissingZoneError(ModeShiftError, KeyError):
    pass


class MissingAttributesError(ModeShiftError, KeyError):
    def __init__(self, keys):
        self.keys = list(keys)
        shown = ", ".join(map(str, self.keys[:10]))
        more = "" if len(self.keys) <= 10 else f" (+{len(self.keys) - 10} more)"
        super().__init__(f"missing attribute rows for: {shown}{more}")

    def __str__(self):
        return self.args[0]


class UndefinedRSquaredError(ModeShiftError, ValueError):
    pass


class UndefinedSharesError(ModeShiftError, ValueError):
    pass


class DegeneratePosteriorError(ModeShiftError):
    pass


class DivergenceError(ModeShiftError, FloatingPointError):
    pass


class InternalConsistencyError(ModeShiftError, AssertionError):
    pass


# --- data loading -----------------------------------------------------------

class DataError(ModeShiftError):
    """Base class for bundle ingestion failures (CLI exit code 3)."""


class MissingFileError(DataError, FileNotFoundError):
    pass


class SchemaError(DataError, ValueError):
    pass


class DanglingKeyError(DataError, KeyError):
    def __str__(self):
        return self.args[0] if self.args else ""


class NegativeValueError(DataError, ValueError):
    pass


class ModelFormatError(ModeShiftError, ValueError):
    """Raised when a persisted surrogate does not match the expected layout."""
