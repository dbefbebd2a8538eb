"""Exception hierarchy shared by all modules."""


class EFHVAEError(Exception):
    """Base class for package errors."""


class ConfigurationError(EFHVAEError, ValueError):
    """Invalid configuration or missing prerequisite (e.g. stage-1 checkpoint)."""


class DataError(EFHVAEError, ValueError):
    """Input data is empty, malformed or inconsistent with a model."""


class SplitError(DataError):
    pass


class DimensionError(EFHVAEError, ValueError):
    """Array shapes do not agree."""


class NumericError(EFHVAEError, ArithmeticError):
    """Non-finite loss or gradient."""
