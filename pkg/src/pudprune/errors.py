"""Exception taxonomy shared by every module."""


class PUDError(Exception):
    """Base class for all toolkit errors."""

    category = "RuntimeError"


class SizeError(PUDError, ValueError):
    category = "SizeError"


class ShapeError(SizeError):
    category = "ShapeError"


class DataError(PUDError, ValueError):
    category = "DataError"


class DomainError(PUDError, ValueError):
    category = "DomainError"


class ConfigError(PUDError, ValueError):
    category = "ConfigError"


class SpecError(PUDError, ValueError):
    category = "SpecError"


class PruneError(PUDError):
    category = "PruneError"


class FormatError(PUDError, ValueError):
    category = "FormatError"


class NumericError(PUDError, ArithmeticError):
    category = "NumericError"


class OracleError(PUDError):
    category = "OracleError"


class UsageError(PUDError):
    category = "UsageError"
