"""Exception types shared across the package."""


class OsxrayError(Exception):
    """Base class for all package errors."""


class DimensionError(OsxrayError):
    """Shapes of operands are incompatible for the requested operation."""


class ContractError(OsxrayError):
    """A caller violated an operation's precondition."""


class ConfigError(OsxrayError):
    """Invalid configuration value or combination."""


class IngestionError(OsxrayError):
    """A data file could not be read or decoded."""


class TrainingError(OsxrayError):
    """Training diverged or hit a non-recoverable numeric problem."""
