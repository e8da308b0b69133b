"""Exception taxonomy shared across the package."""


class PclError(Exception):
    """Base class for all package errors."""


class ShapeError(PclError):
    """Operands have incompatible or unexpected dimensions."""


class NonFiniteError(PclError):
    """A NaN or Inf crossed an op boundary."""


class ContractError(PclError):
    """An operation was called outside its declared preconditions."""


class ConfigError(PclError):
    """Invalid or inconsistent run configuration."""


class DataError(PclError):
    """Dataset content violates an invariant."""


class ParseError(DataError):
    """A dataset file could not be parsed; carries the offending line."""

    def __init__(self, path, lineno, message):
        super().__init__(f"{path}:{lineno}: {message}")
        self.path = path
        self.lineno = lineno


class LoadError(PclError):
    """A checkpoint or embedding file is missing or malformed."""
