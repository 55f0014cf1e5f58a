"""Exception taxonomy shared across the package."""


class TokengateError(Exception):
    """Base class for all package-specific failures."""


class ShapeError(TokengateError):
    """Operands or tensors have incompatible dimensions."""


class InputError(TokengateError):
    """Malformed or out-of-domain input data (non-finite entries, empty
    streams, unparseable files)."""


class ParameterError(TokengateError):
    """A numeric parameter is outside its legal range."""


class ConfigError(TokengateError):
    """A configuration key or value failed schema validation."""


class MissingResourceError(TokengateError):
    """A required file, directory, or named tensor does not exist."""


class NumericError(TokengateError):
    """A computation produced non-finite values.

    Carries a diagnostic dump so callers (CLI, trainer) can report the
    state that diverged instead of a bare stack trace.
    """

    def __init__(self, message: str, dump: dict | None = None):
        super().__init__(message)
        self.dump = dump if dump is not None else {}
