"""Exception types shared across the package."""


class ShapeError(ValueError):
    """Operand dimensions are incompatible."""


class NumericError(FloatingPointError):
    """An operation produced NaN or Inf."""


class StateError(RuntimeError):
    """An object was used in the wrong lifecycle state."""


class FormatError(ValueError):
    """A serialized file is malformed, truncated or of the wrong version."""


class ConfigError(ValueError):
    """An experiment config is malformed.

    ``line`` is the 1-based line number in the config file when known.
    """

    def __init__(self, message, line=None, path=None):
        self.line = line
        self.path = path
        where = ""
        if path is not None:
            where = f"{path}:"
        if line is not None:
            where += f"{line}: "
        elif where:
            where += " "
        super().__init__(f"{where}{message}")


class SpecMismatchError(FormatError):
    """A checkpoint was loaded against a different model spec."""
