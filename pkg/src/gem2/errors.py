"""Exception hierarchy shared by every gem2 module."""


class Gem2Error(Exception):
    """Base class for all gem2 errors."""


class ShapeError(Gem2Error, ValueError):
    pass


class NumericError(Gem2Error, ArithmeticError):
    """A NaN or Inf appeared in a forward value or a gradient."""


class DegenerateSliceError(Gem2Error, ValueError):
    """A reduction slice had no unmasked entries."""


class TapeError(Gem2Error, RuntimeError):
    pass


class ConfigError(Gem2Error, ValueError):
    pass


class ConfigMismatchError(ConfigError):
    """Two configurations that must agree differ.

    ``diffs`` is a list of ``(field, expected, found)`` triples.
    """

    def __init__(self, message, diffs=()):
        super().__init__(message)
        self.diffs = list(diffs)


class FeatureError(Gem2Error, ValueError):
    pass


class InputError(Gem2Error, ValueError):
    pass


class DivergenceError(NumericError):
    """Training loss became non-finite; ``checkpoint`` holds the last good state."""

    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint
