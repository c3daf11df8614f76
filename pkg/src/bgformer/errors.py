"""Exception hierarchy shared by every module."""


class BGFormerError(Exception):
    """Base class for all package errors."""


class ParseError(BGFormerError):
    pass


class NegativeCount(BGFormerError):
    pass


class EmptyMatrix(BGFormerError):
    pass


class InsufficientGenes(BGFormerError):
    pass


class ZeroLibrary(BGFormerError):
    pass


class ShapeMismatch(BGFormerError, ValueError):
    pass


class NonFinite(BGFormerError, FloatingPointError):
    """A NaN or Inf appeared where finite values are required.

    ``last_good`` optionally carries a parameter snapshot taken before the
    failure so callers can still persist a usable checkpoint.
    """

    def __init__(self, message, last_good=None):
        super().__init__(message)
        self.last_good = last_good


class ZeroVector(BGFormerError):
    pass


class LabelOutOfRange(BGFormerError, ValueError):
    pass


class DegenerateCluster(BGFormerError):
    pass


class InsufficientCells(BGFormerError):
    pass


class ConstructionError(BGFormerError):
    pass


class FormatError(BGFormerError):
    """A binary container (checkpoint or bundle) is malformed."""
